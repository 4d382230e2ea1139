"""Optimization drivers: end-to-end training, progressive freeze-training,
and joint gate fine-tuning, plus the analytic backward-memory model.

Freezing works through ``requires_grad``: frozen tensors never cause ops to
be taped, so a frozen prefix costs no activation memory and its parameters
are bit-identical after any number of steps.  The memory model in
``memory_account`` mirrors the taped op sequence exactly (same shapes, same
op count), which a test pins against the tape's own accounting.

Determinism contract: one generator drives shuffling, chunk offsets,
augmentation, and Gumbel draws in a fixed order, so a seed reproduces
training bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import chunk_or_pad
from .diffcore import Tape, Tensor, backward
from .gating import GateParams, adaptive_separate, gate_named_parameters, gate_penalty
from .losses import eval_speech_sisdri, pit_loss
from .sepmodel import (
    ModelParams,
    SeparationConfig,
    clone_params,
    count_params,
    encode,
    init_params,
    mask_and_decode,
    named_parameters,
    separate,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr0: float = 1e-3
    lr_decay_every: int = 40
    lr_decay_factor: float = 1.0 / 3.0
    clip_norm: float = 5.0
    seed: int = 0
    augment: bool = True
    chunk_len: int | None = None  # None trains on full-length items

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr0", "lr_decay_factor", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.chunk_len is not None and self.chunk_len < 1:
            raise ValueError(f"chunk_len must be positive, got {self.chunk_len}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def clip_global_norm(named_grads, max_norm: float):
    """Scale the whole gradient set so its global L2 norm is at most max_norm.

    Returns (grads, pre-clip norm); at or under the bound the input list is
    returned untouched.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for name, g in named_grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if norm <= max_norm:
        return named_grads, norm
    scale = max_norm / norm
    return [(name, g * scale) for name, g in named_grads], norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, named_params, named_grads, lr: float) -> None:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    grads = dict(named_grads)
    state.t += 1
    b1t = 1.0 - ADAM_BETA1 ** state.t
    b2t = 1.0 - ADAM_BETA2 ** state.t
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Freezing


@dataclass
class FreezeMask:
    """Dot-delimited name prefixes whose parameters stay fixed."""

    prefixes: tuple = ()

    def __post_init__(self):
        self.prefixes = tuple(self.prefixes)

    def is_frozen(self, name: str) -> bool:
        return any(name == p or name.startswith(p + ".") for p in self.prefixes)


def stage_freeze_mask(config: SeparationConfig, stage: int) -> FreezeMask:
    """Progressive-stage mask: stage 0 trains the encoder, every stage trains
    only its own block and head pair."""
    m = len(config.blocks)
    if not 0 <= stage < m:
        raise ValueError(f"stage {stage} out of range for {m} blocks")
    frozen = []
    if stage > 0:
        frozen += ["encoder", "bottleneck"]
    for j in range(m):
        if j != stage:
            frozen += [f"block{j}", f"mask{j}", f"dec{j}"]
    return FreezeMask(tuple(frozen))


def apply_freeze(params_named, mask: FreezeMask | None):
    """Set requires_grad from the mask; returns (trainable, frozen) name lists."""
    trainable, frozen = [], []
    for name, t in params_named:
        if mask is not None and mask.is_frozen(name):
            t.requires_grad = False
            frozen.append((name, t))
        else:
            t.requires_grad = True
            trainable.append((name, t))
    return trainable, frozen


def augment_batch(sources_list, rng):
    """Shuffle each source slot independently across batch items and re-sum.

    Slot identity is preserved (speaker 1 stays speaker 1), so band structure
    and the noise slot survive the shuffle.  Returns (mixtures, sources).
    """
    shapes = {s.shape for s in sources_list}
    if len(shapes) != 1:
        raise ValueError(f"augment_batch needs uniform shapes, got {sorted(shapes)}")
    B = len(sources_list)
    S = sources_list[0].shape[0]
    out = [np.empty_like(sources_list[0]) for _ in range(B)]
    for j in range(S):
        perm = rng.permutation(B)
        for i in range(B):
            out[i][j] = sources_list[perm[i]][j]
    mixtures = [o.sum(axis=0) for o in out]
    return mixtures, out


# ---------------------------------------------------------------------------
# Forward drivers


def run_model(mixture, params: ModelParams, stage: int = 0, depth: int | None = None,
              gate: GateParams | None = None, gate_mode: str = "infer", rng=None):
    """Full chain: encode, refine, mask and decode.

    Returns (estimates S x T, g); g is None without a gate, an int in infer
    mode, and a straight-through scalar Tensor in train mode.
    """
    x = mixture if mixture.ndim == 2 else mixture[None, :]
    T = x.shape[1]
    v_enc, v = encode(x, params)
    if gate is None:
        s = separate(v, params.config, params, depth=depth)
        g = None
    else:
        s, g = adaptive_separate(v, params.config, params, gate, gate_mode, rng=rng)
    ests = mask_and_decode(v_enc, s, stage, params, out_length=T)
    return ests, g


def evaluate(params: ModelParams, val_set, stage: int = 0, depth: int | None = None,
             gate: GateParams | None = None):
    """Mean validation SI-SDR improvement (and mean g when gated)."""
    scores, gs = [], []
    for sample in val_set:
        ests, g = run_model(sample.mixture, params, stage=stage, depth=depth, gate=gate)
        scores.append(
            eval_speech_sisdri(ests.data, sample.sources, sample.mixture, sample.speech_count)
        )
        if g is not None:
            gs.append(g)
    mean_g = float(np.mean(gs)) if gs else None
    return float(np.mean(scores)), mean_g


def _batch_items(samples, cfg: TrainConfig, rng):
    order = rng.permutation(len(samples))
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        sources = []
        for i in idx:
            src = samples[int(i)].sources
            if cfg.chunk_len is not None:
                src = chunk_or_pad(src, cfg.chunk_len, rng)
            sources.append(src)
        if cfg.augment:
            mixtures, sources = augment_batch(sources, rng)
        else:
            mixtures = [s.sum(axis=0) for s in sources]
        yield mixtures, sources


def _train_loop(params: ModelParams, train_set, val_set, cfg: TrainConfig,
                stage: int = 0, depth: int | None = None, freeze: FreezeMask | None = None,
                gate: GateParams | None = None, penalty_coef: float = 0.75,
                penalty_target: float = 3.0, rng=None):
    if not train_set:
        raise ValueError("empty training set")
    speech_count = train_set[0].speech_count
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    named = named_parameters(params)
    if gate is not None:
        named = named + gate_named_parameters(gate)
    trainable, _ = apply_freeze(named, freeze)
    if not trainable:
        raise ValueError("freeze mask leaves nothing trainable")
    state = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses = []
        for step, (mixtures, sources) in enumerate(_batch_items(train_set, cfg, rng)):
            with Tape() as tape:
                acc = None
                for mix, src in zip(mixtures, sources):
                    ests, g = run_model(mix, params, stage=stage, depth=depth,
                                        gate=gate, gate_mode="train", rng=rng)
                    item_loss = pit_loss(ests, src, speech_count).loss
                    if gate is not None:
                        item_loss = item_loss + gate_penalty(g, penalty_coef, penalty_target)
                    acc = item_loss if acc is None else acc + item_loss
                loss = acc * (1.0 / len(mixtures))
                value = loss.item()
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"non-finite loss {value} at epoch {epoch} step {step}"
                    )
                backward(tape, loss)
            grads = [
                (name, t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in trainable
            ]
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            adam_step(state, trainable, grads, lr)
            losses.append(value)
        val_sisdri, mean_g = evaluate(params, val_set, stage=stage, depth=depth, gate=gate)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_sisdri": val_sisdri,
        }
        if mean_g is not None:
            rec["mean_g"] = mean_g
        history.append(rec)
    return history


def train_end_to_end(params: ModelParams, train_set, val_set, cfg: TrainConfig,
                     stage: int = 0, depth: int | None = None,
                     freeze: FreezeMask | None = None, rng=None):
    """Train the whole chain against the permutation-invariant loss.

    Returns the per-epoch history; parameters update in place.
    """
    return _train_loop(params, train_set, val_set, cfg, stage=stage, depth=depth,
                       freeze=freeze, rng=rng)


@dataclass
class StageResult:
    stage: int
    depth: int
    params: ModelParams  # snapshot taken when the stage finished
    history: list


def _stage_epochs(total: int, m: int) -> list[int]:
    base, rem = divmod(total, m)
    return [base + (1 if i < rem else 0) for i in range(m)]


def train_progressive(config: SeparationConfig, train_set, val_set, cfg: TrainConfig,
                      rng=None) -> list[StageResult]:
    """Freeze-train the blocks one stage at a time.

    Stage 0 trains encoder + block 0 + head pair 0; stage i trains only
    block i and head pair i on top of the frozen prefix.  Each stage gets a
    fresh optimizer and schedule, and returns a deployable snapshot.
    """
    m = len(config.blocks)
    for i, bs in enumerate(config.blocks):
        if bs.shares_params_with is not None:
            raise ValueError(
                f"progressive training needs distinct block parameters; block {i} aliases {bs.shares_params_with}"
            )
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = init_params(config, rng, stages=m)
    results = []
    depth = 0
    for stage, epochs in enumerate(_stage_epochs(cfg.epochs, m)):
        depth += config.blocks[stage].iterations
        stage_cfg = replace(cfg, epochs=epochs)
        history = _train_loop(params, train_set, val_set, stage_cfg, stage=stage,
                              depth=depth, freeze=stage_freeze_mask(config, stage), rng=rng)
        results.append(StageResult(stage=stage, depth=depth,
                                   params=clone_params(params), history=history))
    return results


def finetune_gate(params: ModelParams, gate: GateParams, train_set, val_set,
                  cfg: TrainConfig, stage: int = 0, penalty_coef: float = 0.75,
                  penalty_target: float = 3.0, rng=None):
    """Jointly train model and gate on separation loss plus the iteration
    penalty; history gains a mean inference-g column."""
    return _train_loop(params, train_set, val_set, cfg, stage=stage, freeze=None,
                       gate=gate, penalty_coef=penalty_coef,
                       penalty_target=penalty_target, rng=rng)


# ---------------------------------------------------------------------------
# Analytic backward-memory model


@dataclass
class MemoryReport:
    trainable_param_bytes: int
    frozen_param_bytes: int
    optimizer_state_bytes: int
    activation_bytes_backward: int
    boundary_elems: int  # frozen-prefix outputs retained at the freeze line
    activation_elems: int  # per batch item, including the boundary
    breakdown: dict

    @property
    def total_bytes(self) -> int:
        return (self.trainable_param_bytes + self.frozen_param_bytes
                + self.optimizer_state_bytes + self.activation_bytes_backward)


def _ceil_div_len(L: int, stride: int) -> int:
    return -(-L // stride)


def _sub_block_elems(C: int, n_scales: int, L: int) -> int:
    """Taped output elements of one sub-block pass at latent length L."""
    lengths = [L]
    for _ in range(n_scales):
        lengths.append(_ceil_div_len(lengths[-1], 2))
    e = 0
    for i in range(n_scales):
        e += 3 * C * lengths[i + 1]  # conv, prelu, norm
    for idx in range(n_scales):
        target = lengths[n_scales - 1 - idx]
        e += 4 * C * target  # upsample, conv, prelu, norm
        if n_scales - 2 - idx >= 0:
            e += C * target  # skip addition
    e += 2 * C * L  # projection conv and residual add
    return e


def _encode_elems(config: SeparationConfig, L: int) -> int:
    return 2 * config.enc_bases * L + config.latent_channels * L


def _heads_elems(config: SeparationConfig, L: int, T: int) -> int:
    S, B = config.num_sources, config.enc_bases
    mask = 2 * S * B * L
    per_source = 2 * B * L + T
    return mask + S * per_source + S * T


def memory_account(config: SeparationConfig, batch_size: int, T: int,
                   stage: int | None = None) -> MemoryReport:
    """Analytic bytes for one backward pass.

    ``stage=None`` accounts full end-to-end training; ``stage=i`` accounts
    progressive stage i, where everything before block i is frozen and only
    hands over its final latent and the maskable encoding.
    """
    if batch_size < 1 or T < 1:
        raise ValueError("batch_size and T must be positive")
    C, B = config.latent_channels, config.enc_bases
    L = config.latent_length(T)
    counts = count_params(config, stages=len(config.blocks) if stage is not None else 1)
    block_elems = [
        config.blocks[i].sub_blocks * _sub_block_elems(C, config.sub_scales, L)
        for i in range(len(config.blocks))
    ]
    if stage is None:
        act = _encode_elems(config, L)
        act += sum(block_elems[bs_i] * bs.iterations
                   for bs_i, bs in enumerate(config.blocks))
        act += _heads_elems(config, L, T)
        boundary = 0
        head_pairs = 1
        trainable_scalars = counts.encoder + sum(counts.blocks) + counts.mask_net + counts.decoder
        frozen_scalars = 0
    else:
        if not 0 <= stage < len(config.blocks):
            raise ValueError(f"stage {stage} out of range for {len(config.blocks)} blocks")
        own = block_elems[stage] * config.blocks[stage].iterations
        act = own + _heads_elems(config, L, T)
        if stage == 0:
            act += _encode_elems(config, L)
            boundary = 0
        else:
            boundary = C * L + B * L
            act += boundary
        head_pairs = len(config.blocks)
        trainable_scalars = counts.blocks[stage] + counts.mask_net + counts.decoder
        if stage == 0:
            trainable_scalars += counts.encoder
        frozen_scalars = counts.total - trainable_scalars
    return MemoryReport(
        trainable_param_bytes=8 * trainable_scalars,
        frozen_param_bytes=8 * frozen_scalars,
        optimizer_state_bytes=16 * trainable_scalars,
        activation_bytes_backward=8 * act * batch_size,
        boundary_elems=boundary,
        activation_elems=act,
        breakdown={
            "latent_len": L,
            "block_elems": block_elems,
            "head_pairs": head_pairs,
            "trainable_scalars": trainable_scalars,
        },
    )
