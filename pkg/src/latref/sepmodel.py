"""Mask-based separation model with iterable, weight-shareable blocks.

The pipeline is encoder -> bottleneck -> a chain of refinement blocks ->
mask network -> decoder.  Each block is a list of sub-blocks; a sub-block is
a small U-shaped unit (strided downsampling convs, nearest-neighbour
upsampling convs, skip additions) whose final projection starts at zero, so
an untrained sub-block is the identity and iteration count is a pure
refinement knob.  Blocks may alias the parameters of an earlier block, and
a block's iteration count multiplies compute without adding parameters.

Checkpoints are a flat binary container: magic, a sorted-key JSON header
describing config and tensor shapes, then raw little-endian float64 payload.
No timestamps anywhere, so identical states serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Tensor,
    conv1d,
    global_layer_norm,
    prelu,
    relu,
    slice_rows,
    transposed_conv1d,
    upsample_nearest,
)
from .diffcore import concat_rows, mul

_CKPT_MAGIC = b"LRCKPT01"


@dataclass
class BlockSpec:
    sub_blocks: int = 1
    iterations: int = 1
    shares_params_with: int | None = None


@dataclass
class SeparationConfig:
    enc_bases: int = 512
    enc_kernel: int = 21
    enc_stride: int = 10
    latent_channels: int = 128
    num_sources: int = 3
    blocks: list[BlockSpec] = field(default_factory=lambda: [BlockSpec()])
    sub_scales: int = 5
    sub_kernel: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("enc_bases", "enc_kernel", "enc_stride", "latent_channels",
                     "num_sources", "sub_scales", "sub_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.blocks:
            raise ValueError("config needs at least one block")
        for i, bs in enumerate(self.blocks):
            if bs.sub_blocks < 1 or bs.iterations < 1:
                raise ValueError(f"block {i} needs sub_blocks >= 1 and iterations >= 1")
            ref = bs.shares_params_with
            if ref is not None:
                if not 0 <= ref < i:
                    raise ValueError(f"block {i} shares params with {ref}, which is not an earlier block")
                if self.blocks[ref].sub_blocks != bs.sub_blocks:
                    raise ValueError(
                        f"block {i} shares params with block {ref} but sub_block counts differ "
                        f"({bs.sub_blocks} vs {self.blocks[ref].sub_blocks})"
                    )

    def total_steps(self) -> int:
        return sum(bs.iterations for bs in self.blocks)

    def latent_length(self, T: int) -> int:
        return -(-T // self.enc_stride)


def config_to_dict(config: SeparationConfig) -> dict:
    return {
        "enc_bases": config.enc_bases,
        "enc_kernel": config.enc_kernel,
        "enc_stride": config.enc_stride,
        "latent_channels": config.latent_channels,
        "num_sources": config.num_sources,
        "sub_scales": config.sub_scales,
        "sub_kernel": config.sub_kernel,
        "blocks": [
            {
                "sub_blocks": bs.sub_blocks,
                "iterations": bs.iterations,
                "shares_params_with": bs.shares_params_with,
            }
            for bs in config.blocks
        ],
    }


def config_from_dict(d: dict) -> SeparationConfig:
    known = {"enc_bases", "enc_kernel", "enc_stride", "latent_channels",
             "num_sources", "sub_scales", "sub_kernel", "blocks"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    blocks = []
    for i, bd in enumerate(d.get("blocks", [{}])):
        extra = set(bd) - {"sub_blocks", "iterations", "shares_params_with"}
        if extra:
            raise ValueError(f"unknown keys in blocks[{i}]: {sorted(extra)}")
        blocks.append(BlockSpec(**bd))
    kwargs = {k: v for k, v in d.items() if k != "blocks"}
    return SeparationConfig(blocks=blocks, **kwargs)


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor | None = None


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ScaleParams:
    """One resolution level of a sub-block: conv, PReLU slope, channel norm."""

    conv: ConvParams
    slope: Tensor
    norm: NormParams


@dataclass
class SubBlockParams:
    down: list[ScaleParams]
    up: list[ScaleParams]
    proj: ConvParams  # 1x1 residual projection, zero at init, no bias


@dataclass
class ModelParams:
    config: SeparationConfig
    encoder: ConvParams
    bottleneck: ConvParams
    blocks: list[list[SubBlockParams]]
    mask_nets: list[ConvParams]
    decoders: list[ConvParams]


def _uniform(rng, shape, fan_in) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _init_scale(rng, C: int, ks: int) -> ScaleParams:
    return ScaleParams(
        conv=ConvParams(w=_param(_uniform(rng, (C, C, ks), C * ks)), b=_param(np.zeros(C))),
        slope=_param(np.full(C, 0.25)),
        norm=NormParams(gamma=_param(np.ones(C)), beta=_param(np.zeros(C))),
    )


def _init_sub_block(rng, config: SeparationConfig) -> SubBlockParams:
    C, ks, S = config.latent_channels, config.sub_kernel, config.sub_scales
    return SubBlockParams(
        down=[_init_scale(rng, C, ks) for _ in range(S)],
        up=[_init_scale(rng, C, ks) for _ in range(S)],
        proj=ConvParams(w=_param(np.zeros((C, C, 1)))),
    )


def init_params(config: SeparationConfig, rng, stages: int = 1) -> ModelParams:
    """Draw fresh parameters; aliased blocks share the same objects.

    ``stages`` controls how many mask-net/decoder head pairs exist (one per
    progressive stage; end-to-end training uses a single pair).
    """
    if stages < 1:
        raise ValueError(f"stages must be >= 1, got {stages}")
    B, K, C, S = config.enc_bases, config.enc_kernel, config.latent_channels, config.num_sources
    encoder = ConvParams(w=_param(_uniform(rng, (B, 1, K), K)), b=_param(np.zeros(B)))
    bottleneck = ConvParams(w=_param(_uniform(rng, (C, B, 1), B)), b=_param(np.zeros(C)))
    blocks: list[list[SubBlockParams]] = []
    for bs in config.blocks:
        if bs.shares_params_with is not None:
            blocks.append(blocks[bs.shares_params_with])
        else:
            blocks.append([_init_sub_block(rng, config) for _ in range(bs.sub_blocks)])
    mask_nets = [
        ConvParams(w=_param(_uniform(rng, (S * B, C, 1), C)), b=_param(np.zeros(S * B)))
        for _ in range(stages)
    ]
    decoders = [
        ConvParams(w=_param(_uniform(rng, (B, 1, K), B * K)), b=_param(np.zeros(1)))
        for _ in range(stages)
    ]
    return ModelParams(config, encoder, bottleneck, blocks, mask_nets, decoders)


def _conv_named(prefix: str, cp: ConvParams):
    yield f"{prefix}.w", cp.w
    if cp.b is not None:
        yield f"{prefix}.b", cp.b


def _sub_named(prefix: str, sb: SubBlockParams):
    for tag, scales in (("down", sb.down), ("up", sb.up)):
        for s, sc in enumerate(scales):
            yield from _conv_named(f"{prefix}.{tag}{s}", sc.conv)
            yield f"{prefix}.{tag}{s}.slope", sc.slope
            yield f"{prefix}.{tag}{s}.gamma", sc.norm.gamma
            yield f"{prefix}.{tag}{s}.beta", sc.norm.beta
    yield from _conv_named(f"{prefix}.proj", sb.proj)


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Deterministic (name, tensor) list; aliased blocks appear once."""
    out: list[tuple[str, Tensor]] = []
    seen: set[int] = set()

    def emit(pairs):
        for name, t in pairs:
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append((name, t))

    emit(_conv_named("encoder", params.encoder))
    emit(_conv_named("bottleneck", params.bottleneck))
    for i, block in enumerate(params.blocks):
        if any(block is params.blocks[j] for j in range(i)):
            continue
        for j, sb in enumerate(block):
            emit(_sub_named(f"block{i}.sub{j}", sb))
    for j, mn in enumerate(params.mask_nets):
        emit(_conv_named(f"mask{j}", mn))
    for j, dec in enumerate(params.decoders):
        emit(_conv_named(f"dec{j}", dec))
    return out


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy preserving the aliasing structure between blocks."""
    copies: dict[int, Tensor] = {}

    def cp(t: Tensor | None):
        if t is None:
            return None
        got = copies.get(id(t))
        if got is None:
            got = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            copies[id(t)] = got
        return got

    def cp_conv(c: ConvParams) -> ConvParams:
        return ConvParams(w=cp(c.w), b=cp(c.b))

    def cp_sub(sb: SubBlockParams) -> SubBlockParams:
        return SubBlockParams(
            down=[ScaleParams(cp_conv(s.conv), cp(s.slope), NormParams(cp(s.norm.gamma), cp(s.norm.beta))) for s in sb.down],
            up=[ScaleParams(cp_conv(s.conv), cp(s.slope), NormParams(cp(s.norm.gamma), cp(s.norm.beta))) for s in sb.up],
            proj=cp_conv(sb.proj),
        )

    block_copies: dict[int, list[SubBlockParams]] = {}
    blocks = []
    for block in params.blocks:
        got = block_copies.get(id(block))
        if got is None:
            got = [cp_sub(sb) for sb in block]
            block_copies[id(block)] = got
        blocks.append(got)
    return ModelParams(
        config=params.config,
        encoder=cp_conv(params.encoder),
        bottleneck=cp_conv(params.bottleneck),
        blocks=blocks,
        mask_nets=[cp_conv(m) for m in params.mask_nets],
        decoders=[cp_conv(d) for d in params.decoders],
    )


# ---------------------------------------------------------------------------
# Forward passes


def encode(x, params: ModelParams):
    """Mixture 1 x T -> (maskable v_enc enc_bases x L, latent v C x L)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.size == 0:
        raise ValueError("empty input signal")
    if x.ndim != 2 or x.shape[0] != 1:
        raise ValueError(f"encode expects a 1 x T input, got shape {x.shape}")
    cfg = params.config
    v_enc = relu(conv1d(x, params.encoder.w, params.encoder.b, stride=cfg.enc_stride))
    v = conv1d(v_enc, params.bottleneck.w, params.bottleneck.b, stride=1)
    return v_enc, v


def apply_sub_block(v: Tensor, sb: SubBlockParams) -> Tensor:
    lengths = [v.shape[1]]
    h = v
    downs = []
    for sc in sb.down:
        h = conv1d(h, sc.conv.w, sc.conv.b, stride=2)
        h = prelu(h, sc.slope)
        h = global_layer_norm(h, sc.norm.gamma, sc.norm.beta)
        downs.append(h)
        lengths.append(h.shape[1])
    u = downs[-1]
    n = len(sb.up)
    for idx, sc in enumerate(sb.up):
        target = lengths[n - 1 - idx]
        u = upsample_nearest(u, target)
        u = conv1d(u, sc.conv.w, sc.conv.b, stride=1)
        u = prelu(u, sc.slope)
        u = global_layer_norm(u, sc.norm.gamma, sc.norm.beta)
        skip = n - 2 - idx
        if skip >= 0:
            u = u + downs[skip]
    return v + conv1d(u, sb.proj.w, stride=1)


def apply_block(v: Tensor, block: list[SubBlockParams]) -> Tensor:
    if not block:
        raise ValueError("block has no sub-blocks")
    C = block[0].down[0].conv.w.shape[1]
    if v.ndim != 2 or v.shape[0] != C:
        raise ValueError(f"latent shape {v.shape} does not match block channel count {C}")
    for sb in block:
        v = apply_sub_block(v, sb)
    return v


def _step_schedule(config: SeparationConfig) -> list[int]:
    return [i for i, bs in enumerate(config.blocks) for _ in range(bs.iterations)]


def separate(v: Tensor, config: SeparationConfig, params: ModelParams,
             depth: int | None = None, start: int = 0) -> Tensor:
    """Run refinement steps [start, depth) of the block schedule.

    Step j applies the block that owns the j-th iteration; depth=None means
    the full schedule.  Running to depth d and then continuing from d
    composes to the full-depth result.
    """
    schedule = _step_schedule(config)
    N = len(schedule)
    if depth is None:
        depth = N
    if not 0 <= depth <= N:
        raise ValueError(f"depth {depth} out of range for {N} total steps")
    if not 0 <= start <= depth:
        raise ValueError(f"start {start} out of range for depth {depth}")
    for bi in schedule[start:depth]:
        v = apply_block(v, params.blocks[bi])
    return v


def mask_and_decode(v_enc: Tensor, s_latent: Tensor, stage: int, params: ModelParams,
                    out_length: int | None = None, mask_override=None) -> Tensor:
    """Estimate masks from the latent and decode each source from v_enc.

    Returns num_sources x T.  ``out_length`` fixes T (default L * enc_stride);
    ``mask_override`` substitutes a fixed mask array for the mask net, which
    tests use to probe the decode path.
    """
    cfg = params.config
    if not 0 <= stage < len(params.mask_nets):
        raise ValueError(f"stage {stage} out of range for {len(params.mask_nets)} head pairs")
    mn = params.mask_nets[stage]
    dec = params.decoders[stage]
    if mask_override is None:
        m = relu(conv1d(s_latent, mn.w, mn.b, stride=1))
    else:
        m = mask_override if isinstance(mask_override, Tensor) else Tensor(mask_override)
    S, B, L = cfg.num_sources, cfg.enc_bases, v_enc.shape[1]
    if m.shape != (S * B, L):
        raise ValueError(f"mask shape {m.shape} does not match ({S * B}, {L})")
    T = L * cfg.enc_stride if out_length is None else out_length
    outs = []
    for s in range(S):
        masked = mul(v_enc, slice_rows(m, s * B, (s + 1) * B))
        outs.append(
            transposed_conv1d(masked, dec.w, dec.b, stride=cfg.enc_stride,
                              padding="same", out_length=T, allow_gaps=True)
        )
    return concat_rows(outs)


# ---------------------------------------------------------------------------
# Parameter accounting


@dataclass
class ParamCounts:
    encoder: int
    blocks: list[int]  # per config block; aliased entries are zero
    mask_net: int  # one head pair
    decoder: int
    stages: int

    @property
    def total(self) -> int:
        return self.encoder + sum(self.blocks) + self.stages * (self.mask_net + self.decoder)


def count_params(config: SeparationConfig, stages: int = 1) -> ParamCounts:
    """Exact trainable-scalar counts; iteration counts never enter."""
    B, K, C = config.enc_bases, config.enc_kernel, config.latent_channels
    ks, S = config.sub_kernel, config.num_sources
    encoder = (B * 1 * K + B) + (C * B * 1 + C)
    per_scale = C * C * ks + C + C + 2 * C  # conv w+b, slope, norm affine
    sub_total = 2 * config.sub_scales * per_scale + C * C
    blocks = []
    for bs in config.blocks:
        blocks.append(0 if bs.shares_params_with is not None else bs.sub_blocks * sub_total)
    mask_net = S * B * C + S * B
    decoder = B * 1 * K + 1
    return ParamCounts(encoder=encoder, blocks=blocks, mask_net=mask_net,
                       decoder=decoder, stages=stages)


# ---------------------------------------------------------------------------
# Checkpoint container


def save_checkpoint(path, params: ModelParams, extra_tensors=None, meta=None) -> None:
    """Serialize config + named tensors (+ optional extras) byte-deterministically."""
    named = named_parameters(params)
    if extra_tensors:
        named = named + sorted(extra_tensors.items())
    header = {
        "format": 1,
        "config": config_to_dict(params.config),
        "stages": len(params.mask_nets),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


@dataclass
class LoadedCheckpoint:
    config: SeparationConfig
    params: ModelParams
    extra_tensors: dict
    meta: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint (bad magic {magic!r})")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n_elems = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n_elems)
            if len(buf) != 8 * n_elems:
                raise ValueError(f"truncated checkpoint {path}: tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    config = config_from_dict(header["config"])
    params = init_params(config, np.random.default_rng(0), stages=header.get("stages", 1))
    extra = {}
    model_names = dict(named_parameters(params))
    for name, arr in arrays.items():
        t = model_names.get(name)
        if t is None:
            extra[name] = arr
            continue
        if t.data.shape != arr.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data[...] = arr
    missing = set(model_names) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint {path} is missing tensors: {sorted(missing)}")
    return LoadedCheckpoint(config=config, params=params, extra_tensors=extra,
                            meta=header.get("meta", {}))
