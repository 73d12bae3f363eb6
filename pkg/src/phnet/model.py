"""PHNet assembly: spacing-driven 2.5D encoder, permutable-MLP deep stages,
separable-convolution decoder with skip connections, and checkpoint I/O.

Geometry conventions: feature maps are (B, C, D, H, W); configuration patch
sizes are written (H, W, D) to match how scan resolutions are usually quoted
(in-plane first).  Voxel spacing is (ip, ip, tp) millimetres.

The encoder's 2.5D rule: while the through-plane spacing is coarser than the
in-plane spacing, stages downsample in-plane only (stride (1,2,2), kernels
(1,3,3)) so the feature grid approaches isotropy before any through-plane
mixing; the remaining stages use 3D kernels and stride (2,2,2).  The number
of 2D stages is s2 = clamp(round(log2(spacing_tp / spacing_ip)), 0,
num_stages - 1), with round-half-up.  The deepest stages swap their conv
blocks for MLPP blocks (a strided Conv-IN-ReLU performs that stage's
downsampling first).
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    Conv,
    ConvNormAct,
    ConvTranspose,
    Module,
    ResidualConvBlock,
    SeparableConvBlock,
)
from .autograd import concat
from .mlpp import MLPPBlock, MLPPConfig

__all__ = [
    "MLPPDefaults",
    "PHNetConfig",
    "StagePlan",
    "PHNet",
    "plan_stages",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_meta",
    "config_to_dict",
    "config_from_dict",
]

CHECKPOINT_FORMAT = "phnet-checkpoint-v1"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MLPPDefaults:
    """Per-network MLPP knobs; ``None`` segment lengths are derived per stage
    from the feature geometry (in-plane length = half the feature width,
    attention window = same, through-plane length = half the feature depth,
    each reduced to the nearest compatible divisor)."""

    l_ip: int | None = None
    l_aa: int | None = None
    l_tp: int | None = None
    num_layers: int = 2


@dataclass(frozen=True)
class PHNetConfig:
    num_stages: int = 5
    base_channels: int = 32
    max_channels: int = 320
    in_channels: int = 1
    num_classes: int = 2
    voxel_spacing_mm: tuple = (1.0, 1.0, 1.0)   # (ip, ip, tp)
    patch_size: tuple = (64, 64, 16)            # (H, W, D)
    mlpp_stages: tuple | None = None            # default: deepest two
    mlpp: MLPPDefaults = field(default_factory=MLPPDefaults)
    blocks_per_stage: int = 2

    def resolved_mlpp_stages(self):
        if self.mlpp_stages is None:
            return tuple(i for i in (self.num_stages - 2, self.num_stages - 1) if i >= 0)
        return tuple(sorted(set(int(i) for i in self.mlpp_stages)))


@dataclass(frozen=True)
class StagePlan:
    """One encoder stage: ``mode`` in {conv2d, conv3d, mlpp}; ``stride`` and
    ``kernel`` already reflect the 2D/3D rule at this depth."""

    mode: str
    stride: tuple
    kernel: tuple
    channels_in: int
    channels_out: int


def _round_half_up(x):
    return math.floor(x + 0.5)


def plan_stages(cfg):
    """Spacing-driven stage plan: s2 in-plane-only stages, then 3D stages,
    with the configured stages swapped to MLPP mode; channels double from
    ``base_channels``, capped at ``max_channels``."""
    ip0, ip1, tp = cfg.voxel_spacing_mm
    if ip0 <= 0 or ip1 <= 0 or tp <= 0:
        raise ValueError(f"voxel spacing must be positive, got {cfg.voxel_spacing_mm}")
    if cfg.num_stages < 1:
        raise ValueError(f"num_stages must be >= 1, got {cfg.num_stages}")
    ratio = tp / math.sqrt(ip0 * ip1)
    s2 = min(max(_round_half_up(math.log2(ratio)), 0), cfg.num_stages - 1)

    mlpp_stages = cfg.resolved_mlpp_stages()
    for i in mlpp_stages:
        if not 0 <= i < cfg.num_stages:
            raise ValueError(f"mlpp stage index {i} out of range for {cfg.num_stages} stages")
    if mlpp_stages and set(mlpp_stages) != set(range(min(mlpp_stages), cfg.num_stages)):
        raise ValueError(
            f"mlpp_stages {mlpp_stages} must be a contiguous suffix of the stage list "
            f"(global mixing belongs in the deepest stages)")

    plan = []
    for i in range(cfg.num_stages):
        two_d = i < s2
        stride = (1, 2, 2) if two_d else (2, 2, 2)
        kernel = (1, 3, 3) if two_d else (3, 3, 3)
        mode = "mlpp" if i in mlpp_stages else ("conv2d" if two_d else "conv3d")
        c_in = cfg.in_channels if i == 0 else plan[-1].channels_out
        c_out = min(cfg.base_channels * 2 ** i, cfg.max_channels)
        plan.append(StagePlan(mode, stride, kernel, c_in, c_out))
    return plan


def _largest_divisor_at_most(n, bound, *also_dividing):
    """Largest l <= bound with l | n and l | each of ``also_dividing``."""
    for l in range(max(1, bound), 0, -1):
        if n % l == 0 and all(m % l == 0 for m in also_dividing):
            return l
    return 1


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

class _ConvStage(Module):
    def __init__(self, plan, blocks, rng, dtype):
        self.blocks = [ResidualConvBlock(plan.channels_in, plan.channels_out,
                                         plan.kernel, plan.stride, rng=rng, dtype=dtype)]
        for _ in range(blocks - 1):
            self.blocks.append(ResidualConvBlock(plan.channels_out, plan.channels_out,
                                                 plan.kernel, 1, rng=rng, dtype=dtype))

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x

    def count_flops(self, input_shape):
        total = 0
        for blk in self.blocks:
            f, input_shape = blk.count_flops(input_shape)
            total += f
        return total, input_shape


class _MLPPStage(Module):
    """Strided Conv-IN-ReLU downsampler followed by an MLPP block."""

    def __init__(self, plan, mlpp_cfg, rng, dtype):
        self.down = ConvNormAct(plan.channels_in, plan.channels_out,
                                plan.kernel, plan.stride, rng=rng, dtype=dtype)
        self.mlpp = MLPPBlock(mlpp_cfg, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.mlpp(self.down(x))

    def count_flops(self, input_shape):
        f1, mid = self.down.count_flops(input_shape)
        f2, out = self.mlpp.count_flops(mid)
        return f1 + f2, out


class _DecoderStage(Module):
    """conv_transpose upsampling (kernel = stride, mirroring one encoder
    stage), channel-concat skip fusion via 1x1x1 projection, then a
    separable conv block."""

    def __init__(self, in_channels, skip_channels, out_channels, stride, rng, dtype):
        self.up = ConvTranspose(in_channels, out_channels, kernel_size=stride,
                                stride=stride, rng=rng, dtype=dtype)
        self.proj = (Conv(out_channels + skip_channels, out_channels, 1, 1, 0,
                          rng=rng, dtype=dtype)
                     if skip_channels else None)
        self.sep = SeparableConvBlock(out_channels, rng=rng, dtype=dtype)

    def forward(self, x, skip):
        h = self.up(x)
        if self.proj is not None:
            if skip.shape[2:] != h.shape[2:]:
                raise ValueError(
                    f"skip shape {skip.shape} does not match upsampled {h.shape}")
            h = self.proj(concat((h, skip), axis=1))
        return self.sep(h)

    def count_flops(self, input_shape):
        f, shape = self.up.count_flops(input_shape)
        if self.proj is not None:
            skip_ch = self.proj.kernel.shape[1] - shape[1]
            fp, shape = self.proj.count_flops((shape[0], shape[1] + skip_ch) + shape[2:])
            f += fp
        fs, shape = self.sep.count_flops(shape)
        return f + fs, shape


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class PHNet(Module):
    """Permutable hybrid CNN+MLP segmentation network.

    ``forward`` maps (B, in_channels, D, H, W) to logits of shape
    (B, num_classes, D, H, W).  Any input whose extents survive every
    stage's stride exactly (and the MLPP divisibility constraints) is
    accepted — parameters are resolution-free.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.plan = plan_stages(cfg)
        feat = self._feature_sizes(cfg.patch_size)  # validates the patch size

        self.stages = []
        for i, plan in enumerate(self.plan):
            if plan.mode == "mlpp":
                d_f, h_f, w_f = feat[i + 1]
                m = cfg.mlpp
                l_ip = (m.l_ip if m.l_ip is not None else
                        _largest_divisor_at_most(plan.channels_out, w_f // 2, h_f, w_f))
                l_aa = (m.l_aa if m.l_aa is not None else
                        _largest_divisor_at_most(h_f, min(l_ip, h_f), w_f))
                l_tp = (m.l_tp if m.l_tp is not None else
                        _largest_divisor_at_most(plan.channels_out, max(1, d_f // 2), d_f))
                mlpp_cfg = MLPPConfig(plan.channels_out, l_ip, l_aa, l_tp, m.num_layers)
                self.stages.append(_MLPPStage(plan, mlpp_cfg, rng, dtype))
            else:
                self.stages.append(_ConvStage(plan, cfg.blocks_per_stage, rng, dtype))

        self.decoder = []
        ch = self.plan[-1].channels_out
        for i in reversed(range(cfg.num_stages)):
            skip_ch = self.plan[i - 1].channels_out if i > 0 else 0
            out_ch = skip_ch if i > 0 else cfg.base_channels
            self.decoder.append(_DecoderStage(ch, skip_ch, out_ch,
                                              self.plan[i].stride, rng, dtype))
            ch = out_ch
        self.head = Conv(ch, cfg.num_classes, 1, 1, 0, bias=True, rng=rng, dtype=dtype)

        self._check_mlpp_divisibility(feat)

    # -- geometry ----------------------------------------------------------

    def _feature_sizes(self, patch_size):
        """Per-stage (D, H, W) feature extents, index 0 = input; raises if
        any stage's stride does not divide its input extents."""
        h, w, d = patch_size
        sizes = [(d, h, w)]
        for i, plan in enumerate(self.plan):
            cur = sizes[-1]
            for axis_name, extent, s in zip("DHW", cur, plan.stride):
                if extent % s:
                    raise ValueError(
                        f"stage {i}: axis {axis_name} extent {extent} is not divisible "
                        f"by stride {s} (patch (H,W,D)={tuple(patch_size)})")
            sizes.append(tuple(n // s for n, s in zip(cur, plan.stride)))
        return sizes

    def _check_mlpp_divisibility(self, feat):
        for i, (plan, stage) in enumerate(zip(self.plan, self.stages)):
            if plan.mode != "mlpp":
                continue
            c = stage.mlpp.cfg
            d_f, h_f, w_f = feat[i + 1]
            for axis_name, extent, l in (("H", h_f, c.l_ip), ("W", w_f, c.l_ip),
                                         ("H", h_f, c.l_aa), ("W", w_f, c.l_aa),
                                         ("D", d_f, c.l_tp)):
                if extent % l:
                    raise ValueError(
                        f"stage {i}: MLPP segment/window length {l} does not divide "
                        f"axis {axis_name} feature extent {extent}")

    # -- forward -----------------------------------------------------------

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input (B,{self.cfg.in_channels},D,H,W), got {x.shape}")
        d, h, w = x.shape[2:]
        feat = self._feature_sizes((h, w, d))
        self._check_mlpp_divisibility(feat)

        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for dec in self.decoder:
            x = dec(x, skips.pop() if skips else None)
        return self.head(x)

    def count_flops(self, input_shape):
        total = 0
        shape = tuple(input_shape)
        shapes = []
        for stage in self.stages:
            f, shape = stage.count_flops(shape)
            shapes.append(shape)
            total += f
        shape = shapes.pop()
        for dec in self.decoder:
            f, shape = dec.count_flops(shape)
            total += f
        f, shape = self.head.count_flops(shape)
        return total + f, shape


def count_params(net):
    """Exact number of scalar parameters."""
    return sum(p.size for p in net.parameters())


def config_to_dict(cfg):
    """JSON-ready dict capturing a PHNetConfig, round-trippable through
    ``config_from_dict``."""
    return asdict(cfg)


def config_from_dict(d):
    """Rebuild a PHNetConfig from ``config_to_dict`` output (JSON turns
    tuples into lists, so sequence fields are re-tupled here)."""
    d = dict(d)
    mlpp = d.pop("mlpp", None)
    kwargs = {
        **d,
        "voxel_spacing_mm": tuple(d["voxel_spacing_mm"]),
        "patch_size": tuple(d["patch_size"]),
        "mlpp_stages": (None if d.get("mlpp_stages") is None
                        else tuple(d["mlpp_stages"])),
    }
    if mlpp is not None:
        kwargs["mlpp"] = MLPPDefaults(**mlpp)
    return PHNetConfig(**kwargs)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(net, path, meta=None):
    """Single-file checkpoint: a JSON manifest line (parameter name paths,
    shapes, byte offsets, plus caller metadata) followed by the raw
    little-endian float32 parameter payload."""
    entries = []
    payload = bytearray()
    for name, p in net.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": len(payload)})
        payload.extend(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "params": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        f.write(bytes(payload))


def read_checkpoint_meta(path):
    """Manifest metadata of a checkpoint without loading the payload."""
    with open(path, "rb") as f:
        header = f.readline()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return manifest["meta"]


def load_checkpoint(net, path):
    """Load parameters saved by ``save_checkpoint`` into ``net`` (shapes are
    validated parameter by parameter); returns the manifest metadata."""
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    by_name = {e["name"]: e for e in manifest["params"]}
    params = dict(net.named_parameters())
    if set(by_name) != set(params):
        missing = sorted(set(params) - set(by_name))
        extra = sorted(set(by_name) - set(params))
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        e = by_name[name]
        if tuple(e["shape"]) != p.shape:
            raise ValueError(
                f"checkpoint {name}: shape {tuple(e['shape'])} != expected {p.shape}")
        flat = np.frombuffer(payload, dtype="<f4", count=p.size, offset=e["offset"])
        p.data[...] = flat.reshape(p.shape).astype(p.dtype)
    return manifest["meta"]
