"""Neural-network building blocks on rank-5 feature maps (B, C, D, H, W).

Provides direct N-d convolution and its exact adjoint (transpose
convolution), instance / channel normalization, linear maps, and the
composite blocks used by the encoder and decoder: Conv-IN-ReLU residual
blocks and the decoder's separated in-plane / through-plane convolution
pair.  All operations are differentiable through the autograd tape.
"""

import math

import numpy as np

from .autograd import (
    Parameter,
    Tensor,
    add_scalar,
    broadcast_to,
    make_node,
    matmul,
    permute,
    reshape,
    sqrt,
)

__all__ = [
    "Module",
    "Conv",
    "ConvTranspose",
    "Linear",
    "InstanceNorm",
    "ChannelNorm",
    "ConvNormAct",
    "ResidualConvBlock",
    "SeparableConvBlock",
    "conv_nd",
    "conv_transpose_nd",
    "linear",
    "normalize",
    "kaiming_uniform",
    "same_padding",
    "conv_output_extent",
]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container.

    Subclasses assign ``Parameter``s, sub-``Module``s, or lists of
    sub-``Module``s as plain attributes; ``named_parameters`` walks them in
    attribute-insertion order, which makes parameter naming (used by the
    checkpoint format) deterministic.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def reset_grads(self):
        for p in self.parameters():
            p.reset_grad()

    def count_flops(self, input_shape):
        """Return (counted FLOPs, output shape) for ``input_shape``.

        The convention (see ``phnet.flops``) counts multiply-add work only:
        1 MAC = 2 FLOPs; norms, activations, and bias adds are free.
        """
        raise NotImplementedError(type(self).__name__)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Fan-in scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _triple(v, name="value"):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must be an int or a 3-tuple, got {v!r}")
    return t


def same_padding(kernel_size):
    """Padding that preserves spatial extents at stride 1; odd kernels only."""
    ks = _triple(kernel_size, "kernel_size")
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"same padding requires odd kernel extents, got {ks}")
    return tuple((k - 1) // 2 for k in ks)


def conv_output_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# convolution primitives (pure ndarray kernels + autograd wrappers)
# ---------------------------------------------------------------------------

def _check_conv_geometry(x_shape, k_shape, stride, padding, transposed=False):
    if len(x_shape) != 5:
        raise ValueError(f"conv: expected rank-5 input (B,C,D,H,W), got {x_shape}")
    if len(k_shape) != 5:
        raise ValueError(f"conv: expected rank-5 kernel, got {k_shape}")
    if any(s < 1 for s in stride):
        raise ValueError(f"conv: strides must be positive, got {stride}")
    if any(p < 0 for p in padding):
        raise ValueError(f"conv: padding must be non-negative, got {padding}")
    if any(k < 1 for k in k_shape[2:]):
        raise ValueError(f"conv: kernel extents must be positive, got {k_shape[2:]}")
    if transposed:
        # the kernel-vs-input constraint applies on the conv side, i.e. to the
        # transpose's *output*, which satisfies it by construction
        return
    for n, k, p in zip(x_shape[2:], k_shape[2:], padding):
        if n + 2 * p < k:
            raise ValueError(
                f"conv: kernel {k_shape[2:]} larger than padded input "
                f"{x_shape[2:]} with padding {padding}")


def _conv_fwd(x, k, stride, padding):
    """Direct strided cross-correlation, accumulated one kernel offset at a
    time over strided views (at most prod(kernel) tensordot calls)."""
    B = x.shape[0]
    co = k.shape[0]
    ks = k.shape[2:]
    out_sp = tuple(conv_output_extent(n, kk, s, p)
                   for n, kk, s, p in zip(x.shape[2:], ks, stride, padding))
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    acc = np.zeros((B,) + out_sp + (co,), dtype=x.dtype)
    sd, sh, sw = stride
    od, oh, ow = out_sp
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                xs = xp[:, :, dz:dz + sd * od:sd, dy:dy + sh * oh:sh, dx:dx + sw * ow:sw]
                acc += np.tensordot(xs, k[:, :, dz, dy, dx], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))


def _conv_adjoint(y, k, stride, padding, out_spatial):
    """Adjoint of ``_conv_fwd`` with identical geometry: scatters each kernel
    offset's contribution back onto a padded canvas, then crops the padding."""
    B = y.shape[0]
    ci = k.shape[1]
    ks = k.shape[2:]
    ysp = y.shape[2:]
    canvas = np.zeros((B, ci) + tuple(n + 2 * p for n, p in zip(out_spatial, padding)),
                      dtype=y.dtype)
    ym = y.transpose(0, 2, 3, 4, 1)
    sd, sh, sw = stride
    yd, yh, yw = ysp
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                contrib = np.tensordot(ym, k[:, :, dz, dy, dx], axes=([4], [0]))
                canvas[:, :, dz:dz + sd * yd:sd, dy:dy + sh * yh:sh,
                       dx:dx + sw * yw:sw] += contrib.transpose(0, 4, 1, 2, 3)
    crop = tuple(slice(p, p + n) for p, n in zip(padding, out_spatial))
    return np.ascontiguousarray(canvas[(slice(None), slice(None)) + crop])


def _conv_kernel_grad(x, gy, k_shape, stride, padding):
    """Gradient of the conv bilinear form with respect to the kernel."""
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    gk = np.zeros(k_shape, dtype=x.dtype)
    sd, sh, sw = stride
    od, oh, ow = gy.shape[2:]
    for dz in range(k_shape[2]):
        for dy in range(k_shape[3]):
            for dx in range(k_shape[4]):
                xs = xp[:, :, dz:dz + sd * od:sd, dy:dy + sh * oh:sh, dx:dx + sw * ow:sw]
                gk[:, :, dz, dy, dx] = np.tensordot(gy, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gk


def conv_nd(x, kernel, stride=1, padding=0, bias=None):
    """Strided zero-padded cross-correlation.

    ``x``: (B, C_in, D, H, W); ``kernel``: (C_out, C_in, k_d, k_h, k_w);
    optional ``bias``: (C_out,).  Output extent per axis is
    floor((n + 2p - k)/s) + 1.  Differentiable in input, kernel, and bias.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    _check_conv_geometry(x.shape, kernel.shape, stride, padding)
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(
            f"conv: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv: bias shape {bias.shape} != ({kernel.shape[0]},)")

    out = _conv_fwd(x.data, kernel.data, stride, padding)
    xd, kd = x.data, kernel.data
    x_spatial, k_shape = x.shape[2:], kernel.shape
    parents = (x, kernel)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents += (bias,)

    def bk(g):
        g = np.ascontiguousarray(g)
        grads = (_conv_adjoint(g, kd, stride, padding, x_spatial),
                 _conv_kernel_grad(xd, g, k_shape, stride, padding))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    return make_node(out, parents, "conv_nd", bk)


def conv_transpose_nd(x, kernel, stride=1, padding=0, bias=None):
    """Transpose convolution: the exact adjoint of ``conv_nd`` with the same
    geometry.

    ``x``: (B, C_in, D, H, W); ``kernel``: (C_in, C_out, k_d, k_h, k_w);
    output extent per axis is (n - 1)*s + k - 2p.  The adjoint identity
    <conv(v), x> = <v, conv_transpose(x)> holds whenever the geometries match.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    _check_conv_geometry(x.shape, kernel.shape, stride, padding, transposed=True)
    if x.shape[1] != kernel.shape[0]:
        raise ValueError(
            f"conv_transpose: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise ValueError(f"conv_transpose: bias shape {bias.shape} != ({kernel.shape[1]},)")
    out_spatial = tuple((n - 1) * s + k - 2 * p
                        for n, k, s, p in zip(x.shape[2:], kernel.shape[2:], stride, padding))
    if any(n < 1 for n in out_spatial):
        raise ValueError(f"conv_transpose: non-positive output extent {out_spatial}")

    out = _conv_adjoint(x.data, kernel.data, stride, padding, out_spatial)
    xd, kd = x.data, kernel.data
    k_shape = kernel.shape
    parents = (x, kernel)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents += (bias,)

    def bk(g):
        g = np.ascontiguousarray(g)
        grads = (_conv_fwd(g, kd, stride, padding),
                 _conv_kernel_grad(g, xd, k_shape, stride, padding))
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    return make_node(out, parents, "conv_transpose_nd", bk)


# ---------------------------------------------------------------------------
# linear / normalization primitives
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """Affine map along the last axis: x (..., in) -> (..., out).

    ``weight`` is stored (out, in); ``bias`` is (out,).
    """
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input feature size {x.shape[-1]} != weight input size {weight.shape[1]}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (math.prod(lead), x.shape[-1])), permute(weight, (1, 0)))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = y + broadcast_to(reshape(bias, (1, weight.shape[0])), y.shape)
    return reshape(y, lead + (weight.shape[0],))


def normalize(x, axes, eps):
    """(x - mean) / sqrt(var + eps) over ``axes`` (population variance)."""
    m = broadcast_to(x.mean(axes, keepdims=True), x.shape)
    centered = x - m
    v = (centered * centered).mean(axes, keepdims=True)
    return centered / broadcast_to(sqrt(add_scalar(v, eps)), x.shape)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            kaiming_uniform(rng, (out_features, in_features), in_features, dtype),
            name="weight")
        self.bias = (Parameter(np.zeros(out_features, dtype=dtype), name="bias")
                     if bias else None)

    def forward(self, x):
        return linear(x, self.weight, self.bias)

    def count_flops(self, input_shape):
        rows = math.prod(input_shape[:-1])
        return (2 * self.in_features * self.out_features * rows,
                input_shape[:-1] + (self.out_features,))


class _AffineNorm(Module):
    """Normalize over fixed axes of a (B,C,D,H,W) map, then per-channel affine."""

    axes = ()

    def __init__(self, channels, eps=1e-5, affine=True, dtype=np.float32):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.eps = float(eps)
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name="gamma") if affine else None
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name="beta") if affine else None

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ValueError(
                f"norm: expected (B,{self.channels},D,H,W), got {x.shape}")
        y = normalize(x, self.axes, self.eps)
        if self.gamma is not None:
            cshape = (1, self.channels, 1, 1, 1)
            y = y * broadcast_to(reshape(self.gamma, cshape), x.shape)
            y = y + broadcast_to(reshape(self.beta, cshape), x.shape)
        return y

    def count_flops(self, input_shape):
        return 0, input_shape


class InstanceNorm(_AffineNorm):
    """Normalizes each (batch, channel) over all spatial positions."""

    axes = (2, 3, 4)


class ChannelNorm(_AffineNorm):
    """Normalizes each (batch, position) across channels (layer-norm style)."""

    axes = (1,)


# ---------------------------------------------------------------------------
# composite blocks
# ---------------------------------------------------------------------------

class Conv(Module):
    """Convolution layer.  ``padding="same"`` preserves extents at stride 1
    (odd kernels only); convolutions feeding a norm carry no bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding="same", bias=False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        ks = _triple(kernel_size, "kernel_size")
        self.stride = _triple(stride, "stride")
        self.padding = same_padding(ks) if padding == "same" else _triple(padding, "padding")
        fan_in = in_channels * math.prod(ks)
        self.kernel = Parameter(
            kaiming_uniform(rng, (out_channels, in_channels) + ks, fan_in, dtype),
            name="kernel")
        self.bias = (Parameter(np.zeros(out_channels, dtype=dtype), name="bias")
                     if bias else None)

    def forward(self, x):
        return conv_nd(x, self.kernel, self.stride, self.padding, self.bias)

    def count_flops(self, input_shape):
        B = input_shape[0]
        co, ci = self.kernel.shape[:2]
        ks = self.kernel.shape[2:]
        out_sp = tuple(conv_output_extent(n, k, s, p)
                       for n, k, s, p in zip(input_shape[2:], ks, self.stride, self.padding))
        return (2 * co * ci * math.prod(ks) * B * math.prod(out_sp),
                (B, co) + out_sp)


class ConvTranspose(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, bias=False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        ks = _triple(kernel_size, "kernel_size")
        self.stride = _triple(stride, "stride")
        self.padding = _triple(padding, "padding")
        fan_in = in_channels * math.prod(ks)
        self.kernel = Parameter(
            kaiming_uniform(rng, (in_channels, out_channels) + ks, fan_in, dtype),
            name="kernel")
        self.bias = (Parameter(np.zeros(out_channels, dtype=dtype), name="bias")
                     if bias else None)

    def forward(self, x):
        return conv_transpose_nd(x, self.kernel, self.stride, self.padding, self.bias)

    def count_flops(self, input_shape):
        B = input_shape[0]
        ci, co = self.kernel.shape[:2]
        ks = self.kernel.shape[2:]
        out_sp = tuple((n - 1) * s + k - 2 * p
                       for n, k, s, p in zip(input_shape[2:], ks, self.stride, self.padding))
        return (2 * ci * co * math.prod(ks) * B * math.prod(input_shape[2:]),
                (B, co) + out_sp)


class ConvNormAct(Module):
    """Conv -> InstanceNorm -> ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding="same", rng=None, dtype=np.float32):
        self.conv = Conv(in_channels, out_channels, kernel_size, stride,
                         padding, bias=False, rng=rng, dtype=dtype)
        self.norm = InstanceNorm(out_channels, dtype=dtype)

    def forward(self, x):
        return self.norm(self.conv(x)).relu()

    def count_flops(self, input_shape):
        return self.conv.count_flops(input_shape)


class ResidualConvBlock(Module):
    """Two Conv-IN-ReLU stages with a residual skip added before the final
    ReLU: y = relu(IN(conv2(relu(IN(conv1(x))))) + skip(x)).

    ``conv1`` carries the (optional) downsampling stride.  The skip path is
    the identity when shapes allow it, otherwise a strided 1x1x1
    projection followed by IN.
    """

    def __init__(self, in_channels, out_channels, kernel_size=(3, 3, 3),
                 stride=1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        stride = _triple(stride, "stride")
        self.conv1 = Conv(in_channels, out_channels, kernel_size, stride,
                          "same", rng=rng, dtype=dtype)
        self.norm1 = InstanceNorm(out_channels, dtype=dtype)
        self.conv2 = Conv(out_channels, out_channels, kernel_size, 1,
                          "same", rng=rng, dtype=dtype)
        self.norm2 = InstanceNorm(out_channels, dtype=dtype)
        if in_channels != out_channels or stride != (1, 1, 1):
            self.proj = Conv(in_channels, out_channels, 1, stride, 0,
                             rng=rng, dtype=dtype)
            self.proj_norm = InstanceNorm(out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x):
        h = self.norm1(self.conv1(x)).relu()
        h = self.norm2(self.conv2(h))
        s = x if self.proj is None else self.proj_norm(self.proj(x))
        return (h + s).relu()

    def count_flops(self, input_shape):
        f1, mid = self.conv1.count_flops(input_shape)
        f2, out = self.conv2.count_flops(mid)
        fp = self.proj.count_flops(input_shape)[0] if self.proj is not None else 0
        return f1 + f2 + fp, out


class SeparableConvBlock(Module):
    """Decoder convolution split into an in-plane (1,3,3) stage and a
    through-plane (3,1,1) stage, IN + ReLU after each; 12 C^2 kernel weights
    versus 27 C^2 for a full 3x3x3 conv."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_plane = Conv(channels, channels, (1, 3, 3), 1, (0, 1, 1),
                             rng=rng, dtype=dtype)
        self.norm_ip = InstanceNorm(channels, dtype=dtype)
        self.through_plane = Conv(channels, channels, (3, 1, 1), 1, (1, 0, 0),
                                  rng=rng, dtype=dtype)
        self.norm_tp = InstanceNorm(channels, dtype=dtype)

    def forward(self, x):
        h = self.norm_ip(self.in_plane(x)).relu()
        return self.norm_tp(self.through_plane(h)).relu()

    def count_flops(self, input_shape):
        f1, mid = self.in_plane.count_flops(input_shape)
        f2, out = self.through_plane.count_flops(mid)
        return f1 + f2, out
