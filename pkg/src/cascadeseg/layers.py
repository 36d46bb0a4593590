"""Forward operations used by the anisotropic networks, each with its gradient.

All volumetric tensors use the axis order (batch, channel, x, y, z). The
out-of-plane axis is z; "in-plane" means the x/y axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .tensor import Tensor, is_grad_enabled

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PRELU_INIT = 0.25

# Rows of the flattened volume processed per GEMM; keeps the shifted
# operands of all taps resident in L2.
_CHUNK_BYTES = 256 * 1024


@dataclass(frozen=True)
class KernelSpec:
    """Kernel geometry of one convolution layer.

    ``extent`` and ``dilation`` are per (x, y, z) axis. Only unit stride is
    supported; spatial downsampling is done by :func:`downsample2d`.
    """

    extent: tuple[int, int, int]
    dilation: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self):
        if len(self.extent) != 3 or len(self.dilation) != 3 or len(self.stride) != 3:
            raise ValueError("KernelSpec needs 3 entries per field (x, y, z)")
        if any(k < 1 or k % 2 == 0 for k in self.extent):
            raise ValueError(f"kernel extents must be odd and positive, got {self.extent}")
        if any(d < 1 for d in self.dilation):
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if any(s != 1 for s in self.stride):
            raise ValueError(f"only unit stride is supported, got {self.stride}")
        if self.padding != "same":
            raise ValueError(f"only 'same' zero padding is supported, got {self.padding!r}")

    @classmethod
    def intra_slice(cls, dilation: int = 1) -> KernelSpec:
        return cls((3, 3, 1), (dilation, dilation, 1))

    @classmethod
    def inter_slice(cls) -> KernelSpec:
        return cls((1, 1, 3), (1, 1, 1))

    @property
    def is_intra_slice(self) -> bool:
        return self.extent[2] == 1

    @property
    def is_inter_slice(self) -> bool:
        return self.extent[0] == 1 and self.extent[1] == 1

    @property
    def halo(self) -> tuple[int, int, int]:
        return tuple((k // 2) * d for k, d in zip(self.extent, self.dilation))


def channels_last(a: np.ndarray) -> np.ndarray:
    """Logical (B, C, ...) array as a contiguous (B, ..., C) array (no copy if
    the memory is already channels-last)."""
    return np.ascontiguousarray(np.moveaxis(a, 1, -1))


def logical_view(cl: np.ndarray) -> np.ndarray:
    """Inverse of :func:`channels_last`: a (B, C, ...) view onto (B, ..., C) memory."""
    return np.moveaxis(cl, -1, 1)


def _rows(a: np.ndarray) -> np.ndarray:
    """(N, C) rows of a logical (B, C, ...) array."""
    return channels_last(a).reshape(-1, a.shape[1])


def _wide(a: np.ndarray) -> tuple[np.ndarray, int]:
    """Channels-last memory of ``a`` as (M, R*C) plus the repeat count R.

    Per-channel vectors tiled R times broadcast against the wide view with a
    long inner loop; numpy is slow when the innermost extent is just C.
    """
    cl = channels_last(a)
    R = int(np.prod(cl.shape[2:-1])) if cl.ndim > 3 else 1
    return cl.reshape(-1, R * a.shape[1]), R


def _per_channel(wide_sum: np.ndarray, R: int, C: int) -> np.ndarray:
    return wide_sum.reshape(R, C).sum(axis=0)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{what}: non-finite values in input")


class _ShiftPlan:
    """Flat-offset description of a same-padded convolution.

    The input is zero-padded by the kernel halo, stored channels-last and
    flattened to rows of ``C`` values. In that layout every kernel tap is a
    constant row offset, so the convolution becomes a sum of small GEMMs over
    contiguous row slices. Rows near the padded border produce garbage that
    is cropped away afterwards.
    """

    def __init__(self, spatial: tuple[int, int, int], batch: int, spec: KernelSpec):
        self.spatial = spatial
        self.batch = batch
        self.halo = spec.halo
        px, py, pz = self.halo
        X, Y, Z = spatial
        self.padded = (X + 2 * px, Y + 2 * py, Z + 2 * pz)
        Xp, Yp, Zp = self.padded
        self.rows = batch * Xp * Yp * Zp
        kx, ky, kz = spec.extent
        dx, dy, dz = spec.dilation
        self.taps: list[tuple[int, int, int]] = []
        self.offsets: list[int] = []
        for i in range(kx):
            for j in range(ky):
                for k in range(kz):
                    self.taps.append((i, j, k))
                    self.offsets.append(((i - kx // 2) * dx * Yp + (j - ky // 2) * dy) * Zp
                                        + (k - kz // 2) * dz)
        self.margin = max(abs(o) for o in self.offsets)

    def interior(self, arr5: np.ndarray) -> np.ndarray:
        px, py, pz = self.halo
        X, Y, Z = self.spatial
        return arr5[:, px:px + X, py:py + Y, pz:pz + Z]

    def embed(self, data: np.ndarray) -> np.ndarray:
        """(B, C, X, Y, Z) -> zero-margined flat rows (margin + rows + margin, C)."""
        C = data.shape[1]
        ext = np.zeros((self.rows + 2 * self.margin, C), dtype=data.dtype)
        body = ext[self.margin:self.margin + self.rows].reshape(self.batch, *self.padded, C)
        self.interior(body)[...] = np.moveaxis(data, 1, -1)
        return ext

    def extract(self, flat: np.ndarray) -> np.ndarray:
        """Flat rows (rows, C) on the padded grid -> (B, C, X, Y, Z)."""
        C = flat.shape[1]
        body = flat.reshape(self.batch, *self.padded, C)
        return logical_view(np.ascontiguousarray(self.interior(body)))

    def chunk_rows(self, width: int, itemsize: int) -> int:
        return max(512, _CHUNK_BYTES // (max(width, 1) * itemsize))


def conv_aniso(x: Tensor, weight: Tensor, bias: Tensor | None, spec: KernelSpec) -> Tensor:
    """Same-padded, dilated 3D cross-correlation.

    ``x`` is (B, C, X, Y, Z), ``weight`` is (Co, C, kx, ky, kz) and ``bias``
    is (Co,). The output keeps the spatial extents of the input.
    """
    if x.data.ndim != 5:
        raise ValueError(f"conv_aniso: input must be 5-D (B,C,X,Y,Z), got shape {x.shape}")
    if weight.data.ndim != 5:
        raise ValueError(f"conv_aniso: weight must be 5-D (Co,C,kx,ky,kz), got shape {weight.shape}")
    B, C, X, Y, Z = x.shape
    Co, Cw = weight.shape[:2]
    if Cw != C:
        raise ValueError(f"conv_aniso: input has {C} channels but weight expects {Cw}")
    if tuple(weight.shape[2:]) != tuple(spec.extent):
        raise ValueError(f"conv_aniso: weight kernel {tuple(weight.shape[2:])} "
                         f"does not match spec extent {spec.extent}")
    if bias is not None and bias.shape != (Co,):
        raise ValueError(f"conv_aniso: bias shape {bias.shape} != ({Co},)")
    _require_finite(x.data, "conv_aniso")

    plan = _ShiftPlan((X, Y, Z), B, spec)
    dtype = x.dtype
    w = weight.data.astype(dtype, copy=False)
    tap_mats = [np.ascontiguousarray(w[:, :, i, j, k].T) for (i, j, k) in plan.taps]
    xe = plan.embed(x.data)
    m, rows = plan.margin, plan.rows
    out = np.empty((rows, Co), dtype=dtype)
    step = plan.chunk_rows(max(C, Co), dtype.itemsize)
    tmp = np.empty((step, Co), dtype=dtype)
    for s in range(0, rows, step):
        e = min(rows, s + step)
        o = out[s:e]
        t = tmp[:e - s]
        off = plan.offsets[0]
        np.matmul(xe[m + off + s:m + off + e], tap_mats[0], out=o)
        for off, mat in zip(plan.offsets[1:], tap_mats[1:]):
            np.matmul(xe[m + off + s:m + off + e], mat, out=t)
            o += t
    result = plan.extract(out)
    if bias is not None:
        rw, R = _wide(result)
        rw += np.tile(bias.data.astype(dtype, copy=False), R)

    def backward_fn(g):
        ge = plan.embed(g)
        gx = gw = gb = None
        if x.requires_grad:
            gflat = np.empty((rows, C), dtype=dtype)
            tmp_c = np.empty((step, C), dtype=dtype)
            mats_t = [np.ascontiguousarray(mat.T) for mat in tap_mats]
            for s in range(0, rows, step):
                e = min(rows, s + step)
                o = gflat[s:e]
                t = tmp_c[:e - s]
                off = plan.offsets[0]
                np.matmul(ge[m - off + s:m - off + e], mats_t[0], out=o)
                for off, mat in zip(plan.offsets[1:], mats_t[1:]):
                    np.matmul(ge[m - off + s:m - off + e], mat, out=t)
                    o += t
            gx = plan.extract(gflat)
        if weight.requires_grad:
            acc = np.zeros((len(plan.taps), C, Co), dtype=dtype)
            for s in range(0, rows, step):
                e = min(rows, s + step)
                gs = ge[m + s:m + e]
                for ti, off in enumerate(plan.offsets):
                    acc[ti] += xe[m + off + s:m + off + e].T @ gs
            gw = np.zeros_like(w)
            for ti, (i, j, k) in enumerate(plan.taps):
                gw[:, :, i, j, k] = acc[ti].T
            gw = gw.astype(weight.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gw_, R = _wide(g)
            gb = _per_channel(gw_.sum(axis=0, dtype=np.float64), R, Co).astype(bias.dtype)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(result, parents, backward_fn)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """max(0, x) + a * min(0, x) with one learned slope ``a`` per channel."""
    C = x.shape[1]
    if slope.shape != (C,):
        raise ValueError(f"prelu: slope has shape {slope.shape}, expected ({C},)")
    xw, R = _wide(x.data)
    cl_shape = channels_last(x.data).shape
    a_t = np.tile(slope.data.astype(x.dtype, copy=False), R)
    neg_part = np.minimum(xw, 0)
    # d(out)/dx: 1 where x > 0, a elsewhere
    factor = np.multiply(xw <= 0, a_t - 1, dtype=x.dtype)
    factor += 1
    out = xw * factor

    def backward_fn(g):
        gw, _ = _wide(g)
        gx = logical_view((gw * factor).reshape(cl_shape)) if x.requires_grad else None
        ga = None
        if slope.requires_grad:
            ga = _per_channel(np.einsum("nk,nk->k", gw, neg_part), R, C).astype(slope.dtype)
        return gx, ga

    return Tensor._from_op(logical_view(out.reshape(cl_shape)), (x, slope), backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer; ``None`` until initialized."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-channel normalization over the (batch, spatial) axes plus affine map."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"do not match {C} channels")
    dtype = x.dtype
    cl_shape = channels_last(x.data).shape
    xw, R = _wide(x.data)
    count = x.data.size // C
    if mode == "train":
        mean = _per_channel(xw.sum(axis=0, dtype=np.float64), R, C) / count
        centered = xw - np.tile(mean.astype(dtype), R)
        var = _per_channel(np.einsum("nk,nk->k", centered, centered).astype(np.float64),
                           R, C) / count
        if state.running_mean is None:
            state.running_mean = mean.astype(dtype)
            state.running_var = var.astype(dtype)
        else:
            mom = state.momentum
            state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(
                state.running_mean.dtype)
            state.running_var = (mom * state.running_var + (1 - mom) * var).astype(
                state.running_var.dtype)
    elif mode == "infer":
        if state.running_mean is None or state.running_var is None:
            raise RuntimeError("batch_norm: running statistics are uninitialized; "
                               "cannot run in infer mode")
        var = state.running_var.astype(np.float64)
        centered = xw - np.tile(state.running_mean.astype(dtype), R)
    else:
        raise ValueError(f"batch_norm: mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered
    xhat *= np.tile(inv_std.astype(dtype), R)
    gam = gamma.data.astype(np.float64)
    out = xhat * np.tile(gam.astype(dtype), R)
    out += np.tile(beta.data.astype(dtype), R)

    def backward_fn(g):
        gw, _ = _wide(g)
        gsum = _per_channel(gw.sum(axis=0, dtype=np.float64), R, C)
        gxhat_sum = _per_channel(np.einsum("nk,nk->k", gw, xhat).astype(np.float64), R, C)
        ggamma = gxhat_sum.astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = gsum.astype(beta.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = np.tile((gam * inv_std).astype(dtype), R)
            if mode == "train":
                k1 = np.tile((gsum / count).astype(dtype), R)
                k2 = np.tile((gxhat_sum / count).astype(dtype), R)
                gx = xhat * k2
                gx += k1
                np.subtract(gw, gx, out=gx)
                gx *= scale
            else:
                gx = gw * scale
            gx = logical_view(gx.reshape(cl_shape))
        return gx, ggamma, gbeta

    return Tensor._from_op(logical_view(out.reshape(cl_shape)), (x, gamma, beta), backward_fn)


def bn_prelu(x: Tensor, gamma: Tensor, beta: Tensor, slope: Tensor, state: BatchNormState,
             mode: str = "train") -> Tensor:
    """``prelu(batch_norm(x))`` as one fused op with the same results.

    The normalization is folded into a per-channel affine map ``x*s + t``;
    the backward pass rebuilds the normalized input from ``x`` on the fly.
    """
    C = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("slope", slope)):
        if t.shape != (C,):
            raise ValueError(f"bn_prelu: {name} has shape {t.shape}, expected ({C},)")
    dtype = x.dtype
    cl = channels_last(x.data)
    xr = cl.reshape(-1, C)
    count = xr.shape[0]
    if mode == "train":
        mean, var = K.channel_moments(xr)
        if state.running_mean is None:
            state.running_mean = mean.astype(dtype)
            state.running_var = var.astype(dtype)
        else:
            mom = state.momentum
            state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(
                state.running_mean.dtype)
            state.running_var = (mom * state.running_var + (1 - mom) * var).astype(
                state.running_var.dtype)
    elif mode == "infer":
        if state.running_mean is None or state.running_var is None:
            raise RuntimeError("bn_prelu: running statistics are uninitialized; "
                               "cannot run in infer mode")
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"bn_prelu: mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    scale = gamma.data.astype(np.float64) * inv_std
    shift = beta.data.astype(np.float64) - mean * scale
    a = slope.data.astype(dtype)
    out = np.empty_like(xr)
    needs_graph = is_grad_enabled() and any(
        t.requires_grad for t in (x, gamma, beta, slope))
    pre = np.empty_like(xr) if needs_graph else out
    K.affine_prelu(xr, scale.astype(dtype), shift.astype(dtype), a, pre, out)

    def backward_fn(g):
        gr = channels_last(g).reshape(-1, C)
        gslope = K.channel_dot_negative(gr, pre) if slope.requires_grad else None
        gy = np.empty_like(xr)
        K.prelu_grad(gr, pre, a, gy)
        gsum = K.channel_sum(gy)
        gdot = K.channel_dot(gy, xr)
        gxhat_sum = inv_std * (gdot - mean * gsum)
        ga = gslope.astype(slope.dtype) if slope.requires_grad else None
        ggamma = gxhat_sum.astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = gsum.astype(beta.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if mode == "train":
                k1 = -scale * inv_std * gxhat_sum / count
                k0 = -scale * gsum / count - k1 * mean
            else:
                k1 = k0 = np.zeros(C)
            K.affine_grad_input(gy, xr, scale.astype(dtype), k1.astype(dtype),
                                k0.astype(dtype), gy)
            gx = logical_view(gy.reshape(cl.shape))
        return gx, ggamma, gbeta, ga

    return Tensor._from_op(logical_view(out.reshape(cl.shape)), (x, gamma, beta, slope),
                           backward_fn)


def downsample2d(x: Tensor) -> Tensor:
    """2x2x1 max pooling with stride 2 in-plane.

    Odd in-plane extents are zero-padded to even first; the padding applied is
    reported by :func:`downsample_padding` so callers can size the inverse.
    Gradients go to the first maximal element of each window, scanning
    (0,0), (0,1), (1,0), (1,1).
    """
    B, C, X, Y, Z = x.shape
    px, py = downsample_padding(X, Y)
    cl = channels_last(x.data)
    if px or py:
        cl = np.pad(cl, ((0, 0), (0, px), (0, py), (0, 0), (0, 0)))
    Xe, Ye = X + px, Y + py
    corners = [cl[:, i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(corners[0], corners[1])
    np.maximum(out, np.maximum(corners[2], corners[3]), out=out)

    def backward_fn(g):
        gcl = channels_last(g)
        gfull = np.zeros((B, Xe, Ye, Z, C), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for n, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = corners[n] == out
            if n < 3:
                hit &= ~taken
                taken |= hit
            else:
                hit = ~taken
            np.multiply(gcl, hit, out=gfull[:, i::2, j::2])
        if px or py:
            gfull = gfull[:, :X, :Y]
        return (logical_view(np.ascontiguousarray(gfull)),)

    return Tensor._from_op(logical_view(out), (x,), backward_fn)


def downsample_padding(X: int, Y: int) -> tuple[int, int]:
    return X % 2, Y % 2


def interpolation_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_in*factor, n_in), pixel-center aligned.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / factor - 0.5``,
    so the outer edges of the input and output grids coincide. Coordinates
    beyond the first/last input center clamp to the edge value.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Bilinear in-plane upsampling by an integer factor; z is untouched."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample2d: factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,))
    B, C, X, Y, Z = x.shape
    ux = interpolation_matrix(X, factor, x.dtype)
    uy = interpolation_matrix(Y, factor, x.dtype)
    out = np.einsum("ox,bcxyz->bcoyz", ux, x.data, optimize=True)
    out = np.einsum("py,bcoyz->bcopz", uy, out, optimize=True)

    def backward_fn(g):
        gx = np.einsum("py,bcopz->bcoyz", uy, g, optimize=True)
        gx = np.einsum("ox,bcoyz->bcxyz", ux, gx, optimize=True)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 at every voxel."""
    if x.data.ndim < 2 or x.shape[1] < 2:
        raise ValueError(f"softmax_channels needs >= 2 channels, got shape {x.shape}")
    C = x.shape[1]
    cl = channels_last(x.data)
    p = np.empty_like(cl)
    K.softmax_rows(cl.reshape(-1, C), p.reshape(-1, C))

    def backward_fn(g):
        gx = np.empty_like(p)
        K.softmax_rows_grad(p.reshape(-1, C), channels_last(g).reshape(-1, C),
                            gx.reshape(-1, C))
        return (logical_view(gx),)

    return Tensor._from_op(logical_view(p), (x,), backward_fn)


def add_residual(x: Tensor, branch: Tensor) -> Tensor:
    if x.shape != branch.shape:
        raise ValueError(f"add_residual: shape mismatch {x.shape} vs {branch.shape}")
    return Tensor._from_op(x.data + branch.data, (x, branch), lambda g: (g, g))


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: non-channel extents differ: {ref} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = logical_view(np.concatenate([channels_last(p.data) for p in parts], axis=-1))

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(out, tuple(parts), backward_fn)


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Append zero channels up to ``channels`` (parameter-free projection)."""
    C = x.shape[1]
    if channels < C:
        raise ValueError(f"pad_channels: cannot shrink {C} channels to {channels}")
    if channels == C:
        return x
    pad = [(0, 0)] * x.data.ndim
    pad[1] = (0, channels - C)
    out = np.pad(x.data, pad)
    return Tensor._from_op(out, (x,), lambda g: (g[:, :C],))


def pad_inplane(x: Tensor, px: int, py: int) -> Tensor:
    """Zero-pad the trailing end of the x and y axes."""
    if px == 0 and py == 0:
        return x
    X, Y = x.shape[2], x.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, px), (0, py), (0, 0)))
    return Tensor._from_op(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, :X, :Y]),))


def crop_inplane(x: Tensor, X: int, Y: int) -> Tensor:
    """Keep the leading ``X`` x ``Y`` in-plane block."""
    Xi, Yi = x.shape[2], x.shape[3]
    if X == Xi and Y == Yi:
        return x
    if X > Xi or Y > Yi:
        raise ValueError(f"crop_inplane: target ({X},{Y}) exceeds input ({Xi},{Yi})")
    out = np.ascontiguousarray(x.data[:, :, :X, :Y])

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :X, :Y] = g
        return (full,)

    return Tensor._from_op(out, (x,), backward_fn)


def scale_tensor(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return Tensor._from_op(x.data * f, (x,), lambda g: (g * f,))
