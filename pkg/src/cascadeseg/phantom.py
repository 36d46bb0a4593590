"""Synthetic multi-modality phantoms with nested tumor regions.

A brain-like ellipsoid carries a whole-tumor region built from a few
overlapping ellipsoids; the core and enhancing regions are smaller ellipsoids
intersected with their parent, so EN within TC within WT holds by
construction. Randomness comes only from a Philox generator keyed by the seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .kvfile import float_tuple, format_kv, int_tuple, parse_kv
from .volio import LabelMap, MODALITIES, VolumeSet

# tissue classes: brain, edema (label 2), non-enhancing core (1), enhancing core (4)
DEFAULT_CONTRAST = {
    "t1":    (1.0, 0.85, 0.6, 0.7),
    "t1c":   (1.0, 0.9, 0.7, 1.8),
    "t2":    (1.0, 1.6, 1.3, 1.2),
    "flair": (1.0, 1.8, 1.4, 1.5),
}


class PhantomError(ValueError):
    pass


@dataclass
class PhantomParams:
    extents: tuple[int, int, int] = (64, 64, 64)
    brain_radius: tuple[float, float] = (0.38, 0.45)  # fraction of each extent
    wt_fraction: tuple[float, float] = (0.01, 0.10)
    wt_lobes: tuple[int, int] = (1, 3)
    tc_ratio: tuple[float, float] = (0.55, 0.75)  # TC radii relative to WT
    en_ratio: tuple[float, float] = (0.45, 0.65)  # EN radii relative to TC
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    texture_std: float = 0.06
    noise_std: float = 0.08
    bias_strength: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if len(self.extents) != 3 or min(self.extents) < 8:
            raise PhantomError(f"extents must be three values >= 8, got {self.extents}")
        lo, hi = self.wt_fraction
        if not 0 < lo < hi < 0.5:
            raise PhantomError(f"wt_fraction range must satisfy 0 < lo < hi < 0.5, got {lo}, {hi}")
        for name in ("tc_ratio", "en_ratio"):
            a, b = getattr(self, name)
            if not 0 < a <= b < 1:
                raise PhantomError(f"{name} must lie in (0, 1) so nested radii strictly "
                                   f"decrease, got ({a}, {b})")
        if not 0 < self.brain_radius[0] <= self.brain_radius[1] <= 0.5:
            raise PhantomError(f"brain_radius must lie in (0, 0.5], got {self.brain_radius}")
        if not 1 <= self.wt_lobes[0] <= self.wt_lobes[1]:
            raise PhantomError(f"wt_lobes must be a range of counts >= 1, got {self.wt_lobes}")
        if set(self.contrast) != set(MODALITIES) or any(len(v) != 4 for v in self.contrast.values()):
            raise PhantomError(f"contrast table needs 4 tissue values for each of {MODALITIES}")
        if min(self.noise_std, self.texture_std, self.bias_strength) < 0:
            raise PhantomError("noise, texture and bias strengths must be non-negative")
        if self.bias_strength >= 1:
            raise PhantomError("bias_strength must be < 1 to keep intensities positive")


_RANGE_KEYS = ("brain_radius", "wt_fraction", "tc_ratio", "en_ratio")
_SCALAR_KEYS = ("texture_std", "noise_std", "bias_strength")


def params_from_text(text: str) -> PhantomParams:
    kv = parse_kv(text)
    p = PhantomParams()
    for key, value in kv.items():
        if key == "extents":
            p.extents = int_tuple(value)
        elif key == "wt_lobes":
            p.wt_lobes = int_tuple(value)
        elif key in _RANGE_KEYS:
            p.__setattr__(key, float_tuple(value))
        elif key in _SCALAR_KEYS:
            p.__setattr__(key, float(value))
        elif key == "seed":
            p.seed = int(value)
        elif key.startswith("contrast."):
            p.contrast[key.split(".", 1)[1]] = float_tuple(value)
        else:
            raise PhantomError(f"unknown phantom parameter {key!r}")
    p.validate()
    return p


def params_to_text(p: PhantomParams) -> str:
    pairs = [("extents", ",".join(map(str, p.extents))),
             ("wt_lobes", ",".join(map(str, p.wt_lobes)))]
    pairs += [(k, ",".join(repr(float(v)) for v in getattr(p, k))) for k in _RANGE_KEYS]
    pairs += [(k, repr(float(getattr(p, k)))) for k in _SCALAR_KEYS]
    pairs += [(f"contrast.{m}", ",".join(repr(float(v)) for v in p.contrast[m]))
              for m in MODALITIES]
    pairs.append(("seed", str(p.seed)))
    return format_kv(pairs)


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _quadratic(grid: np.ndarray, center, radii, rot: np.ndarray) -> np.ndarray:
    """Ellipsoid level function: <= 1 inside the ellipsoid with ``radii``."""
    local = np.tensordot(rot.T, grid - np.asarray(center)[:, None, None, None], axes=1)
    return np.einsum("i...,i...->...", local, local / np.square(np.asarray(radii))[:, None, None, None])


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def _bias_field(rng, grid: np.ndarray, ext: np.ndarray, terms: int = 4) -> np.ndarray:
    """Smooth field in [-1, 1] from a few random low-frequency cosines."""
    f = np.zeros(grid.shape[1:])
    for _ in range(terms):
        k = rng.uniform(0.3, 1.2, 3) * np.pi / ext * rng.choice([-1.0, 1.0], 3)
        f += rng.uniform(0.5, 1.0) * np.cos(np.tensordot(k, grid, axes=1) + rng.uniform(0, 2 * np.pi))
    return f / (np.abs(f).max() + 1e-12)


def phantom_generate(params: PhantomParams) -> tuple[VolumeSet, LabelMap]:
    """Deterministic (VolumeSet, LabelMap) pair for ``params``."""
    params.validate()
    rng = np.random.Generator(np.random.Philox(params.seed))
    shape = tuple(int(e) for e in params.extents)
    ext = np.asarray(shape, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape],
                                indexing="ij"))

    brain_c = (ext - 1) / 2 + rng.uniform(-0.03, 0.03, 3) * ext
    brain_r = rng.uniform(*params.brain_radius, 3) * ext
    brain = _quadratic(grid, brain_c, brain_r, np.eye(3)) <= 1.0

    # whole tumor: a main ellipsoid plus lobes; the common scale is chosen as
    # the quantile of the union's level function that yields the drawn volume
    lo, hi = params.wt_fraction
    span = hi - lo
    target = int(round(rng.uniform(lo + 0.1 * span, hi - 0.1 * span) * brain.size))
    tumor_c = brain_c + rng.uniform(-0.35, 0.35, 3) * brain_r
    shape_r = rng.uniform(0.75, 1.25, 3)
    shape_r *= (3 * target / (4 * np.pi * shape_r.prod())) ** (1 / 3)
    rot = _rotation(rng)
    level = _quadratic(grid, tumor_c, shape_r, rot)
    n_lobes = int(rng.integers(params.wt_lobes[0], params.wt_lobes[1] + 1)) - 1
    for _ in range(n_lobes):
        offset, rel = rng.uniform(-0.6, 0.6, 3), rng.uniform(0.45, 0.75, 3)
        np.minimum(level, _quadratic(grid, tumor_c + rot @ (offset * shape_r), rel * shape_r,
                                     _rotation(rng)), out=level)
    inside = np.sort(level[brain])
    cut = inside[min(target, inside.size) - 1]
    wt = brain & (level <= cut)
    wt_radii = shape_r * np.sqrt(cut)

    tc_r = wt_radii * rng.uniform(*params.tc_ratio)
    tc_c = tumor_c + rot @ (rng.uniform(-0.15, 0.15, 3) * wt_radii)
    tc = (_quadratic(grid, tc_c, tc_r, rot) <= 1.0) & wt
    en_r = tc_r * rng.uniform(*params.en_ratio)
    en_c = tc_c + rot @ (rng.uniform(-0.15, 0.15, 3) * tc_r)
    en = (_quadratic(grid, en_c, en_r, _rotation(rng)) <= 1.0) & tc

    labels = np.zeros(shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[en] = 4

    tissue = np.zeros(shape, dtype=np.int64)  # index into the contrast rows
    tissue[wt] = 1
    tissue[tc] = 2
    tissue[en] = 3
    bias = 1.0 + params.bias_strength * _bias_field(rng, grid, ext)
    data = np.zeros((len(MODALITIES),) + shape, dtype=np.float64)
    for c, m in enumerate(MODALITIES):
        table = np.asarray(params.contrast[m], dtype=np.float64)
        texture = params.texture_std * _smooth_field(rng, shape, sigma=2.0)
        noise = params.noise_std * rng.standard_normal(shape)
        vol = (table[tissue] + texture) * bias + noise
        data[c] = np.where(brain, np.maximum(vol, 1e-3), 0.0)
    return VolumeSet(data.astype(np.float32)), LabelMap(labels)
