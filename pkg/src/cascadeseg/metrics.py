"""Dice loss for training; Dice, Hausdorff distance and summaries for evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensor import Tensor

DICE_EPS = 1e-5
REGIONS = ("EN", "WT", "TC")


def dice_loss(prob: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss on the foreground channel, pooled over the whole batch.

    ``prob`` is a (B, 2, ...) softmax output and ``target`` a boolean
    (B, ...) mask. Returns ``1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)``.
    """
    if prob.data.ndim < 2 or prob.shape[1] != 2:
        raise ValueError(f"dice_loss: expected (B, 2, ...) probabilities, got {prob.shape}")
    target = np.asarray(target)
    if target.shape != prob.shape[:1] + prob.shape[2:]:
        raise ValueError(f"dice_loss: target shape {target.shape} does not match "
                         f"probabilities {prob.shape}")
    sums = prob.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-3:
        raise ValueError("dice_loss: input is not a probability map "
                         f"(channel sums deviate by {np.abs(sums - 1.0).max():.3g})")
    p = prob.data[:, 1]
    g = target.astype(prob.dtype)
    inter = float((p * g).sum(dtype=np.float64))
    denom = float(p.sum(dtype=np.float64)) + float(g.sum(dtype=np.float64)) + eps
    numer = 2.0 * inter + eps
    loss = np.asarray(1.0 - numer / denom, dtype=prob.dtype)

    def backward_fn(grad):
        gp = -(2.0 * g * denom - numer) / (denom * denom)
        full = np.zeros_like(prob.data)
        full[:, 1] = (float(grad) * gp).astype(prob.dtype)
        return (full,)

    return Tensor._from_op(loss, (prob,), backward_fn)


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    a, b = _check_pair(a, b, "dice_score")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour.

    Voxels on the volume border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"boundary: expected a 3-D mask, got {mask.ndim}-D")
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~interior


def hausdorff(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Symmetric Hausdorff distance (mm) between the boundary voxel sets.

    Returns 0.0 when both masks are empty and ``None`` (undefined) when
    exactly one is.
    """
    a, b = _check_pair(a, b, "hausdorff")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (a.ndim,) or np.any(spacing <= 0):
        raise ValueError(f"hausdorff: invalid spacing {spacing}")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return None
    pa = np.argwhere(boundary(a)) * spacing
    pb = np.argwhere(boundary(b)) * spacing
    d_ab = cKDTree(pb).query(pa, k=1)[0].max()
    d_ba = cKDTree(pa).query(pb, k=1)[0].max()
    return float(max(d_ab, d_ba))


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    std: float
    median: float
    q25: float
    q75: float
    count: int
    undefined: int = 0


def summarize(scores) -> ScoreSummary:
    """Mean, population std, median and 25/75 quantiles (linear interpolation).

    ``None`` / NaN entries (undefined Hausdorff distances) are excluded and
    counted in ``undefined``.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("summarize: empty score list")
    valid = [float(s) for s in scores if s is not None and not math.isnan(float(s))]
    undefined = len(scores) - len(valid)
    if not valid:
        raise ValueError(f"summarize: all {undefined} scores are undefined")
    v = np.asarray(valid, dtype=np.float64)
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return ScoreSummary(float(v.mean()), float(v.std()), float(med), float(q25), float(q75),
                        len(valid), undefined)


SUMMARY_ROWS = (("Mean", "mean"), ("Standard deviation", "std"), ("Median", "median"),
                ("25 quantile", "q25"), ("75 quantile", "q75"))


def format_summary_table(per_region: dict[str, dict[str, ScoreSummary]]) -> str:
    """Text table with Dice and Hausdorff columns per region.

    A ``None`` summary (every value undefined) prints as ``undefined``.
    """
    header = "{:<20}".format("") + "".join(f"{'Dice ' + r:>12}" for r in REGIONS) \
        + "".join(f"{'HD ' + r:>12}" for r in REGIONS)
    lines = [header]
    for label, attr in SUMMARY_ROWS:
        cells = [per_region[r][m] for m in ("dice", "hausdorff_mm") for r in REGIONS]
        lines.append(f"{label:<20}" + "".join(
            f"{'undefined':>12}" if c is None else f"{getattr(c, attr):>12.4f}" for c in cells))
    return "\n".join(lines) + "\n"


def evaluation_csv(rows: list[dict]) -> str:
    """CSV with one row per (case, region) followed by the summary block.

    ``rows`` items carry ``case``, ``region``, ``dice`` and ``hausdorff_mm``
    (``None`` when undefined, written as ``undefined``).
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "region", "dice", "hausdorff_mm"])
    for r in rows:
        hd = "undefined" if r["hausdorff_mm"] is None else f"{r['hausdorff_mm']:.4f}"
        w.writerow([r["case"], r["region"], f"{r['dice']:.4f}", hd])
    w.writerow([])
    w.writerow(["region", "metric", "mean", "std", "median", "q25", "q75", "n", "undefined"])
    for region in REGIONS:
        sub = [r for r in rows if r["region"] == region]
        if not sub:
            continue
        for metric in ("dice", "hausdorff_mm"):
            vals = [r[metric] for r in sub]
            if all(v is None for v in vals):
                w.writerow([region, metric, "", "", "", "", "", 0, len(vals)])
                continue
            s = summarize(vals)
            w.writerow([region, metric] + [f"{getattr(s, k):.4f}" for k in
                                           ("mean", "std", "median", "q25", "q75")]
                       + [s.count, s.undefined])
    return buf.getvalue()
