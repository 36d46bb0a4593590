"""Model sets: training all nine (stage, view) networks, manifests, evaluation."""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cascade import STAGES, VIEWS, CascadeModels, CascadeParams, binarize_region
from .kvfile import float_tuple, format_kv, int_tuple, parse_kv
from .metrics import REGIONS, dice_score, evaluation_csv, hausdorff, summarize
from .trainer import desk_config, load_checkpoint, save_checkpoint, train
from .volio import compute_norm_stats, list_cases, read_case


class ManifestError(ValueError):
    pass


@dataclass
class Manifest:
    """Nine checkpoint paths, fusion weights and cascade parameters."""

    models: dict  # (stage, view) -> path
    weights: dict = field(default_factory=lambda: {s: {v: 1.0 / 3 for v in VIEWS}
                                                   for s in STAGES})
    params: CascadeParams = field(default_factory=CascadeParams)

    def validate(self) -> None:
        missing = [f"{s}.{v}" for s in STAGES for v in VIEWS if (s, v) not in self.models]
        if missing:
            raise ManifestError(f"manifest lacks models for {', '.join(missing)}")
        for s in STAGES:
            w = np.array([self.weights[s][v] for v in VIEWS])
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
                raise ManifestError(f"weights.{s} must be >= 0 and sum to 1, got {w.tolist()}")


def manifest_to_text(m: Manifest, base: Path | None = None) -> str:
    pairs = [("version", 1)]
    for s in STAGES:
        for v in VIEWS:
            p = Path(m.models[(s, v)])
            if base is not None:
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
            pairs.append((f"model.{s}.{v}", p.as_posix()))
    for s in STAGES:
        pairs.append((f"weights.{s}", ",".join(repr(float(m.weights[s][v])) for v in VIEWS)))
    pairs.append(("margin", ",".join(map(str, m.params.margin))))
    pairs.append(("overlap", ",".join(map(str, m.params.overlap))))
    for s in STAGES:
        pairs.append((f"window.{s}", ",".join(map(str, m.params.windows[s]))))
    pairs.append(("threshold", repr(float(m.params.threshold))))
    return format_kv(pairs)


def manifest_from_text(text: str, base: Path | None = None) -> Manifest:
    kv = parse_kv(text)
    if kv.pop("version", "1") != "1":
        raise ManifestError("unsupported manifest version")
    models, weights = {}, {s: {v: 1.0 / 3 for v in VIEWS} for s in STAGES}
    params = CascadeParams()
    for key, value in kv.items():
        parts = key.split(".")
        if parts[0] == "model" and len(parts) == 3 and parts[1] in STAGES and parts[2] in VIEWS:
            p = Path(value)
            models[(parts[1], parts[2])] = p if p.is_absolute() or base is None else base / p
        elif parts[0] == "weights" and len(parts) == 2 and parts[1] in STAGES:
            w = float_tuple(value)
            if len(w) != len(VIEWS):
                raise ManifestError(f"{key}: expected {len(VIEWS)} weights, got {len(w)}")
            weights[parts[1]] = dict(zip(VIEWS, w))
        elif parts[0] == "window" and len(parts) == 2 and parts[1] in STAGES:
            params.windows[parts[1]] = int_tuple(value)
        elif key == "margin":
            params.margin = int_tuple(value)
        elif key == "overlap":
            params.overlap = int_tuple(value)
        elif key == "threshold":
            params.threshold = float(value)
        else:
            raise ManifestError(f"unknown manifest key {key!r}")
    m = Manifest(models, weights, params)
    m.validate()
    return m


def load_manifest(path) -> Manifest:
    path = Path(path)
    return manifest_from_text(path.read_text(), path.parent)


def load_model_set(manifest: Manifest) -> CascadeModels:
    """Load all checkpoints; they must agree on normalization statistics."""
    manifest.validate()
    networks, stats = {}, []
    for key, path in manifest.models.items():
        ckpt = load_checkpoint(path)
        networks[key] = ckpt.network()
        stats.append(ckpt.norm_stats)
    norm = stats[0]
    if any(s != norm for s in stats[1:]):
        raise ManifestError("checkpoints in the model set disagree on normalization statistics")
    return CascadeModels(networks, manifest.weights, norm)


# ------------------------------------------------------------------ training

@dataclass
class JobResult:
    stage: str
    view: str
    path: str
    seconds: float
    final_loss: float


def _train_job(args) -> JobResult:
    cfg, case_dirs, out_path, threads = args
    with threadpool_limits(threads):
        cases = [read_case(d) for d in case_dirs]
        stats = compute_norm_stats([c[0] for c in cases])
        start = time.perf_counter()
        result = train(cfg, cases, stats)
        elapsed = time.perf_counter() - start
    save_checkpoint(result.checkpoint, out_path)
    Path(str(out_path) + ".loss.csv").write_text(result.loss_csv())
    return JobResult(cfg.stage, cfg.view, str(out_path), elapsed, result.losses[-1][1])


def job_seed(base_seed: int, stage: str, view: str) -> int:
    """Independent seed per (stage, view)."""
    return base_seed * 9 + STAGES.index(stage) * 3 + VIEWS.index(view)


def train_model_set(data_dir, out_dir, seed: int = 0, jobs: int = 1, threads: int = 1,
                    config_for=None, stages=STAGES, views=VIEWS, log=None) -> tuple[Path, list]:
    """Train every (stage, view) network on the cases in ``data_dir``.

    Jobs run in ``jobs`` worker processes, longest (WNet) first. Writes one
    checkpoint per network plus ``manifest.txt``; returns the manifest path
    and the per-job results.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case_dirs = [str(p) for p in list_cases(data_dir)]
    if not case_dirs:
        raise FileNotFoundError(f"no cases found in {data_dir}")
    config_for = config_for or (lambda s, v, sd: desk_config(s, v, seed=sd))
    work = []
    for s in stages:
        for v in views:
            cfg = config_for(s, v, job_seed(seed, s, v))
            work.append((cfg, case_dirs, out_dir / f"{s}_{v}.ackp", threads))
    results = []
    if jobs <= 1:
        for w in work:
            r = _train_job(w)
            results.append(r)
            if log:
                log(f"trained {r.stage}/{r.view} in {r.seconds:.1f}s, final loss {r.final_loss:.4f}")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for r in pool.map(_train_job, work):
                results.append(r)
                if log:
                    log(f"trained {r.stage}/{r.view} in {r.seconds:.1f}s, "
                        f"final loss {r.final_loss:.4f}")
    models = {(r.stage, r.view): Path(r.path) for r in results}
    manifest_path = out_dir / "manifest.txt"
    if len(models) == len(STAGES) * len(VIEWS):
        manifest_path.write_text(manifest_to_text(Manifest(models), out_dir))
    return manifest_path, results


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


# ---------------------------------------------------------------- evaluation

def evaluate_case(pred: np.ndarray, truth: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Dice and Hausdorff distance per region for one case."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    out = {}
    for region in REGIONS:
        a = binarize_region(pred, region)
        b = binarize_region(truth, region)
        out[region] = {"dice": dice_score(a, b), "hausdorff_mm": hausdorff(a, b, spacing)}
    return out


def evaluation_rows(per_case: dict) -> list[dict]:
    rows = []
    for case in sorted(per_case):
        for region in REGIONS:
            r = per_case[case][region]
            rows.append({"case": case, "region": region, "dice": r["dice"],
                         "hausdorff_mm": r["hausdorff_mm"]})
    return rows


def _summary_or_none(values):
    if all(v is None for v in values):
        return None
    return summarize(values)


def region_summaries(rows: list[dict]) -> dict:
    """ScoreSummary per region and metric; ``None`` when every value is undefined."""
    out = {}
    for region in REGIONS:
        sub = [r for r in rows if r["region"] == region]
        out[region] = {"dice": summarize([r["dice"] for r in sub]),
                       "hausdorff_mm": _summary_or_none([r["hausdorff_mm"] for r in sub])}
    return out


__all__ = ["Manifest", "ManifestError", "manifest_to_text", "manifest_from_text",
           "load_manifest", "load_model_set", "train_model_set", "job_seed", "evaluate_case",
           "evaluation_rows", "region_summaries", "evaluation_csv", "available_cpus"]
