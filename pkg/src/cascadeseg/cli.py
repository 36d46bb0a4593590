"""Command-line entry points: phantom-gen, train, infer, evaluate, rf, render."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import cascade, netbuilder, phantom, trainer, volio, workflow
from .kvfile import format_kv, parse_kv
from .metrics import evaluation_csv, format_summary_table

# overlay colors for labels 2 (edema), 1 (non-enhancing core), 4 (enhancing core)
LABEL_COLORS = {2: (0, 255, 0), 1: (255, 0, 0), 4: (255, 255, 0)}
OVERLAY_ALPHA = 0.5


class CliError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"cascadeseg: error: {msg}", file=sys.stderr)


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


# ----------------------------------------------------------------- commands

def cmd_phantom_gen(args) -> int:
    params = phantom.params_from_text(_read_text(args.config)) if args.config \
        else phantom.PhantomParams()
    if args.count < 1:
        raise CliError(f"--count must be >= 1, got {args.count}")
    base = params.seed if args.seed is None else args.seed
    out = Path(args.out)
    seeds = [base + i for i in range(args.count)]
    for i, seed in enumerate(seeds):
        params.seed = seed
        vol, lab = phantom.phantom_generate(params)
        volio.write_case(out / f"case_{i:03d}", vol, lab)
    print("seeds: " + ",".join(map(str, seeds)))
    return 0


def _train_overrides(text: str) -> dict:
    kv = parse_kv(text) if text else {}
    for key in ("stage", "view", "seed"):
        kv.pop(key, None)
    kv.setdefault("profile", "desk")
    return kv


def cmd_train(args) -> int:
    if args.all:
        overrides = _train_overrides(_read_text(args.config) if args.config else "")

        def config_for(stage, view, seed):
            pairs = list(overrides.items()) + [("stage", stage), ("view", view), ("seed", seed)]
            return trainer.train_config_from_text(format_kv(pairs))

        manifest, results = workflow.train_model_set(
            args.data, args.out, seed=args.seed or 0, jobs=args.jobs, threads=args.threads,
            config_for=config_for, log=lambda m: print(m, file=sys.stderr))
        print(f"manifest: {manifest}")
        return 0

    if not args.config:
        raise CliError("train needs --config (or --all)")
    cfg = trainer.train_config_from_text(_read_text(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    case_dirs = volio.list_cases(args.data)
    if not case_dirs:
        raise CliError(f"no cases found in {args.data}")
    cases = [volio.read_case(d) for d in case_dirs]
    stats = None if args.unnormalized else volio.compute_norm_stats([c[0] for c in cases])
    result = trainer.train(cfg, cases, stats,
                           progress=lambda it, loss: print(f"iter {it} loss {loss:.5f}",
                                                           file=sys.stderr))
    trainer.save_checkpoint(result.checkpoint, args.out)
    Path(str(args.out) + ".loss.csv").write_text(result.loss_csv())
    print(f"checkpoint: {args.out}")
    return 0


def _infer_one(models, params, case_dir: Path, out: Path, views, allow, probs_dir):
    vol, _ = volio.read_case(case_dir, with_labels=False)
    res = cascade.segment_case(models, vol, params, views, allow_unnormalized=allow)
    volio.write_volume(volio.LabelMap(res.labels, vol.spacing), out)
    if probs_dir is not None:
        probs_dir.mkdir(parents=True, exist_ok=True)
        for region, p in res.probabilities.items():
            volio.write_volume(volio.VolumeSet(p[None], vol.spacing), probs_dir / f"{region}.avol")


def cmd_infer(args) -> int:
    manifest = workflow.load_manifest(args.config)
    models = workflow.load_model_set(manifest)
    if models.norm_stats is None and not args.allow_unnormalized:
        raise CliError("checkpoints carry no normalization statistics (unnormalized); "
                       "pass --allow-unnormalized to run anyway")
    views = tuple(args.views.split(",")) if args.views else cascade.VIEWS
    for v in views:
        cascade.view_permutation(v)
    data, out = Path(args.data), Path(args.out)
    probs = Path(args.probs) if args.probs else None
    if (data / "t1.avol").exists():
        out.parent.mkdir(parents=True, exist_ok=True)
        _infer_one(models, manifest.params, data, out, views, args.allow_unnormalized, probs)
    else:
        cases = volio.list_cases(data)
        if not cases:
            raise CliError(f"{data} is neither a case directory nor a directory of cases")
        out.mkdir(parents=True, exist_ok=True)
        for c in cases:
            _infer_one(models, manifest.params, c, out / f"{c.name}.avol", views,
                       args.allow_unnormalized, probs / c.name if probs else None)
    return 0


def _prediction_path(pred_dir: Path, case: str) -> Path:
    for candidate in (pred_dir / f"{case}.avol", pred_dir / case / "labels.avol"):
        if candidate.exists():
            return candidate
    raise CliError(f"no prediction for case {case!r} in {pred_dir}")


def cmd_evaluate(args) -> int:
    truth_cases = volio.list_cases(args.data)
    if not truth_cases:
        raise CliError(f"no ground-truth cases in {args.data}")
    per_case = {}
    for c in truth_cases:
        truth = volio.read_volume(c / "labels.avol")
        pred = volio.read_volume(_prediction_path(Path(args.pred), c.name))
        if not isinstance(pred, volio.LabelMap):
            raise CliError(f"prediction for {c.name} is not a label map")
        per_case[c.name] = workflow.evaluate_case(pred.labels, truth.labels, truth.spacing)
    rows = workflow.evaluation_rows(per_case)
    text = evaluation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(format_summary_table(workflow.region_summaries(rows)))
    return 0


def cmd_rf(args) -> int:
    if args.config:
        configs = [netbuilder.config_from_text(_read_text(args.config))]
    else:
        configs = [netbuilder.canonical_config(n) for n in netbuilder.NETWORK_NAMES]
    print(f"{'network':<8}{'trunk (x,y,z)':>18}{'through head (x,y,z)':>26}")
    for cfg in configs:
        trunk = netbuilder.receptive_field(cfg)
        head = netbuilder.receptive_field(cfg, through_head=True)
        print(f"{cfg.name:<8}{'x'.join(map(str, trunk)):>18}{'x'.join(map(str, head)):>26}")
    return 0


def render_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """8-bit RGB overlay of a 2-D label slice on a 2-D grayscale slice."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    gray = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    rgb = np.repeat((gray * 255.0)[..., None], 3, axis=-1)
    for value, color in LABEL_COLORS.items():
        sel = labels == value
        rgb[sel] = (1 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * np.asarray(color, float)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def take_slice(arr: np.ndarray, axis: str, index: int) -> np.ndarray:
    a = "xyz".index(axis)
    n = arr.shape[a]
    if not 0 <= index < n:
        raise CliError(f"slice {index} is outside 0..{n - 1} along {axis}")
    return np.take(arr, index, axis=a)


def cmd_render(args) -> int:
    from PIL import Image

    data = Path(args.data)
    if data.is_dir():
        vol = volio.read_volume(data / f"{args.modality}.avol")
    else:
        vol = volio.read_volume(data)
    if not isinstance(vol, volio.VolumeSet):
        raise CliError(f"{data} does not hold an image volume")
    lab = volio.read_volume(args.pred)
    if not isinstance(lab, volio.LabelMap):
        raise CliError(f"{args.pred} is not a label map")
    image = vol.data[0]
    if image.shape != lab.labels.shape:
        raise CliError(f"label extents {lab.labels.shape} differ from volume {image.shape}")
    rgb = render_overlay(take_slice(image, args.axis, args.slice),
                         take_slice(lab.labels, args.axis, args.slice))
    Image.fromarray(rgb, mode="RGB").save(args.out, format="PNG")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadeseg", description=__doc__)
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads per process; 1 is the deterministic test mode")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", help="generate synthetic cases")
    s.add_argument("--config", help="phantom parameter file (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, help="base seed; case i uses seed + i")
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("train", help="train one network, or all nine with --all")
    s.add_argument("--config", help="training config (key = value)")
    s.add_argument("--data", required=True, help="directory of training cases")
    s.add_argument("--out", required=True, help="checkpoint path, or output dir with --all")
    s.add_argument("--seed", type=int)
    s.add_argument("--all", action="store_true", help="train every (stage, view) and a manifest")
    s.add_argument("--jobs", type=int, default=1, help="parallel training processes with --all")
    s.add_argument("--unnormalized", action="store_true",
                   help="skip intensity normalization (checkpoint is flagged)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment a case or a directory of cases")
    s.add_argument("--config", required=True, help="model-set manifest")
    s.add_argument("--data", required=True, help="case dir or directory of cases")
    s.add_argument("--out", required=True, help="labels .avol, or output dir for many cases")
    s.add_argument("--views", help="comma-separated subset of axial,sagittal,coronal")
    s.add_argument("--probs", help="also write per-region probability volumes here")
    s.add_argument("--allow-unnormalized", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="Dice and Hausdorff per case and region")
    s.add_argument("--pred", required=True, help="dir of <case>.avol or <case>/labels.avol")
    s.add_argument("--data", required=True, help="directory of ground-truth cases")
    s.add_argument("--out", help="CSV report path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rf", help="print per-axis receptive fields")
    s.add_argument("--config", help="network config; default: the three canonical networks")
    s.set_defaults(func=cmd_rf)

    s = sub.add_parser("render", help="PNG overlay of labels on one slice")
    s.add_argument("--data", required=True, help="case dir or single-volume .avol")
    s.add_argument("--pred", required=True, help="labels .avol")
    s.add_argument("--slice", type=int, required=True)
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--modality", choices=volio.MODALITIES, default="flair")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


_EXPECTED = (CliError, ValueError, OSError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _err("--threads must be >= 1")
        return 2
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except _EXPECTED as exc:
        _err(str(exc) or exc.__class__.__name__)
        return 1
    except trainer.TrainingDiverged as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
