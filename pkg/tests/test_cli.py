import numpy as np
import pytest
from PIL import Image

from cascadeseg.cascade import STAGES, VIEWS, binarize_region
from cascadeseg.cli import main, render_overlay
from cascadeseg.netbuilder import build_network, canonical_config
from cascadeseg.trainer import Checkpoint, save_checkpoint
from cascadeseg.volio import LabelMap, NormStats, read_volume
from cascadeseg.workflow import (Manifest, ManifestError, load_manifest, manifest_from_text,
                                 manifest_to_text)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cases(tmp_path_factory):
    root = tmp_path_factory.mktemp("cases")
    cfg = root / "phantom.txt"
    cfg.write_text("extents = 24,24,12\n")
    assert main(["phantom-gen", "--config", str(cfg), "--out", str(root / "data"),
                 "--count", "3", "--seed", "40"]) == 0
    return root / "data"


def _model_set(root, norm=True):
    models = {}
    for s in STAGES:
        for v in VIEWS:
            net = build_network(canonical_config(s, 4), seed=STAGES.index(s) * 3 + VIEWS.index(v))
            stats = NormStats((0.5,) * 4, (0.25,) * 4) if norm else None
            path = root / f"{s}_{v}.ackp"
            save_checkpoint(Checkpoint.from_network(net, norm_stats=stats), path)
            models[(s, v)] = path
    manifest = root / "manifest.txt"
    manifest.write_text(manifest_to_text(Manifest(models), root))
    return manifest


# -------------------------------------------------------------- phantom-gen

def test_phantom_gen_is_reproducible(cases, tmp_path, capsys):
    cfg = tmp_path / "p.txt"
    cfg.write_text("extents = 24,24,12\n")
    assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "again"),
                 "--count", "3", "--seed", "40"]) == 0
    assert "seeds: 40,41,42" in capsys.readouterr().out
    assert _tree_bytes(tmp_path / "again") == _tree_bytes(cases)
    for case in sorted((tmp_path / "again").iterdir()):
        lab = read_volume(case / "labels.avol").labels
        en, tc, wt = (binarize_region(lab, r) for r in ("EN", "TC", "WT"))
        assert not (en & ~tc).any() and not (tc & ~wt).any()


def test_phantom_gen_rejects_bad_input(tmp_path, capsys):
    assert main(["phantom-gen", "--out", str(tmp_path), "--count", "0"]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("wt_fraction = 0.3,0.1\n")
    assert main(["phantom-gen", "--config", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "count" in err and "wt_fraction" in err


# ---------------------------------------------------------------- evaluate

def test_evaluate_identity(cases, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    for case in sorted(cases.iterdir()):
        (pred / f"{case.name}.avol").write_bytes((case / "labels.avol").read_bytes())
    csv = tmp_path / "eval.csv"
    assert main(["evaluate", "--pred", str(pred), "--data", str(cases), "--out", str(csv)]) == 0
    rows = [ln.split(",") for ln in csv.read_text().splitlines()[1:] if ln.startswith("case_")]
    assert len(rows) == 9
    assert all(float(r[2]) == 1.0 and float(r[3]) == 0.0 for r in rows)
    assert "Mean" in capsys.readouterr().out


def test_evaluate_missing_prediction(cases, tmp_path, capsys):
    assert main(["evaluate", "--pred", str(tmp_path), "--data", str(cases)]) == 1
    assert "no prediction" in capsys.readouterr().err


# ---------------------------------------------------------------------- rf

def test_rf_out_of_plane_nine(capsys):
    assert main(["rf"]) == 0
    lines = capsys.readouterr().out.splitlines()[1:]
    assert [ln.split()[0] for ln in lines] == ["wnet", "tnet", "enet"]
    assert all(ln.split()[1].endswith("x9") for ln in lines)
    assert lines[2].split()[1] == "122x122x9"


# ---------------------------------------------------------------- render

def test_overlay_colors():
    image = np.linspace(0, 1, 12).reshape(3, 4)
    plain = render_overlay(image, np.zeros((3, 4), np.uint8))
    assert np.array_equal(plain[..., 0], plain[..., 1]) and np.array_equal(plain[..., 1], plain[..., 2])
    labels = np.zeros((3, 4), np.uint8)
    labels[1, 2], labels[0, 0], labels[2, 3] = 4, 2, 1
    rgb = render_overlay(np.zeros((3, 4)), labels).astype(int)
    assert rgb[1, 2].tolist() == [128, 128, 0]  # yellow tint
    assert rgb[0, 0].tolist() == [0, 128, 0]
    assert rgb[2, 3].tolist() == [128, 0, 0]


def test_render_png(cases, tmp_path, capsys):
    case = sorted(cases.iterdir())[0]
    lab = read_volume(case / "labels.avol")
    z = int(np.argwhere(lab.labels == 4)[0][2]) if (lab.labels == 4).any() else 6
    args = ["render", "--data", str(case), "--pred", str(case / "labels.avol"),
            "--slice", str(z), "--out"]
    assert main(args + [str(tmp_path / "a.png")]) == 0
    assert main(args + [str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    img = Image.open(tmp_path / "a.png")
    assert img.mode == "RGB" and img.size == (24, 24)
    assert main(["render", "--data", str(case), "--pred", str(case / "labels.avol"),
                 "--slice", "12", "--out", str(tmp_path / "c.png")]) == 1
    assert "outside" in capsys.readouterr().err


# ----------------------------------------------------------------- infer

def test_infer_refuses_unnormalized_models(cases, tmp_path, capsys):
    manifest = _model_set(tmp_path, norm=False)
    case = sorted(cases.iterdir())[0]
    out = tmp_path / "labels.avol"
    assert main(["infer", "--config", str(manifest), "--data", str(case), "--out", str(out)]) == 1
    assert "unnormalized" in capsys.readouterr().err
    assert main(["infer", "--config", str(manifest), "--data", str(case), "--out", str(out),
                 "--allow-unnormalized"]) == 0
    assert isinstance(read_volume(out), LabelMap)


def test_infer_directory_and_view_subset(cases, tmp_path):
    manifest = _model_set(tmp_path)
    out = tmp_path / "pred"
    assert main(["infer", "--config", str(manifest), "--data", str(cases), "--out", str(out),
                 "--views", "axial"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["case_000.avol", "case_001.avol",
                                                     "case_002.avol"]
    first = _tree_bytes(out)
    assert main(["infer", "--config", str(manifest), "--data", str(cases), "--out", str(out),
                 "--views", "axial"]) == 0
    assert _tree_bytes(out) == first
    assert main(["infer", "--config", str(manifest), "--data", str(cases), "--out", str(out),
                 "--views", "oblique"]) == 1


def test_corrupted_inputs_exit_nonzero(cases, tmp_path, capsys):
    manifest = _model_set(tmp_path)
    ckpt = tmp_path / "enet_axial.ackp"
    ckpt.write_bytes(b"XXXX" + ckpt.read_bytes()[4:])
    case = sorted(cases.iterdir())[0]
    assert main(["infer", "--config", str(manifest), "--data", str(case),
                 "--out", str(tmp_path / "l.avol")]) == 1
    assert "magic" in capsys.readouterr().err
    label = tmp_path / "short.avol"
    label.write_bytes((case / "labels.avol").read_bytes()[:-10])
    assert main(["render", "--data", str(case), "--pred", str(label), "--slice", "0",
                 "--out", str(tmp_path / "x.png")]) == 1
    assert "payload length" in capsys.readouterr().err


# -------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    path = _model_set(tmp_path)
    m = load_manifest(path)
    assert m.models[("tnet", "coronal")] == tmp_path / "tnet_coronal.ackp"
    m.weights["wnet"] = {"axial": 0.5, "sagittal": 0.25, "coronal": 0.25}
    m.params.threshold = 0.4
    back = manifest_from_text(manifest_to_text(m, tmp_path), tmp_path)
    assert back.models == m.models and back.weights == m.weights
    assert back.params == m.params


def test_manifest_validation(tmp_path):
    text = _model_set(tmp_path).read_text()
    with pytest.raises(ManifestError, match="enet.coronal"):
        manifest_from_text("\n".join(ln for ln in text.splitlines()
                                     if not ln.startswith("model.enet.coronal")))
    with pytest.raises(ManifestError, match="sum to 1"):
        manifest_from_text(text.replace("weights.tnet =", "weights.tnet = 0.5,0.5,0.5\n#"))
    with pytest.raises(ManifestError, match="unknown"):
        manifest_from_text(text + "stride = 3\n")
