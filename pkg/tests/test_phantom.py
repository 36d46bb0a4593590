import numpy as np
import pytest

from cascadeseg.cascade import binarize_region
from cascadeseg.phantom import (PhantomError, PhantomParams, params_from_text, params_to_text,
                                phantom_generate)
from cascadeseg.volio import MODALITIES


def test_same_seed_same_bytes():
    a = phantom_generate(PhantomParams(extents=(24, 24, 16), seed=3))
    b = phantom_generate(PhantomParams(extents=(24, 24, 16), seed=3))
    c = phantom_generate(PhantomParams(extents=(24, 24, 16), seed=4))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_regions_nest_and_background_is_zero():
    for seed in range(5):
        vol, lab = phantom_generate(PhantomParams(extents=(32, 32, 24), seed=seed))
        wt, tc, en = (binarize_region(lab.labels, r) for r in ("WT", "TC", "EN"))
        assert not (en & ~tc).any() and not (tc & ~wt).any()
        assert tc.any()
        brain = vol.data[0] != 0
        assert not (wt & ~brain).any()
        assert np.all(vol.data[:, ~brain] == 0) and np.all(vol.data[:, brain] > 0)


def test_whole_tumor_fraction_over_many_seeds():
    fractions = []
    for seed in range(100):
        _, lab = phantom_generate(PhantomParams(extents=(32, 32, 24), seed=seed))
        fractions.append(binarize_region(lab.labels, "WT").mean())
    assert 0.01 <= min(fractions) and max(fractions) <= 0.10


def test_contrast_table_drives_tissue_means():
    p = PhantomParams(extents=(48, 48, 32), seed=11, noise_std=0.0, texture_std=0.0,
                      bias_strength=0.0)
    vol, lab = phantom_generate(p)
    brain = vol.data[0] != 0
    tissue = {"healthy": brain & (lab.labels == 0), "edema": lab.labels == 2,
              "core": lab.labels == 1, "enhancing": lab.labels == 4}
    for c, m in enumerate(MODALITIES):
        for t, want in zip(tissue.values(), p.contrast[m]):
            if t.any():
                np.testing.assert_allclose(vol.data[c][t], want, rtol=1e-6)
    t1c = MODALITIES.index("t1c")
    flair = MODALITIES.index("flair")
    assert vol.data[t1c][tissue["enhancing"]].mean() > vol.data[t1c][tissue["core"]].mean()
    assert vol.data[flair][tissue["edema"]].mean() > vol.data[flair][tissue["healthy"]].mean()


@pytest.mark.parametrize("change,rule", [
    (dict(extents=(4, 32, 32)), "extents"),
    (dict(wt_fraction=(0.2, 0.1)), "wt_fraction"),
    (dict(tc_ratio=(0.5, 1.2)), "tc_ratio"),
    (dict(en_ratio=(0.0, 0.5)), "en_ratio"),
    (dict(noise_std=-1.0), "non-negative"),
    (dict(bias_strength=1.5), "bias_strength"),
    (dict(contrast={"t1": (1, 1, 1, 1)}), "contrast"),
])
def test_invalid_parameters_rejected(change, rule):
    p = PhantomParams(**change)
    with pytest.raises(PhantomError, match=rule):
        phantom_generate(p)


def test_parameter_text_round_trip():
    p = PhantomParams(extents=(40, 36, 20), noise_std=0.05, seed=7)
    p.contrast["t2"] = (1.0, 1.5, 1.25, 1.125)
    back = params_from_text(params_to_text(p))
    assert back == p
    with pytest.raises(PhantomError, match="unknown"):
        params_from_text("colour = blue\n")
