"""Finite-difference gradient cases, one per differentiable operation."""
from __future__ import annotations

import numpy as np

from cascadeseg import layers as L
from cascadeseg.metrics import dice_loss
from cascadeseg.netbuilder import build_network, canonical_config
from cascadeseg.tensor import Tensor, backward, no_grad, total

from oracles import gradcheck

TOL = 1e-4


def _spaced(rng, shape, gap=0.02):
    """Random values with pairwise gaps, so max/kink decisions are stable under h."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0.25, 0.75) * gap
    return vals.reshape(shape)


def _conv_case(extent, d):
    def run(rng):
        spec = L.KernelSpec(extent, tuple(d if k > 1 else 1 for k in extent))
        x = rng.standard_normal((2, 2, 7, 6, 5))
        w = rng.standard_normal((3, 2) + extent)
        b = rng.standard_normal(3)
        return gradcheck(lambda xt, wt, bt: L.conv_aniso(xt, wt, bt, spec), [x, w, b], rng)
    return run


def _bn_case(mode):
    def run(rng):
        x = rng.standard_normal((2, 3, 4, 5, 3)) * 2 + 1
        g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)

        def f(xt, gt, bt):
            st = L.BatchNormState(rm.copy(), rv.copy())
            return L.batch_norm(xt, gt, bt, st, mode)
        return gradcheck(f, [x, g, b], rng)
    return run


def _bn_prelu_case(mode):
    def run(rng):
        x = rng.standard_normal((2, 3, 4, 5, 3)) * 2 + 1
        g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3) * 0.1
        a = rng.uniform(0.1, 0.4, 3)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2, 3)

        def f(xt, gt, bt, at):
            st = L.BatchNormState(rm.copy(), rv.copy())
            return L.bn_prelu(xt, gt, bt, at, st, mode)
        return gradcheck(f, [x, g, b, a], rng)
    return run


def _prelu(rng):
    x = _spaced(rng, (2, 3, 4, 4, 2), gap=0.05)
    a = rng.uniform(0.1, 0.4, 3)
    return gradcheck(L.prelu, [x, a], rng)


def _pool(shape):
    def run(rng):
        return gradcheck(L.downsample2d, [_spaced(rng, shape)], rng)
    return run


def _upsample(factor):
    def run(rng):
        return gradcheck(lambda t: L.upsample2d(t, factor), [rng.standard_normal((1, 2, 3, 4, 2))],
                         rng)
    return run


def _softmax(rng):
    return gradcheck(L.softmax_channels, [rng.standard_normal((2, 3, 3, 4, 2))], rng)


def _dice_on_softmax(rng):
    logits = rng.standard_normal((2, 2, 4, 4, 3))
    target = rng.random((2, 4, 4, 3)) < 0.4
    return gradcheck(lambda t: dice_loss(L.softmax_channels(t), target), [logits], rng)


def _dice_direct(rng):
    p1 = rng.uniform(0.1, 0.9, (2, 4, 4, 3))
    prob = np.stack([1 - p1, p1], axis=1)
    target = rng.random((2, 4, 4, 3)) < 0.4
    return gradcheck(lambda t: dice_loss(t, target), [prob], rng)


def _residual(rng):
    a, b = rng.standard_normal((2, 2, 3, 3, 2, 2))
    return gradcheck(L.add_residual, [a, b], rng)


def _concat(rng):
    a = rng.standard_normal((1, 2, 3, 3, 2))
    b = rng.standard_normal((1, 3, 3, 3, 2))
    return gradcheck(lambda s, t: L.concat_channels([s, t]), [a, b], rng)


def _padding_ops(rng):
    x = rng.standard_normal((1, 2, 3, 5, 2))
    return gradcheck(lambda t: L.crop_inplane(L.pad_inplane(L.pad_channels(t, 4), 1, 2), 3, 6),
                     [x], rng)


def _arithmetic(rng):
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.standard_normal((3, 4))
    return gradcheck(lambda s, t: (s * t - t / s + s ** 1.5) * 0.5, [a, b], rng)


def _enet_forward(rng):
    """ENet (C_o = 4) on an 8x8x5 patch in train mode: input and parameter gradients."""
    net = build_network(canonical_config("enet", 4), seed=3, dtype=np.float64)
    x = rng.standard_normal((2, 4, 8, 8, 5))
    target = rng.random((2, 8, 8, 5)) < 0.3

    def loss_of(xt):
        return dice_loss(L.softmax_channels(net.forward(xt, mode="train")), target)

    worst = gradcheck(loss_of, [x], rng, max_coords=30)
    # parameters: perturb in place, sampled coordinates per tensor
    for p in net.params.values():
        p.zero_grad()
    backward(loss_of(Tensor(x)))
    h = 1e-4
    names = list(net.params)
    picks = rng.choice(len(names), 12, replace=False)
    for n in picks:
        p = net.params[names[n]]
        idx = rng.choice(p.data.size, min(4, p.data.size), replace=False)
        num = []
        for i in idx:
            old = p.data.flat[i]
            with no_grad():
                p.data.flat[i] = old + h
                up = float(loss_of(Tensor(x)).data)
                p.data.flat[i] = old - h
                down = float(loss_of(Tensor(x)).data)
            p.data.flat[i] = old
            num.append((up - down) / (2 * h))
        num = np.array(num)
        ana = p.grad.ravel()[idx]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst


CASES = {
    **{f"conv_3x3x1_d{d}": _conv_case((3, 3, 1), d) for d in (1, 2, 3)},
    **{f"conv_1x1x3_d{d}": _conv_case((1, 1, 3), d) for d in (1, 2, 3)},
    "batch_norm_train": _bn_case("train"),
    "batch_norm_infer": _bn_case("infer"),
    "bn_prelu_train": _bn_prelu_case("train"),
    "bn_prelu_infer": _bn_prelu_case("infer"),
    "prelu": _prelu,
    "pool_even": _pool((1, 2, 4, 6, 2)),
    "pool_odd": _pool((1, 2, 5, 3, 2)),
    "upsample_x2": _upsample(2),
    "upsample_x4": _upsample(4),
    "softmax": _softmax,
    "dice_loss_softmax": _dice_on_softmax,
    "dice_loss_prob": _dice_direct,
    "add_residual": _residual,
    "concat": _concat,
    "pad_crop": _padding_ops,
    "arithmetic": _arithmetic,
    "enet_forward": _enet_forward,
}


def run_case(name: str, seed: int = 0) -> float:
    return CASES[name](np.random.default_rng(seed))
