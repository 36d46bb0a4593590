"""Adam training loop with Dice loss and the binary checkpoint format.

Checkpoint layout (little-endian)::

    8 bytes  magic "ACKP0001"
    4 bytes  u32 header length
    N bytes  UTF-8 JSON header (sorted keys): version, network config text,
             normalization statistics, seed, iteration, tensor directory
             (name, dtype, shape, offset, nbytes)
    payload  raw f32 tensors in directory order
"""
from __future__ import annotations

import json
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .cascade import (STAGE_REGION, STAGES, VIEWS, bbox_of_mask, binarize_region, crop,
                      view_transform)
from .kvfile import format_kv, int_tuple, parse_kv
from .metrics import dice_loss
from .netbuilder import Network, build_network, canonical_config, config_from_text, config_to_text
from .tensor import Tensor, backward
from .volio import LabelMap, NormStats, VolumeSet, normalize, pad_to_at_least, patch_origin

CKPT_MAGIC = b"ACKP0001"
CKPT_VERSION = 1

PAPER_PATCHES = {"wnet": (144, 144, 19), "tnet": (96, 96, 19), "enet": (64, 64, 19)}
DESK_PATCHES = {"wnet": (48, 48, 11), "tnet": (32, 32, 11), "enet": (24, 24, 11)}
# the region whose ground-truth box defines each stage's training input
PARENT_REGION = {"wnet": None, "tnet": "WT", "enet": "TC"}


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, reason: str):
        super().__init__(f"training diverged at iteration {iteration}: {reason}")
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "wnet"
    view: str = "axial"
    lr: float = 1e-3
    weight_decay: float = 1e-7
    batch_size: int = 5
    iterations: int = 30000
    base_channels: int = 32
    patch: tuple[int, int, int] | None = None  # None: the stage's paper patch
    margin: tuple[int, int, int] = (5, 5, 3)
    p_foreground: float = 0.5
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.patch is None:
            self.patch = PAPER_PATCHES.get(self.stage, (64, 64, 19))
        self.patch = tuple(int(p) for p in self.patch)
        self.margin = tuple(int(m) for m in self.margin)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        for name in ("lr", "batch_size", "iterations", "base_channels", "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")
        if not 0 <= self.p_foreground <= 1:
            raise ValueError(f"p_foreground must lie in [0, 1], got {self.p_foreground}")


def desk_config(stage: str, view: str, seed: int = 0, **overrides) -> TrainConfig:
    """Desk-scale profile: C_o 8, 2000 iterations, batch 5, reduced patches."""
    cfg = TrainConfig(stage=stage, view=view, iterations=2000, base_channels=8,
                      patch=DESK_PATCHES[stage], seed=seed)
    return replace(cfg, **overrides)


_INT_KEYS = ("batch_size", "iterations", "base_channels", "seed", "log_every")
_FLOAT_KEYS = ("lr", "weight_decay", "p_foreground")


def train_config_from_text(text: str) -> TrainConfig:
    kv = parse_kv(text)
    base = {}
    profile = kv.pop("profile", "paper")
    for key, value in kv.items():
        if key in ("stage", "view"):
            base[key] = value
        elif key in _INT_KEYS:
            base[key] = int(value)
        elif key in _FLOAT_KEYS:
            base[key] = float(value)
        elif key in ("patch", "margin"):
            base[key] = int_tuple(value)
        else:
            raise ValueError(f"unknown training option {key!r}")
    if profile == "desk":
        cfg = desk_config(base.pop("stage", "wnet"), base.pop("view", "axial"))
        cfg = replace(cfg, **base)
    elif profile == "paper":
        cfg = TrainConfig(**base)
    else:
        raise ValueError(f"profile must be 'paper' or 'desk', got {profile!r}")
    cfg.validate()
    return cfg


def train_config_to_text(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    out = []
    for k, v in d.items():
        out.append((k, ",".join(map(str, v)) if isinstance(v, (tuple, list)) else v))
    return format_kv(out)


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> bool:
    """One Adam update in place. ``params``/``grads`` map names to arrays.

    Weight decay enters as an L2 term added to the gradient. Returns False,
    leaving parameters and state untouched, if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {np.shape(params[name])}")
        if not np.isfinite(g).all():
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        w = params[name]
        if weight_decay:
            g = g + weight_decay * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        w -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return True


# ------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: object  # NetworkConfig
    tensors: "OrderedDict[str, np.ndarray]"
    norm_stats: NormStats | None = None
    seed: int = 0
    iteration: int = 0
    stage: str = ""
    view: str = ""
    optimizer: AdamState | None = None

    @property
    def unnormalized(self) -> bool:
        return self.norm_stats is None

    def network(self, dtype=np.float32) -> Network:
        net = build_network(self.config, seed=0, dtype=dtype)
        net.load_state_arrays(self.tensors)
        return net

    @classmethod
    def from_network(cls, net: Network, **kw) -> "Checkpoint":
        arrays = OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in
                             net.state_arrays().items())
        return cls(net.config, arrays, **kw)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = list(ckpt.tensors.items())
    if ckpt.optimizer is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in ckpt.optimizer.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in ckpt.optimizer.v.items()]
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in checkpoint")
    directory, blobs, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "dtype": "f32", "shape": list(np.shape(arr)),
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CKPT_VERSION,
        "network": config_to_text(ckpt.config),
        "norm_stats": None if ckpt.norm_stats is None else
        {"mean": list(ckpt.norm_stats.mean), "std": list(ckpt.norm_stats.std)},
        "seed": int(ckpt.seed),
        "iteration": int(ckpt.iteration),
        "stage": ckpt.stage,
        "view": ckpt.view,
        "optimizer": None if ckpt.optimizer is None else
        {"step": ckpt.optimizer.step, "beta1": ckpt.optimizer.beta1,
         "beta2": ckpt.optimizer.beta2, "eps": ckpt.optimizer.eps},
        "tensor_count": len(directory),
        "tensors": directory,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{source}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{source}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{source}: unknown checkpoint version {header.get('version')!r}")
    directory = header["tensors"]
    if header.get("tensor_count") != len(directory):
        raise CheckpointError(f"{source}: tensor count mismatch: header says "
                              f"{header.get('tensor_count')}, directory lists {len(directory)}")
    payload = raw[12 + hlen:]
    expected = sum(d["nbytes"] for d in directory)
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload length mismatch: expected {expected} bytes, "
                              f"got {len(payload)}")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for d in directory:
        if d["dtype"] != "f32":
            raise CheckpointError(f"{source}: unsupported tensor dtype {d['dtype']!r}")
        n = int(np.prod(d["shape"], dtype=np.int64))
        if n * 4 != d["nbytes"]:
            raise CheckpointError(f"{source}: tensor {d['name']} size disagrees with its shape")
        tensors[d["name"]] = np.frombuffer(payload, dtype="<f4", count=n,
                                           offset=d["offset"]).reshape(d["shape"]).astype(np.float32)
    optimizer = None
    if header.get("optimizer") is not None:
        o = header["optimizer"]
        optimizer = AdamState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for name in list(tensors):
            for prefix, store in (("adam.m.", optimizer.m), ("adam.v.", optimizer.v)):
                if name.startswith(prefix):
                    store[name[len(prefix):]] = tensors.pop(name)
    ns = header.get("norm_stats")
    norm_stats = None if ns is None else NormStats(tuple(ns["mean"]), tuple(ns["std"]))
    config = config_from_text(header["network"])
    ckpt = Checkpoint(config, tensors, norm_stats, header.get("seed", 0),
                      header.get("iteration", 0), header.get("stage", ""),
                      header.get("view", ""), optimizer)
    expected_names = set(build_network(config).state_arrays())
    if set(tensors) != expected_names:
        missing = sorted(expected_names - set(tensors))
        extra = sorted(set(tensors) - expected_names)
        raise CheckpointError(f"{source}: tensor set does not match the network "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


# --------------------------------------------------------------- training

@dataclass
class _Case:
    image: np.ndarray  # (C, X, Y, Z) in view layout, padded to the patch
    mask: np.ndarray  # (X, Y, Z) stage target
    positives: np.ndarray  # (N, 3) region-positive voxels


def prepare_cases(cfg: TrainConfig, cases, norm_stats: NormStats | None) -> list[_Case]:
    """Normalize, crop to the parent region's ground-truth box, move to the view."""
    region = STAGE_REGION[cfg.stage]
    parent = PARENT_REGION[cfg.stage]
    out = []
    for volume, labels in cases:
        data = normalize(volume, norm_stats).data if norm_stats is not None else volume.data
        lab = labels.labels
        if parent is not None:
            box = bbox_of_mask(binarize_region(lab, parent), cfg.margin)
            if box.is_empty:
                continue
            data, lab = crop(data, box), crop(lab, box)
        image = view_transform(data, cfg.view)
        mask = view_transform(binarize_region(lab, region), cfg.view)
        positives = np.argwhere(mask)
        image = pad_to_at_least(image, cfg.patch)
        mask = pad_to_at_least(mask, cfg.patch)
        out.append(_Case(np.ascontiguousarray(image, dtype=np.float32), mask, positives))
    if not out:
        raise ValueError(f"{cfg.stage}: no training case contains the {parent} region")
    return out


def _draw_batch(cases: list[_Case], cfg: TrainConfig, rng: np.random.Generator):
    images, targets = [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        if len(case.positives) and rng.random() < cfg.p_foreground:
            center = case.positives[int(rng.integers(len(case.positives)))]
        else:
            center = [int(rng.integers(n)) for n in case.mask.shape]
        o = patch_origin(center, cfg.patch, case.mask.shape)
        sl = tuple(slice(a, a + p) for a, p in zip(o, cfg.patch))
        images.append(case.image[(slice(None),) + sl])
        targets.append(case.mask[sl])
    return np.stack(images), np.stack(targets)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list  # (iteration, loss, wall_ms)

    def loss_csv(self) -> str:
        return "iteration,loss,wall_ms\n" + "".join(
            f"{i},{loss:.6f},{ms:.1f}\n" for i, loss, ms in self.losses)


def train(cfg: TrainConfig, cases, norm_stats: NormStats | None,
          network: Network | None = None, progress=None) -> TrainResult:
    """Train one (stage, view) network on ``cases`` = [(VolumeSet, LabelMap), ...]."""
    cfg.validate()
    if not cases:
        raise ValueError("training set is empty")
    data = prepare_cases(cfg, cases, norm_stats)
    if network is None:
        network = build_network(canonical_config(cfg.stage, cfg.base_channels), seed=cfg.seed)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed + 1))
    params = {k: p.data for k, p in network.params.items()}
    state = AdamState()
    losses = []
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        images, targets = _draw_batch(data, cfg, rng)
        try:
            prob = L.softmax_channels(network.forward(Tensor(images), mode="train"))
            loss = dice_loss(prob, targets)
        except FloatingPointError as exc:
            raise TrainingDiverged(it, str(exc)) from None
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(it, f"loss is {value}")
        for p in network.params.values():
            p.zero_grad()
        backward(loss)
        grads = {k: p.grad for k, p in network.params.items()}
        if not adam_step(params, grads, state, cfg.lr, cfg.weight_decay):
            raise TrainingDiverged(it, "non-finite gradient")
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iterations:
            losses.append((it, value, 1000.0 * (time.perf_counter() - start)))
            if progress is not None:
                progress(it, value)
    ckpt = Checkpoint.from_network(network, norm_stats=norm_stats, seed=cfg.seed,
                                   iteration=cfg.iterations, stage=cfg.stage, view=cfg.view)
    return TrainResult(ckpt, losses)
