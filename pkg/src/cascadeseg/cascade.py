"""Three-stage hierarchical cascade: region masks, bounding boxes, sliding-window
inference and multi-view fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import softmax_channels
from .tensor import Tensor, no_grad

STAGES = ("wnet", "tnet", "enet")
VIEWS = ("axial", "sagittal", "coronal")
STAGE_REGION = {"wnet": "WT", "tnet": "TC", "enet": "EN"}
_REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "EN": (4,)}
_REGION_ALIASES = {"ET": "EN"}
_VALID_LABELS = (0, 1, 2, 4)

# spatial permutation taking canonical (x, y, z) to the view's layout,
# with the view's out-of-plane axis last
_VIEW_PERM = {"axial": (0, 1, 2), "sagittal": (1, 2, 0), "coronal": (0, 2, 1)}


class CascadeError(ValueError):
    pass


def canonical_region(region: str) -> str:
    r = _REGION_ALIASES.get(region, region)
    if r not in _REGION_LABELS:
        raise CascadeError(f"unknown region {region!r}; expected one of WT, TC, EN")
    return r


def binarize_region(labels: np.ndarray, region: str) -> np.ndarray:
    """Boolean mask of ``region``: WT = {1,2,4}, TC = {1,4}, EN = {4}."""
    labels = np.asarray(labels)
    values = _REGION_LABELS[canonical_region(region)]
    present = np.unique(labels)
    bad = [int(v) for v in present if v not in _VALID_LABELS]
    if bad:
        raise CascadeError(f"label values {bad} are not in {_VALID_LABELS}")
    return np.isin(labels, values)


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel box; ``lo is None`` marks the empty box."""

    lo: tuple[int, int, int] | None
    hi: tuple[int, int, int] | None

    @classmethod
    def empty(cls) -> "BoundingBox":
        return cls(None, None)

    @classmethod
    def full(cls, extents) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(e) - 1 for e in extents))

    @property
    def is_empty(self) -> bool:
        return self.lo is None

    @property
    def shape(self) -> tuple[int, int, int]:
        if self.is_empty:
            return (0, 0, 0)
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        if self.is_empty:
            raise CascadeError("empty bounding box has no slices")
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def check_within(self, extents) -> None:
        if self.is_empty:
            raise CascadeError("cannot crop with an empty bounding box")
        for l, h, n in zip(self.lo, self.hi, extents):
            if l < 0 or h >= n or l > h:
                raise CascadeError(f"bounding box {self.lo}..{self.hi} exceeds extents "
                                   f"{tuple(extents)}")


def bbox_of_mask(mask: np.ndarray, margin=(0, 0, 0)) -> BoundingBox:
    """Tight box around the positives, grown by ``margin`` and clipped."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise CascadeError(f"bbox_of_mask expects a 3-D mask, got {mask.ndim}-D")
    if not mask.any():
        return BoundingBox.empty()
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        lo.append(max(int(hit[0]) - int(margin[axis]), 0))
        hi.append(min(int(hit[-1]) + int(margin[axis]), mask.shape[axis] - 1))
    return BoundingBox(tuple(lo), tuple(hi))


def crop(data: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Extract ``box`` from the trailing three (spatial) axes."""
    data = data.data if isinstance(data, Tensor) else np.asarray(data)
    box.check_within(data.shape[-3:])
    return data[(Ellipsis,) + box.slices()].copy()


def uncrop(data: np.ndarray, box: BoundingBox, full_extents, fill=0) -> np.ndarray:
    data = np.asarray(data)
    full_extents = tuple(int(e) for e in full_extents)
    box.check_within(full_extents)
    if data.shape[-3:] != box.shape:
        raise CascadeError(f"uncrop: data extents {data.shape[-3:]} differ from box {box.shape}")
    out = np.full(data.shape[:-3] + full_extents, fill, dtype=data.dtype)
    out[(Ellipsis,) + box.slices()] = data
    return out


def apply_crisp_mask(inner: np.ndarray, outer: np.ndarray) -> np.ndarray:
    inner = np.asarray(inner, dtype=bool)
    outer = np.asarray(outer, dtype=bool)
    if inner.shape != outer.shape:
        raise CascadeError(f"crisp mask shape {outer.shape} does not match {inner.shape}")
    return inner & outer


# ---------------------------------------------------------------- views

def view_permutation(view: str) -> tuple[int, int, int]:
    if view not in _VIEW_PERM:
        raise CascadeError(f"unknown view {view!r}; expected one of {VIEWS}")
    return _VIEW_PERM[view]


def view_transform(data: np.ndarray, view: str, direction: str = "to_view") -> np.ndarray:
    """Permute the trailing three axes into (``to_view``) or out of
    (``to_canonical``) the layout of ``view``. Returns a contiguous copy."""
    perm = view_permutation(view)
    if direction == "to_canonical":
        perm = tuple(int(i) for i in np.argsort(perm))
    elif direction != "to_view":
        raise CascadeError(f"direction must be 'to_view' or 'to_canonical', got {direction!r}")
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise CascadeError(f"view_transform expects 3-D or channel-3-D data, got {data.ndim}-D")
    lead = data.ndim - 3
    axes = tuple(range(lead)) + tuple(lead + p for p in perm)
    return np.ascontiguousarray(data.transpose(axes))


# ---------------------------------------------------------------- inference

def window_positions(n: int, window: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last window is snapped to the edge."""
    if stride < 1:
        raise CascadeError(f"stride must be >= 1, got {stride}")
    if window >= n:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_infer(net, volume: np.ndarray, window, stride) -> np.ndarray:
    """Average the network's softmax output over all windows covering each voxel.

    ``volume`` is (C, X, Y, Z); windows larger than the volume are clipped to it.
    Returns a float32 (2, X, Y, Z) probability map.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise CascadeError(f"sliding_window_infer expects (C, X, Y, Z), got {volume.shape}")
    extents = volume.shape[1:]
    window = tuple(min(int(w), n) for w, n in zip(window, extents))
    stride = tuple(int(s) for s in stride)
    if len(window) != 3 or len(stride) != 3:
        raise CascadeError("window and stride need three entries")
    for n, w, s in zip(extents, window, stride):
        if w < n and s > w:
            raise CascadeError(f"stride {stride} exceeds window {window}; voxels would be skipped")
    starts = [window_positions(n, w, s) for n, w, s in zip(extents, window, stride)]
    acc = None
    count = np.zeros(extents, dtype=np.float64)
    dtype = net.dtype
    with no_grad():
        for sx in starts[0]:
            for sy in starts[1]:
                for sz in starts[2]:
                    sl = (slice(sx, sx + window[0]), slice(sy, sy + window[1]),
                          slice(sz, sz + window[2]))
                    patch = np.ascontiguousarray(volume[(slice(None),) + sl][None], dtype=dtype)
                    prob = net.predict(Tensor(patch))[0]
                    if acc is None:
                        acc = np.zeros((prob.shape[0],) + extents, dtype=np.float64)
                    acc[(slice(None),) + sl] += prob
                    count[sl] += 1.0
    return (acc / count).astype(np.float32)


def multi_view_fuse(maps: dict, weights: dict) -> np.ndarray:
    """Weighted voxelwise average of canonical-orientation probability maps."""
    if set(maps) != set(weights):
        raise CascadeError(f"fusion views {sorted(maps)} do not match weights {sorted(weights)}")
    w = np.array([weights[v] for v in maps], dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise CascadeError(f"fusion weights must be >= 0 and sum to 1, got {w.tolist()}")
    shape = None
    out = None
    for (view, m), wv in zip(maps.items(), w):
        m = np.asarray(m)
        if shape is None:
            shape = m.shape
            out = np.zeros(shape, dtype=np.float64)
        elif m.shape != shape:
            raise CascadeError(f"view {view!r} map shape {m.shape} differs from {shape}")
        out += wv * m
    return out.astype(np.float32)


# ---------------------------------------------------------------- cascade

@dataclass
class CascadeParams:
    margin: tuple[int, int, int] = (5, 5, 3)
    overlap: tuple[int, int, int] = (16, 16, 8)
    windows: dict = field(default_factory=lambda: {
        "wnet": (48, 48, 11), "tnet": (32, 32, 11), "enet": (24, 24, 11)})
    threshold: float = 0.5

    def stride(self, stage: str) -> tuple[int, int, int]:
        return tuple(max(w - o, 1) for w, o in zip(self.windows[stage], self.overlap))


@dataclass
class CascadeModels:
    """Nine networks keyed by (stage, view) plus per-stage fusion weights."""

    networks: dict
    weights: dict = field(default_factory=lambda: {s: {v: 1.0 / 3 for v in VIEWS}
                                                   for s in STAGES})
    norm_stats: object = None

    def validate(self, views=VIEWS) -> None:
        missing = [(s, v) for s in STAGES for v in views if (s, v) not in self.networks]
        if missing:
            raise CascadeError(f"missing models for {missing}")
        for s in STAGES:
            w = np.array([self.weights[s][v] for v in VIEWS], dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
                raise CascadeError(f"{s}: fusion weights {w.tolist()} must be >= 0 and sum to 1")
            if sum(self.weights[s][v] for v in views) <= 0:
                raise CascadeError(f"{s}: the selected views {tuple(views)} all have zero weight")

    def view_weights(self, stage: str, views=VIEWS) -> dict:
        """Fusion weights of ``stage`` renormalized over the selected views."""
        total = sum(self.weights[stage][v] for v in views)
        return {v: self.weights[stage][v] / total for v in views}


@dataclass
class CascadeResult:
    labels: np.ndarray
    masks: dict
    probabilities: dict


def stage_probability(models: CascadeModels, stage: str, volume: np.ndarray,
                      params: CascadeParams, views=VIEWS) -> np.ndarray:
    """Fused foreground probability (X, Y, Z) of one stage on a canonical (C, X, Y, Z) input."""
    maps = {}
    for view in views:
        net = models.networks[(stage, view)]
        vin = view_transform(volume, view, "to_view")
        prob = sliding_window_infer(net, vin, params.windows[stage], params.stride(stage))
        maps[view] = view_transform(prob, view, "to_canonical")
    return multi_view_fuse(maps, models.view_weights(stage, views))[1]


def compose_labels(wt: np.ndarray, tc: np.ndarray, en: np.ndarray) -> np.ndarray:
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt & ~tc] = 2
    labels[tc & ~en] = 1
    labels[en] = 4
    return labels


def run_cascade(models: CascadeModels, volume: np.ndarray,
                params: CascadeParams | None = None, views=VIEWS) -> CascadeResult:
    """Segment a normalized (C, X, Y, Z) volume into labels {0, 1, 2, 4}.

    ``views`` restricts fusion to a subset (e.g. axial only); the subset's
    weights are rescaled to sum to 1.
    """
    params = params or CascadeParams()
    models.validate(views)
    volume = np.asarray(volume, dtype=np.float32)
    extents = volume.shape[1:]
    empty = np.zeros(extents, dtype=bool)
    masks = {"WT": empty, "TC": empty, "EN": empty}
    probs = {}

    p_wt = stage_probability(models, "wnet", volume, params, views)
    probs["WT"] = p_wt
    wt = p_wt >= params.threshold
    masks["WT"] = wt
    outer = wt
    for stage, region in (("tnet", "TC"), ("enet", "EN")):
        box = bbox_of_mask(outer, params.margin)
        if box.is_empty:
            break
        p = stage_probability(models, stage, crop(volume, box), params, views)
        p_full = uncrop(p, box, extents, fill=0.0)
        probs[region] = p_full
        inner = apply_crisp_mask(p_full >= params.threshold, outer)
        masks[region] = inner
        outer = inner
    return CascadeResult(compose_labels(masks["WT"], masks["TC"], masks["EN"]), masks, probs)


def segment_case(models: CascadeModels, volume, params: CascadeParams | None = None,
                 views=VIEWS, allow_unnormalized: bool = False) -> CascadeResult:
    """Normalize a raw VolumeSet with the models' statistics, then run the cascade."""
    from .volio import normalize

    if models.norm_stats is None:
        if not allow_unnormalized:
            raise CascadeError("models carry no normalization statistics; "
                               "pass allow_unnormalized to run on raw intensities")
        data = volume.data
    else:
        data = normalize(volume, models.norm_stats).data
    return run_cascade(models, data, params, views)
