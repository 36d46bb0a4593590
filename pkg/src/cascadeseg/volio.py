"""Volume container I/O, z-score normalization and training-patch sampling.

Container layout (all integers little-endian)::

    8 bytes   magic "AVOL0001"
    4 bytes   u32 header length in bytes
    N bytes   UTF-8 header, ``key=value`` lines:
              extents=X,Y,Z  channels=C  spacing=sx,sy,sz  dtype=f32|u8  axis_order=xyz
    payload   channel-major, then z-major (x varies fastest)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AVOL0001"
MODALITIES = ("t1", "t1c", "t2", "flair")
LABEL_VALUES = (0, 1, 2, 4)
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """A volume file does not conform to the container format."""


@dataclass
class VolumeSet:
    """Co-registered multi-modality volume, ``data`` shaped (C, X, Y, Z)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    axis_order: str = "xyz"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"VolumeSet data must be (C, X, Y, Z), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class LabelMap:
    """Integer labels (X, Y, Z): 0 background, 2 edema, 1 non-enhancing core, 4 enhancing core."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    axis_order: str = "xyz"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"LabelMap must be 3-D, got shape {self.labels.shape}")
        validate_labels(self.labels)
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def validate_labels(labels: np.ndarray) -> None:
    present = np.unique(labels)
    bad = sorted(set(present.tolist()) - set(LABEL_VALUES))
    if bad:
        raise VolumeFormatError(f"label values {bad} outside the allowed set {LABEL_VALUES}")


# ------------------------------------------------------------------ container

def encode_volume(obj: VolumeSet | LabelMap) -> bytes:
    if isinstance(obj, LabelMap):
        arr = obj.labels[None].astype(np.uint8)
        dtype = "u8"
    elif isinstance(obj, VolumeSet):
        arr = obj.data
        if not np.isfinite(arr).all():
            raise VolumeFormatError("refusing to write non-finite voxel values")
        dtype = "f32"
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    C, X, Y, Z = arr.shape
    sx, sy, sz = obj.spacing
    header = (f"extents={X},{Y},{Z}\nchannels={C}\nspacing={sx!r},{sy!r},{sz!r}\n"
              f"dtype={dtype}\naxis_order={obj.axis_order}\n").encode("utf-8")
    payload = np.ascontiguousarray(arr.transpose(0, 3, 2, 1), dtype=_DTYPES[dtype]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_volume(raw: bytes, source: str = "<bytes>") -> VolumeSet | LabelMap:
    if len(raw) < 12:
        raise VolumeFormatError(f"{source}: file too short ({len(raw)} bytes)")
    if raw[:8] != MAGIC:
        raise VolumeFormatError(f"{source}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise VolumeFormatError(f"{source}: header length {hlen} exceeds file size {len(raw)}")
    try:
        text = raw[12:12 + hlen].decode("utf-8")
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        extents = tuple(int(v) for v in kv["extents"].split(","))
        channels = int(kv["channels"])
        spacing = tuple(float(v) for v in kv["spacing"].split(","))
        dtype_tag = kv["dtype"]
        axis_order = kv.get("axis_order", "xyz")
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{source}: malformed header ({exc})") from exc
    if dtype_tag not in _DTYPES:
        raise VolumeFormatError(f"{source}: unsupported dtype {dtype_tag!r}")
    if len(extents) != 3 or any(e <= 0 for e in extents) or channels <= 0:
        raise VolumeFormatError(f"{source}: invalid extents {extents} / channels {channels}")
    dt = _DTYPES[dtype_tag]
    X, Y, Z = extents
    expected = channels * X * Y * Z * dt.itemsize
    actual = len(raw) - 12 - hlen
    if actual != expected:
        raise VolumeFormatError(f"{source}: payload length mismatch: expected {expected} bytes, "
                                f"got {actual}")
    arr = np.frombuffer(raw, dtype=dt, offset=12 + hlen).reshape(channels, Z, Y, X)
    arr = arr.transpose(0, 3, 2, 1)
    if dtype_tag == "u8":
        if channels != 1:
            raise VolumeFormatError(f"{source}: label volumes must have one channel")
        labels = np.ascontiguousarray(arr[0])
        try:
            validate_labels(labels)
        except VolumeFormatError as exc:
            raise VolumeFormatError(f"{source}: {exc}") from None
        return LabelMap(labels, spacing, axis_order)
    data = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"{source}: non-finite values in float payload")
    return VolumeSet(data, spacing, axis_order)


def write_volume(obj: VolumeSet | LabelMap, path) -> None:
    Path(path).write_bytes(encode_volume(obj))


def read_volume(path) -> VolumeSet | LabelMap:
    path = Path(path)
    return decode_volume(path.read_bytes(), str(path))


def write_case(case_dir, volume: VolumeSet, labels: LabelMap | None = None) -> None:
    """Write ``<case>/{t1,t1c,t2,flair}.avol`` (+ ``labels.avol``)."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    if volume.channels != len(MODALITIES):
        raise ValueError(f"expected {len(MODALITIES)} modalities, got {volume.channels}")
    for i, name in enumerate(MODALITIES):
        write_volume(VolumeSet(volume.data[i:i + 1], volume.spacing, volume.axis_order),
                     case_dir / f"{name}.avol")
    if labels is not None:
        write_volume(labels, case_dir / "labels.avol")


def read_case(case_dir, with_labels: bool = True) -> tuple[VolumeSet, LabelMap | None]:
    case_dir = Path(case_dir)
    chans = []
    spacing = None
    for name in MODALITIES:
        vol = read_volume(case_dir / f"{name}.avol")
        if not isinstance(vol, VolumeSet) or vol.channels != 1:
            raise VolumeFormatError(f"{case_dir / name}.avol: expected a 1-channel float volume")
        if spacing is not None and vol.spacing != spacing:
            raise VolumeFormatError(f"{case_dir}: modalities disagree on spacing")
        if chans and vol.extents != chans[0].shape:
            raise VolumeFormatError(f"{case_dir}: modalities disagree on extents")
        spacing = vol.spacing
        chans.append(vol.data[0])
    labels = None
    if with_labels and (case_dir / "labels.avol").exists():
        labels = read_volume(case_dir / "labels.avol")
        if not isinstance(labels, LabelMap):
            raise VolumeFormatError(f"{case_dir}/labels.avol: expected u8 labels")
        if labels.extents != chans[0].shape:
            raise VolumeFormatError(f"{case_dir}: labels extents differ from the images")
    return VolumeSet(np.stack(chans), spacing), labels


def list_cases(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    return sorted(p for p in data_dir.iterdir() if p.is_dir() and (p / "t1.avol").exists())


# -------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    """Per-modality mean and standard deviation over nonzero training voxels."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValueError("NormStats: mean/std length mismatch")
        if any(s < 0 for s in self.std):
            raise ValueError("NormStats: negative standard deviation")


def compute_norm_stats(volumes) -> NormStats:
    """Pooled mean/std of the nonzero voxels of each modality."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("compute_norm_stats: no volumes")
    C = volumes[0].channels
    total = np.zeros(C)
    total_sq = np.zeros(C)
    count = np.zeros(C)
    for vol in volumes:
        for c in range(C):
            v = vol.data[c][vol.data[c] != 0].astype(np.float64)
            total[c] += v.sum()
            count[c] += v.size
    mean = np.divide(total, count, out=np.zeros(C), where=count > 0)
    for vol in volumes:
        for c in range(C):
            v = vol.data[c][vol.data[c] != 0].astype(np.float64)
            total_sq[c] += np.square(v - mean[c]).sum()
    std = np.sqrt(np.divide(total_sq, count, out=np.zeros(C), where=count > 0))
    return NormStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def normalize(volume: VolumeSet, stats: NormStats) -> VolumeSet:
    """(x - mean) / std on nonzero voxels per modality; background stays 0.

    A modality whose std is below 1e-6 becomes all zeros.
    """
    if len(stats.mean) != volume.channels:
        raise ValueError(f"normalize: stats for {len(stats.mean)} modalities, "
                         f"volume has {volume.channels}")
    out = np.zeros_like(volume.data)
    for c in range(volume.channels):
        if stats.std[c] < 1e-6:
            continue
        src = volume.data[c]
        nz = src != 0
        out[c][nz] = ((src[nz].astype(np.float64) - stats.mean[c]) / stats.std[c]).astype(
            np.float32)
    return VolumeSet(out, volume.spacing, volume.axis_order)


# ------------------------------------------------------------------- sampling

def sample_patch_centers(mask: np.ndarray, count: int, rng: np.random.Generator,
                         p_foreground: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Patch centers: a region-positive voxel with probability ``p_foreground``,
    otherwise uniform over the volume. Returns (centers (count, 3), foreground-drawn flags)."""
    if count <= 0:
        raise ValueError(f"sample count must be positive, got {count}")
    positives = np.argwhere(mask)
    centers = np.empty((count, 3), dtype=np.int64)
    drawn_fg = np.zeros(count, dtype=bool)
    shape = np.asarray(mask.shape)
    for i in range(count):
        if len(positives) and rng.random() < p_foreground:
            centers[i] = positives[rng.integers(len(positives))]
            drawn_fg[i] = True
        else:
            centers[i] = [rng.integers(n) for n in shape]
    return centers, drawn_fg


def pad_to_at_least(arr: np.ndarray, extents, spatial_axes=(-3, -2, -1)) -> np.ndarray:
    """Zero-pad the trailing end of the spatial axes up to ``extents``."""
    pad = [(0, 0)] * arr.ndim
    for ax, e in zip(spatial_axes, extents):
        n = arr.shape[ax]
        if n < e:
            pad[ax] = (0, e - n)
    if all(p == (0, 0) for p in pad):
        return arr
    return np.pad(arr, pad)


def patch_origin(center, patch, extents) -> tuple[int, int, int]:
    return tuple(int(min(max(c - p // 2, 0), n - p)) for c, p, n in zip(center, patch, extents))


def extract_patches(image: np.ndarray, mask: np.ndarray, patch, centers):
    """Crop (C, X, Y, Z) image / (X, Y, Z) mask patches around ``centers``."""
    image = pad_to_at_least(image, patch)
    mask = pad_to_at_least(mask, patch)
    extents = mask.shape
    out = []
    for c in centers:
        o = patch_origin(c, patch, extents)
        sl = tuple(slice(a, a + p) for a, p in zip(o, patch))
        out.append((image[(slice(None),) + sl], mask[sl]))
    return out


def sample_patches(volume: VolumeSet, labels: LabelMap, patch, count: int, region: str,
                   seed: int, p_foreground: float = 0.5):
    """Foreground-biased training patches and their binary targets for ``region``."""
    from .cascade import binarize_region  # region hierarchy lives with the cascade

    if count <= 0:
        raise ValueError(f"sample count must be positive, got {count}")
    mask = binarize_region(labels.labels, region)
    rng = np.random.Generator(np.random.Philox(seed))
    centers, _ = sample_patch_centers(mask, count, rng, p_foreground)
    return [(img.copy(), tgt.copy()) for img, tgt in
            extract_patches(volume.data, mask, tuple(patch), centers)]
