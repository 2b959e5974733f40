"""Core rasters, scribbles, percentile normalization, and on-disk formats.

Disk layout is deliberately primitive: a raw little-endian payload next to a
text sidecar header (``<path>.hdr``) with one ``key: value`` pair per line.
Images and probability/entropy maps are float32 in (channel, row, col) order;
label maps are uint32. Scribbles are a line-oriented text format with exact
integer pixel coordinates, ``(row, col)`` everywhere.

Percentile convention: linear interpolation between order statistics.
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Malformed file, inconsistent dimensions, or invalid raster content."""


@dataclass(frozen=True)
class NormalizationConfig:
    low_percentile: float = 1.0
    high_percentile: float = 99.0

    def __post_init__(self):
        if not 0.0 <= self.low_percentile < self.high_percentile <= 100.0:
            raise ValueError(
                f"percentiles must satisfy 0 <= low < high <= 100, "
                f"got ({self.low_percentile}, {self.high_percentile})"
            )


@dataclass(frozen=True)
class MultiChannelImage:
    """Immutable H×W×C float raster stored as a (C, H, W) array."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DataError(f"image values must be (channels, height, width), got shape {v.shape}")
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise DataError(f"non-finite image value at flat index {int(bad[0])}")
        if self.normalized and (v.min() < 0.0 or v.max() > 1.0):
            raise DataError("normalized image has values outside [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Integer instance raster: 0 background, 1..K instance IDs."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.uint32)
        if lab.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {lab.shape}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def num_instances(self):
        return int(self.labels.max(initial=0))

    def instance_ids(self):
        ids = np.unique(self.labels)
        return ids[ids > 0]

    def canonicalized(self):
        """Relabel instances 1..K in row-major scan order of first appearance."""
        lab = self.labels
        flat = lab.ravel()
        nz = np.flatnonzero(flat)
        if nz.size == 0:
            return LabelMap(np.zeros_like(lab))
        first = {}
        order = []
        for idx in nz:
            v = int(flat[idx])
            if v not in first:
                first[v] = len(order) + 1
                order.append(v)
        out = np.zeros_like(lab)
        for old, new in first.items():
            out[lab == old] = new
        return LabelMap(out)


# scribble classes
BACKGROUND = 0
FOREGROUND = 1


@dataclass(frozen=True)
class Stroke:
    class_id: int
    pixels: tuple  # tuple of (row, col) int pairs

    def __post_init__(self):
        if self.class_id not in (BACKGROUND, FOREGROUND):
            raise DataError(f"stroke class must be 0 or 1, got {self.class_id}")
        px = tuple((int(r), int(c)) for r, c in self.pixels)
        if not px:
            raise DataError("stroke has no pixels")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class ScribbleSet:
    """Sparse two-class strokes over an image of known dimensions.

    A pixel may appear in several strokes of the same class but never in
    both classes (one-hot where annotated).
    """

    height: int
    width: int
    strokes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "strokes", tuple(self.strokes))
        seen = {}
        for stroke in self.strokes:
            for (r, c) in stroke.pixels:
                if not (0 <= r < self.height and 0 <= c < self.width):
                    raise DataError(f"scribble pixel ({r}, {c}) outside {self.height}x{self.width} image")
                prev = seen.get((r, c))
                if prev is not None and prev != stroke.class_id:
                    raise DataError(f"pixel ({r}, {c}) scribbled with both classes")
                seen[(r, c)] = stroke.class_id

    @property
    def num_pixels(self):
        return sum(len(s.pixels) for s in self.strokes)

    def is_empty(self):
        return not self.strokes

    def class_masks(self):
        """Boolean (2, H, W) masks, index 0 background / 1 foreground."""
        masks = np.zeros((2, self.height, self.width), dtype=bool)
        for stroke in self.strokes:
            for (r, c) in stroke.pixels:
                masks[stroke.class_id, r, c] = True
        return masks

    def merged_with(self, other):
        if (other.height, other.width) != (self.height, self.width):
            raise DataError("cannot merge scribbles with mismatched dimensions")
        return ScribbleSet(self.height, self.width, self.strokes + tuple(other.strokes))


# ---------------------------------------------------------------------------
# raster I/O: raw LE payload + text sidecar header
# ---------------------------------------------------------------------------

_DTYPES = {"float32": np.dtype("<f4"), "uint32": np.dtype("<u4")}
RASTER_FORMAT = "raster-v1"


def _write_header(path, width, height, channels, dtype_name):
    lines = [
        f"format: {RASTER_FORMAT}",
        f"width: {width}",
        f"height: {height}",
        f"channels: {channels}",
        f"dtype: {dtype_name}",
        "order: channel-row-col",
        "endian: little",
    ]
    with open(str(path) + ".hdr", "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_header(path):
    hdr_path = str(path) + ".hdr"
    if not os.path.exists(hdr_path):
        raise DataError(f"missing raster header {hdr_path}")
    fields = {}
    with open(hdr_path, encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    try:
        if fields["format"] != RASTER_FORMAT:
            raise DataError(f"unsupported raster format {fields['format']!r}")
        width = int(fields["width"])
        height = int(fields["height"])
        channels = int(fields["channels"])
        dtype_name = fields["dtype"]
    except KeyError as exc:
        raise DataError(f"raster header {hdr_path} missing field {exc}") from None
    if dtype_name not in _DTYPES:
        raise DataError(f"unsupported raster dtype {dtype_name!r}")
    return width, height, channels, dtype_name


def save_raster(array, path):
    """Write a (C, H, W) float32 or (H, W) uint32 array as payload + header."""
    arr = np.asarray(array)
    if arr.dtype == np.uint32 and arr.ndim == 2:
        dtype_name = "uint32"
        c, h, w = 1, arr.shape[0], arr.shape[1]
    elif arr.ndim == 3:
        dtype_name = "float32"
        arr = arr.astype(np.float32, copy=False)
        c, h, w = arr.shape
    elif arr.ndim == 2:
        dtype_name = "float32"
        arr = arr.astype(np.float32, copy=False)
        c, h, w = 1, arr.shape[0], arr.shape[1]
    else:
        raise DataError(f"cannot save array of shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes())
    _write_header(path, w, h, c, dtype_name)


def load_raster(path):
    """Read payload + header back into an array; shape (C, H, W) or (H, W) for uint32."""
    if not os.path.exists(path):
        raise DataError(f"missing raster file {path}")
    width, height, channels, dtype_name = _read_header(path)
    dtype = _DTYPES[dtype_name]
    payload = np.fromfile(path, dtype=dtype)
    expected = width * height * channels
    if payload.size != expected:
        raise DataError(
            f"raster {path}: payload has {payload.size} values, "
            f"header implies {expected} ({channels}x{height}x{width})"
        )
    if dtype_name == "uint32":
        return payload.reshape(height, width).astype(np.uint32)
    return payload.reshape(channels, height, width).astype(np.float32)


def save_image(image, path):
    save_raster(image.values, path)


def load_image(path):
    arr = load_raster(path)
    if arr.ndim == 2:
        arr = arr[None]
    return MultiChannelImage(arr, normalized=False)


def save_labelmap(labelmap, path):
    save_raster(labelmap.labels, path)


def load_labelmap(path):
    arr = load_raster(path)
    if arr.ndim != 2:
        raise DataError(f"label map raster {path} is not a single uint32 plane")
    return LabelMap(arr)


def image_from_uint8(array):
    """Widen an 8-bit grayscale or multi-channel array to float, unnormalized."""
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    return MultiChannelImage(arr.astype(np.float32), normalized=False)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def percentile_bounds(channel_values, config):
    """Low/high percentiles by linear interpolation between order statistics."""
    flat = np.asarray(channel_values, dtype=np.float64).ravel()
    lo = float(np.percentile(flat, config.low_percentile, method="linear"))
    hi = float(np.percentile(flat, config.high_percentile, method="linear"))
    return lo, hi


def normalize(image, config=NormalizationConfig()):
    """Per-channel percentile rescale to [0, 1] with clipping.

    Constant channels (high == low percentile) map to all zeros with a warning.
    """
    if image.normalized:
        raise DataError("image is already normalized")
    out = np.empty_like(image.values)
    for c in range(image.channels):
        lo, hi = percentile_bounds(image.values[c], config)
        if hi <= lo:
            warnings.warn(f"channel {c} is constant over the percentile range; mapped to zeros")
            out[c] = 0.0
        else:
            out[c] = np.clip((image.values[c] - lo) / (hi - lo), 0.0, 1.0)
    return MultiChannelImage(out, normalized=True)


# ---------------------------------------------------------------------------
# scribble I/O
# ---------------------------------------------------------------------------

SCRIBBLE_FORMAT = "scribbles-v1"
_CLASS_NAMES = {BACKGROUND: "bg", FOREGROUND: "fg"}
_CLASS_IDS = {v: k for k, v in _CLASS_NAMES.items()}


def save_scribbles(scribbles, path):
    lines = [SCRIBBLE_FORMAT, f"size {scribbles.height} {scribbles.width}"]
    for stroke in scribbles.strokes:
        coords = " ".join(f"{r},{c}" for r, c in stroke.pixels)
        lines.append(f"stroke {_CLASS_NAMES[stroke.class_id]} {coords}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scribbles(path):
    if not os.path.exists(path):
        raise DataError(f"missing scribble file {path}")
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != SCRIBBLE_FORMAT:
        raise DataError(f"{path}: not a {SCRIBBLE_FORMAT} file")
    parts = lines[1].split()
    if len(parts) != 3 or parts[0] != "size":
        raise DataError(f"{path}: malformed size line {lines[1]!r}")
    height, width = int(parts[1]), int(parts[2])
    strokes = []
    for line in lines[2:]:
        tokens = line.split()
        if tokens[0] != "stroke" or len(tokens) < 3 or tokens[1] not in _CLASS_IDS:
            raise DataError(f"{path}: malformed stroke line {line!r}")
        pixels = []
        for tok in tokens[2:]:
            r, _, c = tok.partition(",")
            pixels.append((int(r), int(c)))
        strokes.append(Stroke(_CLASS_IDS[tokens[1]], tuple(pixels)))
    return ScribbleSet(height, width, tuple(strokes))
