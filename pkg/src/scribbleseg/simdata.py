"""Synthetic datasets honoring the mixture-of-intensities assumption.

Images contain non-overlapping elliptical cells over a two-region background.
Both foreground and background draw from two intensity sub-populations so an
M = 2+2 component partition is genuinely exercised; interleaving the two
classes' population levels makes intensity clustering alone insufficient to
recover the class split.

Simulated annotators mimic real scribbles: a skeleton line inside each
selected cell (foreground) and a one-pixel ring two pixels outside it
(background), selected either at random or by descending mean entropy.
"""

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .data import (BACKGROUND, FOREGROUND, DataError, LabelMap, MultiChannelImage,
                   ScribbleSet, Stroke, load_image, load_labelmap, load_scribbles,
                   save_image, save_labelmap, save_scribbles)
from .rng import SCRIBBLES, SYNTH, stream

_BOX3 = np.ones((3, 3), dtype=bool)


def _per_channel(value, channels):
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return np.full(channels, float(arr[0]))
    if arr.size != channels:
        raise ValueError(f"expected scalar or {channels} per-channel values, got {arr.size}")
    return arr


@dataclass(frozen=True)
class SynthConfig:
    height: int = 256
    width: int = 256
    channels: int = 2
    num_images: int = 1
    cells_min: int = 40
    cells_max: int = 60
    radius_min: float = 4.0
    radius_max: float = 8.0
    fg_mean: object = 0.75   # scalar or per-channel
    bg_mean: object = 0.25
    fg_pop_delta: float = 0.08
    bg_pop_delta: float = 0.08
    jitter: float = 0.03
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        fg = _per_channel(self.fg_mean, self.channels)
        bg = _per_channel(self.bg_mean, self.channels)
        if np.any(fg < 0) or np.any(fg > 1) or np.any(bg < 0) or np.any(bg > 1):
            raise ValueError("class mean intensities must lie in [0, 1]")
        if self.radius_min < 2:
            raise ValueError("cell radii must be >= 2 px")
        if self.radius_max < self.radius_min:
            raise ValueError("radius_max must be >= radius_min")
        if not 0 < self.cells_min <= self.cells_max:
            raise ValueError("need 0 < cells_min <= cells_max")


def _place_centers(cfg, count, rng):
    """Rejection-sample cell centers with non-overlap spacing; error if infeasible."""
    spacing = 2.0 * cfg.radius_max + 3.0
    border = cfg.radius_max + 3.0
    centers = []
    attempts = 0
    max_attempts = 300 * count
    while len(centers) < count and attempts < max_attempts:
        attempts += 1
        r = rng.uniform(border, cfg.height - border)
        c = rng.uniform(border, cfg.width - border)
        if all((r - cr) ** 2 + (c - cc) ** 2 >= spacing ** 2 for cr, cc in centers):
            centers.append((r, c))
    if len(centers) < count:
        raise ValueError(
            f"infeasible packing: requested {count} cells, achievable max was {len(centers)} "
            f"for {cfg.height}x{cfg.width} at spacing {spacing:.1f}"
        )
    return centers


def _background_field(cfg, rng):
    """Two-subpopulation background split by a wavy vertical boundary."""
    bg = _per_channel(cfg.bg_mean, cfg.channels)
    phase = rng.uniform(0, 2 * math.pi)
    rows = np.arange(cfg.height)
    boundary = cfg.width / 2 + (cfg.width / 8) * np.sin(2 * math.pi * rows / cfg.height + phase)
    left = np.arange(cfg.width)[None, :] < boundary[:, None]  # (H, W)
    field = np.empty((cfg.channels, cfg.height, cfg.width), dtype=np.float64)
    for ch in range(cfg.channels):
        lo = bg[ch] - cfg.bg_pop_delta + rng.uniform(-cfg.jitter, cfg.jitter)
        hi = bg[ch] + cfg.bg_pop_delta + rng.uniform(-cfg.jitter, cfg.jitter)
        field[ch] = np.where(left, lo, hi)
    return field


def generate(config):
    """Deterministic list of (MultiChannelImage, LabelMap) pairs."""
    cfg = config
    out = []
    fg = _per_channel(cfg.fg_mean, cfg.channels)
    for i in range(cfg.num_images):
        rng = stream(cfg.seed, SYNTH, i)
        count = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
        centers = _place_centers(cfg, count, rng)
        image = _background_field(cfg, rng)
        labels = np.zeros((cfg.height, cfg.width), dtype=np.uint32)
        for cell_id, (cy, cx) in enumerate(centers, start=1):
            ry = rng.uniform(cfg.radius_min, cfg.radius_max)
            rx = rng.uniform(cfg.radius_min, cfg.radius_max)
            theta = rng.uniform(0, math.pi)
            pop_sign = 1.0 if rng.random() < 0.5 else -1.0
            jit = rng.uniform(-cfg.jitter, cfg.jitter, size=cfg.channels)
            r_lo = max(0, int(cy - cfg.radius_max - 1))
            r_hi = min(cfg.height, int(cy + cfg.radius_max + 2))
            c_lo = max(0, int(cx - cfg.radius_max - 1))
            c_hi = min(cfg.width, int(cx + cfg.radius_max + 2))
            yy, xx = np.mgrid[r_lo:r_hi, c_lo:c_hi]
            dy, dx = yy - cy, xx - cx
            u = dy * math.cos(theta) + dx * math.sin(theta)
            v = -dy * math.sin(theta) + dx * math.cos(theta)
            inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
            labels[r_lo:r_hi, c_lo:c_hi][inside] = cell_id
            for ch in range(cfg.channels):
                level = fg[ch] + pop_sign * cfg.fg_pop_delta + jit[ch]
                image[ch, r_lo:r_hi, c_lo:c_hi][inside] = level
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
        out.append((MultiChannelImage(image.astype(np.float32), normalized=False),
                    LabelMap(labels)))
    return out


@dataclass(frozen=True)
class ScribbleBudget:
    fraction: float
    policy: str = "random"  # or "entropy"

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("budget fraction must be in [0, 1]")
        if self.policy not in ("random", "entropy"):
            raise ValueError(f"unknown selection policy {self.policy!r}")


def entropy_rank(labelmap, entropy_map):
    """Instance IDs by descending mean in-instance entropy; ties by ID ascending."""
    emap = np.asarray(entropy_map)
    if emap.shape != labelmap.labels.shape:
        raise ValueError("entropy map dimensions must match the label map")
    ids = labelmap.instance_ids()
    if not len(ids):
        return []
    means = ndimage.mean(emap, labels=labelmap.labels, index=ids)
    order = np.lexsort((ids, -np.asarray(means)))
    return [int(ids[i]) for i in order]


def _instance_strokes(labels, cell_id, box):
    """Foreground skeleton + background ring strokes for one instance."""
    mask = labels[box] == cell_id
    eroded = ndimage.binary_erosion(mask)
    skel = skeletonize(eroded) if eroded.any() else np.zeros_like(mask)
    r_off, c_off = box[0].start, box[1].start
    if skel.any():
        fg_pixels = [(r + r_off, c + c_off) for r, c in np.argwhere(skel)]
    else:
        # instance too small to erode: fall back to its pixel nearest the centroid
        coords = np.argwhere(mask)
        centroid = coords.mean(axis=0)
        nearest = coords[np.argmin(((coords - centroid) ** 2).sum(axis=1))]
        fg_pixels = [(int(nearest[0]) + r_off, int(nearest[1]) + c_off)]
    ring = ndimage.binary_dilation(mask, _BOX3, iterations=2) & ~ndimage.binary_dilation(mask, _BOX3)
    ring &= labels[box] == 0
    bg_pixels = [(r + r_off, c + c_off) for r, c in np.argwhere(ring)]
    strokes = [Stroke(FOREGROUND, tuple(fg_pixels))]
    if bg_pixels:
        strokes.append(Stroke(BACKGROUND, tuple(bg_pixels)))
    return strokes


def select_instances(labelmap, budget, entropy_map=None, seed=0, exclude_ids=()):
    """Pick ceil(fraction * K) instance IDs to annotate.

    Selection is uniform without replacement, or by descending mean entropy
    when the budget's policy is "entropy" (requires ``entropy_map``).
    ``exclude_ids`` removes already-annotated instances from consideration
    while the budget stays a fraction of all K instances.
    """
    ids = [int(v) for v in labelmap.instance_ids()]
    if not ids:
        raise ValueError("label map has no instances to annotate")
    n_sel = math.ceil(budget.fraction * len(ids))
    excluded = set(exclude_ids)
    eligible = [v for v in ids if v not in excluded]
    if budget.policy == "entropy":
        if entropy_map is None:
            raise ValueError("entropy-ranked selection requires an entropy map")
        ranked = [v for v in entropy_rank(labelmap, entropy_map) if v not in excluded]
        return ranked[:n_sel]
    rng = stream(seed, SCRIBBLES)
    n = min(n_sel, len(eligible))
    if not n:
        return []
    return sorted(int(v) for v in rng.choice(eligible, size=n, replace=False))


def scribbles_for_instances(labelmap, instance_ids):
    """Skeleton + ring strokes for the given instances."""
    boxes = ndimage.find_objects(labelmap.labels.astype(np.int64))
    height, width = labelmap.labels.shape
    strokes = []
    for cell_id in instance_ids:
        raw = boxes[cell_id - 1]
        # ring-growing needs a small border around the instance bbox
        box = (slice(max(0, raw[0].start - 3), min(height, raw[0].stop + 3)),
               slice(max(0, raw[1].start - 3), min(width, raw[1].stop + 3)))
        strokes.extend(_instance_strokes(labelmap.labels, cell_id, box))
    return ScribbleSet(height, width, tuple(strokes))


def simulate_scribbles(labelmap, budget, entropy_map=None, seed=0, exclude_ids=()):
    """Scribbles for a budgeted instance selection of a ground-truth label map."""
    selected = select_instances(labelmap, budget, entropy_map=entropy_map,
                                seed=seed, exclude_ids=exclude_ids)
    return scribbles_for_instances(labelmap, selected)


# ---------------------------------------------------------------------------
# on-disk dataset: manifest listing images, labels, scribbles
# ---------------------------------------------------------------------------

DATASET_FORMAT = "dataset-v1"


@dataclass
class DatasetItem:
    item_id: str
    image: MultiChannelImage
    labels: LabelMap
    scribbles: ScribbleSet


def save_dataset(directory, pairs, scribble_sets, config=None):
    """Write (image, labels) pairs plus scribbles and a manifest to a directory."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, ((image, labels), scribbles) in enumerate(zip(pairs, scribble_sets)):
        item_id = f"img_{i:03d}"
        save_image(image, os.path.join(directory, f"{item_id}.raster"))
        save_labelmap(labels, os.path.join(directory, f"{item_id}_labels.raster"))
        save_scribbles(scribbles, os.path.join(directory, f"{item_id}_scribbles.txt"))
        entries.append({
            "id": item_id,
            "image": f"{item_id}.raster",
            "labels": f"{item_id}_labels.raster",
            "scribbles": f"{item_id}_scribbles.txt",
        })
    manifest = {"format": DATASET_FORMAT, "images": entries}
    if config is not None:
        manifest["config"] = asdict(config)
    with open(os.path.join(directory, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(directory):
    """Read a dataset directory back into DatasetItem records."""
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing dataset manifest {manifest_path}")
    with open(manifest_path, encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{manifest_path}: unsupported dataset format")
    items = []
    for entry in manifest["images"]:
        items.append(DatasetItem(
            item_id=entry["id"],
            image=load_image(os.path.join(directory, entry["image"])),
            labels=load_labelmap(os.path.join(directory, entry["labels"])),
            scribbles=load_scribbles(os.path.join(directory, entry["scribbles"])),
        ))
    return items
