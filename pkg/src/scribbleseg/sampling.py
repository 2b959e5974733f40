"""Patch sampling with scribble bias and blind-spot imputation.

Patches are sampled per image; with probability ``scribble_bias`` a patch is
anchored on a random scribbled pixel so sparse annotations actually appear in
training batches. Validation patches come from a disjoint spatial grid whose
cell centers keep at least patch_size/2 Chebyshev distance from every
training-patch center of the same image.

Blind-spot imputation selects each pixel independently with probability p and
replaces its value (all channels jointly) by the value of a uniformly chosen
different pixel inside the clipped (2r+1)^2 window around it.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .rng import PATCHES, stream


@dataclass(frozen=True)
class PatchPair:
    image: np.ndarray          # (C, h, w) float
    scribble_masks: np.ndarray  # (2, h, w) bool
    image_index: int
    offset: tuple              # (row0, col0)


@dataclass(frozen=True)
class BlindSpotResult:
    imputed: np.ndarray  # (C, h, w)
    mask: np.ndarray     # (h, w) bool, True where replaced (all channels jointly)


def sample_patches(dataset, patches_per_image, patch_size=128, seed=0,
                   scribble_bias=0.9, val_fraction=0.1):
    """Draw B patches per image plus a grid-based validation split.

    dataset: list of (MultiChannelImage, ScribbleSet). Returns (train, val)
    lists of PatchPair. Images smaller than the patch are skipped with a
    warning; a dataset with no scribbles anywhere is an error.
    """
    rng = stream(seed, PATCHES)
    if not any(not s.is_empty() for _, s in dataset):
        raise ValueError("no scribbles anywhere in the dataset")

    train = []
    centers_by_image = {}
    usable = []
    for idx, (image, scribbles) in enumerate(dataset):
        if image.height < patch_size or image.width < patch_size:
            warnings.warn(
                f"image {idx} ({image.height}x{image.width}) smaller than patch {patch_size}; skipped"
            )
            continue
        usable.append(idx)
        masks = scribbles.class_masks()
        scribbled = np.argwhere(masks.any(axis=0))
        centers = []
        max_r = image.height - patch_size
        max_c = image.width - patch_size
        for _ in range(patches_per_image):
            if scribbled.size and rng.random() < scribble_bias:
                pr, pc = scribbled[rng.integers(len(scribbled))]
                r0 = int(rng.integers(max(0, pr - patch_size + 1), min(max_r, pr) + 1))
                c0 = int(rng.integers(max(0, pc - patch_size + 1), min(max_c, pc) + 1))
            else:
                r0 = int(rng.integers(0, max_r + 1))
                c0 = int(rng.integers(0, max_c + 1))
            train.append(PatchPair(
                image=image.values[:, r0:r0 + patch_size, c0:c0 + patch_size],
                scribble_masks=masks[:, r0:r0 + patch_size, c0:c0 + patch_size],
                image_index=idx,
                offset=(r0, c0),
            ))
            centers.append((r0 + patch_size // 2, c0 + patch_size // 2))
        centers_by_image[idx] = np.asarray(centers, dtype=np.int64)

    if not train:
        raise ValueError("no image is large enough for the requested patch size")

    # validation: grid cells whose centers are far from all training centers
    min_dist = patch_size // 2
    candidates = []
    for idx in usable:
        image, scribbles = dataset[idx]
        masks = scribbles.class_masks()
        centers = centers_by_image[idx]
        for r0 in range(0, image.height - patch_size + 1, patch_size):
            for c0 in range(0, image.width - patch_size + 1, patch_size):
                cr, cc = r0 + patch_size // 2, c0 + patch_size // 2
                if centers.size:
                    cheb = np.maximum(np.abs(centers[:, 0] - cr), np.abs(centers[:, 1] - cc))
                    if cheb.min() < min_dist:
                        continue
                candidates.append((idx, r0, c0, masks))
    target = max(1, round(val_fraction * len(train)))
    val = []
    if candidates:
        order = rng.permutation(len(candidates))[:target]
        for i in order:
            idx, r0, c0, masks = candidates[i]
            image = dataset[idx][0]
            val.append(PatchPair(
                image=image.values[:, r0:r0 + patch_size, c0:c0 + patch_size],
                scribble_masks=masks[:, r0:r0 + patch_size, c0:c0 + patch_size],
                image_index=idx,
                offset=(r0, c0),
            ))
    else:
        warnings.warn("no validation patches satisfy the distance constraint; validation set empty")
    return train, val


def blindspot(patch, probability=0.2, window_radius=5, rng=None):
    """Replace a random pixel subset by nearby donor values.

    Every selected pixel gets the value of a uniformly drawn pixel j != i
    within the (2r+1)x(2r+1) window clipped to the patch, all channels taken
    from the same donor. Unselected pixels are untouched (exact identity).
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must be in [0, 1]")
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    _, h, w = patch.shape
    mask = rng.random((h, w)) < probability
    imputed = patch.copy()
    sel = np.argwhere(mask)
    if sel.size:
        rows, cols = sel[:, 0], sel[:, 1]
        donor_r = np.empty(len(sel), dtype=np.int64)
        donor_c = np.empty(len(sel), dtype=np.int64)
        pending = np.arange(len(sel))
        while pending.size:
            dr = rng.integers(-window_radius, window_radius + 1, size=pending.size)
            dc = rng.integers(-window_radius, window_radius + 1, size=pending.size)
            rr = rows[pending] + dr
            cc = cols[pending] + dc
            ok = ((dr != 0) | (dc != 0)) & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            donor_r[pending[ok]] = rr[ok]
            donor_c[pending[ok]] = cc[ok]
            pending = pending[~ok]
        imputed[:, rows, cols] = patch[:, donor_r, donor_c]
    return BlindSpotResult(imputed=imputed, mask=mask)
