"""Full-image tiled prediction, MC-dropout ensembling, entropy maps.

Tiles overlap by a margin: each forward pass sees a (tile x tile) window
gathered with symmetric border reflection, and only the interior
(tile - 2*margin per side) is written to the output, so seams stay within
float tolerance of an untiled pass. No blind-spot imputation happens at
inference; the network sees the raw normalized image.
"""

import numpy as np

from .data import MultiChannelImage
from .rng import ENSEMBLE, stream


def _reflect_indices(start, stop, n):
    """Symmetric (edge-repeating) indices for the half-open range [start, stop)."""
    idx = np.arange(start, stop)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def foreground_probability(rho, components_per_class):
    """Aggregated foreground class mass: sum of rho over the m_1 components."""
    return rho[..., components_per_class[0]:, :, :].sum(axis=-3)


def predict_full(model, image, tile=256, margin=32, dropout_rng=None):
    """Tiled whole-image forward pass.

    Returns (rho, prob): rho (M, H, W) and the foreground probability map
    (H, W). ``image`` is a normalized MultiChannelImage or a raw (C, H, W)
    array assumed normalized.
    """
    if isinstance(image, MultiChannelImage):
        if not image.normalized:
            raise ValueError("predict_full expects a normalized image")
        values = image.values
    else:
        values = np.asarray(image)
    if values.ndim != 3 or values.shape[0] != model.config.in_channels:
        raise ValueError(
            f"image has {values.shape[0] if values.ndim == 3 else '?'} channels, "
            f"model expects {model.config.in_channels}"
        )
    if margin < 0 or margin * 2 >= tile:
        raise ValueError(f"margin {margin} must satisfy 0 <= margin < tile/2 (tile {tile})")
    div = 2 ** model.config.depth
    if tile % div:
        raise ValueError(f"tile {tile} must be divisible by 2^depth = {div}")

    _, height, width = values.shape
    interior = tile - 2 * margin
    n_rows = -(-height // interior)
    n_cols = -(-width // interior)
    row_idx = _reflect_indices(-margin, n_rows * interior + margin, height)
    col_idx = _reflect_indices(-margin, n_cols * interior + margin, width)
    padded = values[:, row_idx][:, :, col_idx]

    m = model.config.mixture_components
    rho_full = np.zeros((m, height, width), dtype=np.float32)
    for tr in range(n_rows):
        for tc in range(n_cols):
            r0, c0 = tr * interior, tc * interior
            window = padded[:, r0:r0 + tile, c0:c0 + tile]
            rho, _, _ = model.forward_batch(window[None], dropout_rng=dropout_rng)
            out_r = slice(r0, min(r0 + interior, height))
            out_c = slice(c0, min(c0 + interior, width))
            rho_full[:, out_r, out_c] = rho[0][
                :, margin:margin + (out_r.stop - out_r.start),
                margin:margin + (out_c.stop - out_c.start)]
    prob = foreground_probability(rho_full, model.config.components_per_class)
    return rho_full, prob


def binary_entropy(p):
    """Elementwise -p ln p - (1-p) ln(1-p) in nats, with 0 ln 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    inner = (p > 0.0) & (p < 1.0)
    q = p[inner]
    out[inner] = -q * np.log(q) - (1.0 - q) * np.log(1.0 - q)
    return out


def mc_ensemble(model, image, passes=8, seed=0, tile=256, margin=32, dropout=True):
    """Monte Carlo dropout ensemble over the full image.

    Runs ``passes`` stochastic forward passes on independent RNG streams,
    averages the per-pass foreground probabilities, and returns
    (mean probability map, binary entropy map of the mean).
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    acc = None
    for t in range(passes):
        rng = stream(seed, ENSEMBLE, t) if dropout else None
        _, prob = predict_full(model, image, tile=tile, margin=margin, dropout_rng=rng)
        acc = prob.astype(np.float64) if acc is None else acc + prob
    mean_prob = acc / passes
    return mean_prob, binary_entropy(mean_prob)
