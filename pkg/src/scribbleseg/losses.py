"""Mixture reconstruction loss, scribble loss, and the joint objective.

The reconstruction term is the negative expected log-likelihood of the
original pixel under per-pixel fixed-variance Gaussian components, evaluated
only at imputed pixels and averaged over them:

    L_mix = (1/|I|) sum_{i in I} sum_m rho_i^m * ||x_i - tau_i^m||^2 / (2 sigma^2)

(channel sums inside the norm; the additive Gaussian log-constant is dropped
since sigma is fixed, which changes neither gradients nor the minimizer).

The scribble term is per class k a mean over annotated pixels of the negative
log of the aggregated class mass sum_{m in m_k} rho_i^m; class balancing comes
from dividing by the per-class annotated pixel count.

The joint objective is (1-lam) * (L_seg^0 + L_seg^1) + lam * L_mix, counting
L_mix once.

Means are accumulated in float64 with a fixed reduction order so results are
reproducible. ``brute_force_losses`` is the deliberately scalar per-pixel
reference the fast paths are tested against.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ScribbleSet

LOG_EPS = 1e-12


@dataclass(frozen=True)
class MixtureConfig:
    components: int = 4
    components_per_class: tuple = (2, 2)
    sigma: object = 0.25  # scalar or per-channel sequence
    lam: float = 0.5

    def __post_init__(self):
        m0, m1 = self.components_per_class
        if m0 < 1 or m1 < 1 or m0 + m1 != self.components:
            raise ValueError(
                f"class partition {self.components_per_class} must cover {self.components} components"
            )
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if np.any(sig <= 0):
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        object.__setattr__(self, "components_per_class", tuple(self.components_per_class))

    def sigma_per_channel(self, channels):
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if sig.size == 1:
            return np.full(channels, float(sig[0]))
        if sig.size != channels:
            raise ValueError(f"sigma has {sig.size} entries for {channels} channels")
        return sig

    def class_components(self, k):
        """Component indices belonging to class k (background-first layout)."""
        m0 = self.components_per_class[0]
        return np.arange(0, m0) if k == 0 else np.arange(m0, self.components)


@dataclass(frozen=True)
class LossReport:
    mix: float
    seg: tuple  # (background, foreground)
    joint: float
    imputed_count: int
    scribble_counts: tuple
    clamped: int = 0


def _as_batched(rho, tau, x, mask):
    if rho.ndim == 3:
        rho = rho[None]
        tau = tau[None]
        x = x[None]
        mask = mask[None]
    return rho, tau, x, mask


def mixture_loss(rho, tau, x, mask, sigma):
    """Masked mean reconstruction NLL. Accepts single (M,H,W) or batched input."""
    value, _, _, _ = _mixture_terms(*_as_batched(np.asarray(rho), np.asarray(tau),
                                                 np.asarray(x), np.asarray(mask)),
                                    sigma, want_grads=False)
    return value


def _mixture_terms(rho, tau, x, mask, sigma, want_grads):
    n, m = rho.shape[:2]
    channels = x.shape[1]
    tau5 = tau.reshape(n, m, channels, *tau.shape[-2:])  # head layout: channel m*C + c
    sig = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if sig.size == 1:
        sig = np.full(channels, float(sig[0]))
    inv_two_var = (1.0 / (2.0 * sig * sig)).reshape(1, 1, channels, 1, 1)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("empty imputation mask: mixture loss defined as 0")
        zero_g = (np.zeros_like(rho), np.zeros_like(tau)) if want_grads else (None, None)
        return 0.0, 0, zero_g[0], zero_g[1]
    diff = x[:, None].astype(np.float64) - tau5.astype(np.float64)
    sq = (diff * diff * inv_two_var).sum(axis=2)  # (N, M, H, W)
    per_pixel = (rho.astype(np.float64) * sq).sum(axis=1)  # (N, H, W)
    value = float(per_pixel[mask].sum() / count)
    if not want_grads:
        return value, count, None, None
    mb = mask[:, None].astype(np.float64)
    d_rho = (sq * mb / count).astype(rho.dtype)
    d_tau5 = (rho[:, :, None].astype(np.float64) * (-diff) * 2.0 * inv_two_var
              * mask[:, None, None] / count)
    d_tau = d_tau5.reshape(tau.shape).astype(tau.dtype)
    return value, count, d_rho, d_tau


def _class_pixel_indices(scribbles, height, width):
    """Flat per-class pixel index arrays; duplicates preserved for stroke input."""
    if isinstance(scribbles, ScribbleSet):
        per_class = ([], [])
        for stroke in scribbles.strokes:
            per_class[stroke.class_id].extend(r * width + c for r, c in stroke.pixels)
        return [np.asarray(ix, dtype=np.int64) for ix in per_class]
    arr = np.asarray(scribbles)
    if arr.dtype == bool and arr.shape == (2, height, width):
        return [np.flatnonzero(arr[k].ravel()) for k in (0, 1)]
    if isinstance(scribbles, (tuple, list)) and len(scribbles) == 2:
        out = []
        for pixels in scribbles:
            out.append(np.asarray([r * width + c for r, c in pixels], dtype=np.int64))
        return out
    raise TypeError("scribbles must be a ScribbleSet, (2,H,W) bool mask, or per-class pixel lists")


def scribble_loss(rho, scribbles, components_per_class):
    """Per-class balanced negative-log class-mass over annotated pixels."""
    rho = np.asarray(rho)
    m0 = components_per_class[0]
    h, w = rho.shape[-2:]
    indices = _class_pixel_indices(scribbles, h, w)
    losses = []
    for k, idx in enumerate(indices):
        if idx.size == 0:
            losses.append(0.0)
            continue
        mass = rho[:m0] if k == 0 else rho[m0:]
        q = mass.reshape(mass.shape[0], -1).sum(axis=0).astype(np.float64)[idx]
        losses.append(float(-np.log(np.maximum(q, LOG_EPS)).sum() / idx.size))
    return losses[0], losses[1]


def joint_loss(l_mix, l_seg, lam):
    """(1-lam) * (L_seg^0 + L_seg^1) + lam * L_mix, L_mix counted once."""
    return (1.0 - lam) * (l_seg[0] + l_seg[1]) + lam * l_mix


def _scribble_terms(rho, class_masks, components_per_class, want_grads):
    """Batched scribble loss with per-class batch-aggregated counts.

    rho (N, M, H, W); class_masks (N, 2, H, W) bool. Returns
    (l0, l1, counts, clamped, d_rho or None).
    """
    n, m = rho.shape[:2]
    m0 = components_per_class[0]
    slices = (slice(0, m0), slice(m0, m))
    d_rho = np.zeros_like(rho) if want_grads else None
    losses = []
    counts = []
    clamped = 0
    for k in (0, 1):
        sel = class_masks[:, k]  # (N, H, W)
        count = int(sel.sum())
        counts.append(count)
        if count == 0:
            losses.append(0.0)
            continue
        mass = rho[:, slices[k]].sum(axis=1).astype(np.float64)  # (N, H, W)
        q = mass[sel]
        low = q < LOG_EPS
        clamped += int(low.sum())
        losses.append(float(-np.log(np.maximum(q, LOG_EPS)).sum() / count))
        if want_grads:
            # derivative of -log(max(q, eps)): -1/q above the clamp, 0 below
            dq = np.where(low, 0.0, -1.0 / np.maximum(q, LOG_EPS)) / count
            grad_plane = np.zeros(mass.shape, dtype=np.float64)
            grad_plane[sel] = dq
            d_rho[:, slices[k]] += grad_plane[:, None].astype(rho.dtype)
    return losses[0], losses[1], tuple(counts), clamped, d_rho


def batch_loss_and_grads(rho, tau, x, mask, class_masks, config):
    """Joint loss report plus head gradients for a training batch.

    All inputs batched: rho (N,M,H,W), tau (N,M*C,H,W), x (N,C,H,W),
    mask (N,H,W) bool, class_masks (N,2,H,W) bool.

    At lam == 0 the mixture term is skipped entirely (reported as 0), so the
    scribble-only objective never reads image intensities.
    """
    lam = config.lam
    if lam > 0.0:
        sigma = config.sigma_per_channel(x.shape[1])
        l_mix, n_imp, d_rho_mix, d_tau = _mixture_terms(rho, tau, x, mask, sigma, want_grads=True)
    else:
        l_mix, n_imp = 0.0, int(mask.sum())
        d_rho_mix = np.zeros_like(rho)
        d_tau = np.zeros_like(tau)
    l0, l1, counts, clamped, d_rho_seg = _scribble_terms(
        rho, class_masks, config.components_per_class, want_grads=True)
    d_rho = lam * d_rho_mix + (1.0 - lam) * d_rho_seg
    d_tau = lam * d_tau
    report = LossReport(
        mix=l_mix, seg=(l0, l1), joint=joint_loss(l_mix, (l0, l1), lam),
        imputed_count=n_imp, scribble_counts=counts, clamped=clamped,
    )
    return report, d_rho.astype(rho.dtype), d_tau.astype(tau.dtype)


def loss_report(rho, tau, x, mask, class_masks, config):
    """Single-patch LossReport without gradients."""
    rho_b, tau_b, x_b, mask_b = _as_batched(np.asarray(rho), np.asarray(tau),
                                            np.asarray(x), np.asarray(mask))
    sigma = config.sigma_per_channel(x_b.shape[1])
    l_mix, n_imp, _, _ = _mixture_terms(rho_b, tau_b, x_b, mask_b, sigma, want_grads=False)
    cm = np.asarray(class_masks)
    if cm.ndim == 3:
        cm = cm[None]
    l0, l1, counts, clamped, _ = _scribble_terms(rho_b, cm, config.components_per_class,
                                                 want_grads=False)
    return LossReport(
        mix=l_mix, seg=(l0, l1), joint=joint_loss(l_mix, (l0, l1), config.lam),
        imputed_count=n_imp, scribble_counts=counts, clamped=clamped,
    )


def joint_closure(x, mask, class_masks, config):
    """Adapter for model.gradients: HeadOutputs -> (value, d_rho, d_tau)."""
    x = np.asarray(x)
    mask = np.asarray(mask)
    cm = np.asarray(class_masks)

    def closure(heads):
        report, d_rho, d_tau = batch_loss_and_grads(
            heads.rho[None], heads.tau[None], x[None], mask[None], cm[None], config)
        return report.joint, d_rho[0], d_tau[0]

    return closure


def brute_force_losses(rho, tau, x, mask, class_masks, config):
    """Per-pixel scalar-loop reference for both losses. Test oracle, no vectorization."""
    rho = np.asarray(rho, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    cm = np.asarray(class_masks)
    m = rho.shape[0]
    channels, height, width = x.shape
    sigma = config.sigma_per_channel(channels)

    mix_sum = 0.0
    n_imp = 0
    for r in range(height):
        for c in range(width):
            if not mask[r, c]:
                continue
            n_imp += 1
            pixel = 0.0
            for comp in range(m):
                sq = 0.0
                for ch in range(channels):
                    diff = x[ch, r, c] - tau[comp * channels + ch, r, c]
                    sq += diff * diff / (2.0 * sigma[ch] * sigma[ch])
                pixel += rho[comp, r, c] * sq
            mix_sum += pixel
    if n_imp:
        l_mix = mix_sum / n_imp
    else:
        l_mix = 0.0

    m0 = config.components_per_class[0]
    seg = []
    counts = []
    clamped = 0
    for k in (0, 1):
        comps = range(0, m0) if k == 0 else range(m0, m)
        total = 0.0
        count = 0
        for r in range(height):
            for c in range(width):
                if not cm[k, r, c]:
                    continue
                count += 1
                q = 0.0
                for comp in comps:
                    q += rho[comp, r, c]
                if q < LOG_EPS:
                    q = LOG_EPS
                    clamped += 1
                total += -np.log(q)
        counts.append(count)
        seg.append(total / count if count else 0.0)

    return LossReport(
        mix=l_mix, seg=(seg[0], seg[1]),
        joint=joint_loss(l_mix, (seg[0], seg[1]), config.lam),
        imputed_count=n_imp, scribble_counts=tuple(counts), clamped=clamped,
    )
