"""Training loop: batching, Adam updates, validation, early stopping.

Fully deterministic given (seed, config, dataset): every stochastic choice
draws from a stream keyed by (seed, purpose, epoch, step). Validation uses a
blind-spot realization frozen before the first epoch so its loss is
comparable across epochs, and is evaluated with dropout off.
"""

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses as losses_mod
from .losses import MixtureConfig, batch_loss_and_grads
from .model import ModelConfig, NumericalError, UNet, save_checkpoint
from .rng import BLINDSPOT, DROPOUT, SHUFFLE, VAL_BLINDSPOT, stream
from .sampling import blindspot, sample_patches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    mixture: MixtureConfig = MixtureConfig()
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 20
    seed: int = 0
    imputation_p: float = 0.2
    window_radius: int = 5
    patches_per_image: int = 16
    patch_size: int = 128
    val_fraction: float = 0.1
    scribble_bias: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def paper_train_config(model):
    """Full-scale settings: batch 64, 200 epochs, lr 4e-4."""
    return TrainConfig(model=model, batch_size=64, epochs=200, learning_rate=4e-4)


@dataclass
class EpochRecord:
    epoch: int
    train_mix: float
    train_seg: tuple
    train_joint: float
    val_mix: float
    val_seg: tuple
    val_joint: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    diverged: bool = False

    def best_val_loss(self):
        return min(r.val_joint for r in self.records) if self.records else float("inf")

    def loss_fields(self):
        """Everything except wall time, for determinism comparisons."""
        return [
            (r.epoch, r.train_mix, r.train_seg, r.train_joint, r.val_mix, r.val_seg, r.val_joint)
            for r in self.records
        ]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def like(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step with bias correction, in place on params."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# batch assembly and evaluation
# ---------------------------------------------------------------------------

def _assemble(pairs, imputations):
    x_bar = np.stack([imp.imputed for imp in imputations])
    x_orig = np.stack([p.image for p in pairs])
    masks = np.stack([imp.mask for imp in imputations])
    class_masks = np.stack([p.scribble_masks for p in pairs])
    return x_bar, x_orig, masks, class_masks


def _weighted_eval(model, pairs, imputations, config, batch_size):
    """Exact whole-set losses by aggregating per-chunk sums, dropout off."""
    mix_sum = 0.0
    mix_n = 0
    seg_sum = [0.0, 0.0]
    seg_n = [0, 0]
    for start in range(0, len(pairs), batch_size):
        chunk = slice(start, start + batch_size)
        x_bar, x_orig, masks, class_masks = _assemble(pairs[chunk], imputations[chunk])
        rho, tau, _ = model.forward_batch(x_bar)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report, _, _ = batch_loss_and_grads(rho, tau, x_orig, masks, class_masks, config.mixture)
        mix_sum += report.mix * report.imputed_count
        mix_n += report.imputed_count
        for k in (0, 1):
            seg_sum[k] += report.seg[k] * report.scribble_counts[k]
            seg_n[k] += report.scribble_counts[k]
    mix = mix_sum / mix_n if mix_n else 0.0
    seg = tuple(seg_sum[k] / seg_n[k] if seg_n[k] else 0.0 for k in (0, 1))
    return mix, seg, losses_mod.joint_loss(mix, seg, config.mixture.lam)


def train(dataset, config, initial_model=None, progress=None, out_dir=None):
    """Optimize the joint objective; returns (best model, history).

    dataset: list of (MultiChannelImage, ScribbleSet) with at least one
    scribbled image. ``initial_model`` warm-starts from an existing UNet.
    ``progress(epoch, total, val_loss)`` is called after every epoch.
    When ``out_dir`` is set, a history log (one JSON record per epoch) and
    the best checkpoint are written there as training proceeds.
    """
    cfg = config
    train_pairs, val_pairs = sample_patches(
        dataset, cfg.patches_per_image, cfg.patch_size, seed=cfg.seed,
        scribble_bias=cfg.scribble_bias, val_fraction=cfg.val_fraction)
    if initial_model is not None:
        model = initial_model.copy()
    else:
        model = UNet.build(cfg.model, seed=cfg.seed)
    adam = AdamState.like(model.params)

    val_imputations = [
        blindspot(p.image, cfg.imputation_p, cfg.window_radius, stream(cfg.seed, VAL_BLINDSPOT, i))
        for i, p in enumerate(val_pairs)
    ]
    if not val_pairs:
        warnings.warn("empty validation set: early stopping falls back to the training loss")

    history = TrainHistory()
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_val = float("inf")
    history_path = os.path.join(out_dir, "history.jsonl") if out_dir else None
    if history_path:
        os.makedirs(out_dir, exist_ok=True)
        open(history_path, "w").close()

    n_train = len(train_pairs)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        order = stream(cfg.seed, SHUFFLE, epoch).permutation(n_train)
        mix_sum = 0.0
        mix_n = 0
        seg_sum = [0.0, 0.0]
        seg_n = [0, 0]
        diverged = False
        for step, start in enumerate(range(0, n_train, cfg.batch_size)):
            batch_idx = order[start:start + cfg.batch_size]
            pairs = [train_pairs[i] for i in batch_idx]
            bs_rng = stream(cfg.seed, BLINDSPOT, epoch, step)
            imputations = [blindspot(p.image, cfg.imputation_p, cfg.window_radius, bs_rng)
                           for p in pairs]
            x_bar, x_orig, masks, class_masks = _assemble(pairs, imputations)
            drop_rng = stream(cfg.seed, DROPOUT, epoch, step)
            rho, tau, cache = model.forward_batch(x_bar, dropout_rng=drop_rng, keep_cache=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                report, d_rho, d_tau = batch_loss_and_grads(
                    rho, tau, x_orig, masks, class_masks, cfg.mixture)
            if not np.isfinite(report.joint):
                diverged = True
                break
            try:
                grads = model.backward_batch(cache, d_rho, d_tau)
            except NumericalError:
                diverged = True
                break
            adam_update(model.params, grads, adam, cfg.learning_rate,
                        cfg.beta1, cfg.beta2, cfg.adam_eps)
            mix_sum += report.mix * report.imputed_count
            mix_n += report.imputed_count
            for k in (0, 1):
                seg_sum[k] += report.seg[k] * report.scribble_counts[k]
                seg_n[k] += report.scribble_counts[k]

        if diverged:
            history.diverged = True
            log.warning("training diverged at epoch %d; returning last good checkpoint", epoch)
            break

        train_mix = mix_sum / mix_n if mix_n else 0.0
        train_seg = tuple(seg_sum[k] / seg_n[k] if seg_n[k] else 0.0 for k in (0, 1))
        train_joint = losses_mod.joint_loss(train_mix, train_seg, cfg.mixture.lam)
        if val_pairs:
            val_mix, val_seg, val_joint = _weighted_eval(
                model, val_pairs, val_imputations, cfg, cfg.batch_size)
        else:
            val_mix, val_seg, val_joint = train_mix, train_seg, train_joint
        record = EpochRecord(
            epoch=epoch, train_mix=train_mix, train_seg=train_seg, train_joint=train_joint,
            val_mix=val_mix, val_seg=val_seg, val_joint=val_joint,
            seconds=time.monotonic() - t0,
        )
        history.records.append(record)
        if history_path:
            with open(history_path, "a", encoding="ascii") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")

        if val_joint < best_val:
            best_val = val_joint
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            if out_dir:
                save_checkpoint(UNet(model.config, best_params),
                                os.path.join(out_dir, "best.ckpt"),
                                epoch=epoch, seed=cfg.seed)
        if progress is not None:
            progress(epoch, cfg.epochs, val_joint)
        if epoch - history.best_epoch >= cfg.patience:
            break

    best_model = UNet(model.config, best_params)
    return best_model, history
