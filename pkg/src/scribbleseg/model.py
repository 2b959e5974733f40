"""U-Net backbone with membership and statistics heads, manual backprop.

The network maps a normalized (C, H, W) patch to two per-pixel heads:

* ``rho`` — softmax over M mixture components, shape (M, H, W)
* ``tau`` — sigmoid per-component per-channel mean, shape (M*C, H, W)

Encoder levels are two 3x3 convs + ReLU followed by 2x max-pool; the decoder
mirrors them with nearest-neighbor upsampling + conv and skip concatenation
(skip channels first). Dropout sits after each decoder block only and is
active whenever a dropout RNG stream is supplied. All gradients are exact
(verified against central finite differences in the test suite).
"""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import kernels
from .data import DataError
from .rng import INIT, stream


class NumericalError(Exception):
    """Non-finite values produced where finite ones are required."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    depth: int = 2
    base_features: int = 16
    mixture_components: int = 4
    components_per_class: tuple = (2, 2)
    kernel_size: int = 3
    dropout_rate: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.mixture_components < 2:
            raise ValueError("need at least 2 mixture components")
        m0, m1 = self.components_per_class
        if m0 < 1 or m1 < 1 or m0 + m1 != self.mixture_components:
            raise ValueError(
                f"components_per_class {self.components_per_class} must be positive "
                f"and sum to {self.mixture_components}"
            )
        if self.kernel_size != 3:
            raise ValueError("only 3x3 body convolutions are supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "components_per_class", tuple(self.components_per_class))


def paper_config(in_channels):
    """Configuration used at full scale: depth 4, 64 initial feature maps."""
    return ModelConfig(in_channels=in_channels, depth=4, base_features=64)


@dataclass(frozen=True)
class HeadOutputs:
    rho: np.ndarray  # (M, H, W), softmax over axis 0
    tau: np.ndarray  # (M*C, H, W), sigmoid


def _relu(x):
    return np.maximum(x, 0)


def _softmax_channels(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _maxpool2(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = np.ascontiguousarray(xr).reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)  # first max wins: deterministic tie-break
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_backward(dy, idx, in_shape):
    n, c, h, w = in_shape
    dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    dxr = dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dxr).reshape(n, c, h, w)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class UNet:
    """Parameter container plus forward/backward passes."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # name -> ndarray, fixed manifest order

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, config, seed=0):
        """He-normal initialized network, deterministic in (config, seed)."""
        dt = np.dtype(config.dtype)
        rng = stream(seed, INIT)
        params = {}

        def conv(name, cin, cout, k):
            std = np.sqrt(2.0 / (cin * k * k))
            params[f"{name}.w"] = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dt)
            params[f"{name}.b"] = np.zeros(cout, dtype=dt)

        feats = [config.base_features * (2 ** l) for l in range(config.depth + 1)]
        cin = config.in_channels
        for l in range(config.depth):
            conv(f"enc{l}.c1", cin, feats[l], 3)
            conv(f"enc{l}.c2", feats[l], feats[l], 3)
            cin = feats[l]
        conv("bot.c1", feats[config.depth - 1], feats[config.depth], 3)
        conv("bot.c2", feats[config.depth], feats[config.depth], 3)
        for l in reversed(range(config.depth)):
            conv(f"dec{l}.up", feats[l + 1], feats[l], 3)
            conv(f"dec{l}.c1", 2 * feats[l], feats[l], 3)
            conv(f"dec{l}.c2", feats[l], feats[l], 3)
        m = config.mixture_components
        conv("head_rho", config.base_features, m, 1)
        conv("head_tau", config.base_features, m * config.in_channels, 1)
        return cls(config, params)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return UNet(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward -------------------------------------------------------

    def _check_spatial(self, h, w):
        div = 2 ** self.config.depth
        if h % div or w % div:
            raise ValueError(
                f"spatial dims ({h}, {w}) not divisible by 2^depth={div}; pad the input first"
            )

    def forward_batch(self, x, dropout_rng=None, keep_cache=False):
        """Run (N, C, H, W) inputs through the network.

        Returns (rho, tau, cache) with rho (N, M, H, W) and tau (N, M*C, H, W).
        Dropout is applied only when ``dropout_rng`` is given.
        """
        cfg = self.config
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        self._check_spatial(x.shape[2], x.shape[3])
        p = self.params
        # Intermediates only live past the call when keep_cache is set.
        cache = {"x": x, "conv_in": {}, "relu_out": {}, "pool": {}, "drop": {}}

        def conv_relu(name, h):
            w, b = p[f"{name}.w"], p[f"{name}.b"]
            cache["conv_in"][name] = h
            out = _relu(kernels.conv2d(h, w, b, pad=w.shape[2] // 2))
            cache["relu_out"][name] = out
            return out

        skips = []
        h = x
        for l in range(cfg.depth):
            h = conv_relu(f"enc{l}.c1", h)
            h = conv_relu(f"enc{l}.c2", h)
            skips.append(h)
            pooled, idx = _maxpool2(h)
            cache["pool"][l] = (idx, h.shape)
            h = pooled
        h = conv_relu("bot.c1", h)
        h = conv_relu("bot.c2", h)
        for l in reversed(range(cfg.depth)):
            h = _upsample2(h)
            h = conv_relu(f"dec{l}.up", h)
            h = np.concatenate([skips[l], h], axis=1)
            h = conv_relu(f"dec{l}.c1", h)
            h = conv_relu(f"dec{l}.c2", h)
            if dropout_rng is not None and cfg.dropout_rate > 0.0:
                keep = 1.0 - cfg.dropout_rate
                mask = (dropout_rng.random(h.shape) < keep).astype(h.dtype)
                cache["drop"][l] = mask
                h = h * mask / keep
        z_rho = kernels.conv2d(h, p["head_rho.w"], p["head_rho.b"], pad=0)
        z_tau = kernels.conv2d(h, p["head_tau.w"], p["head_tau.b"], pad=0)
        rho = _softmax_channels(z_rho)
        tau = _sigmoid(z_tau)
        cache["body_out"] = h
        cache["rho"] = rho
        cache["tau"] = tau
        return rho, tau, (cache if keep_cache else None)

    def forward(self, patch, dropout_rng=None):
        """Single-patch forward; returns HeadOutputs with (M, H, W) / (M*C, H, W)."""
        rho, tau, _ = self.forward_batch(patch[None], dropout_rng=dropout_rng)
        return HeadOutputs(rho=rho[0], tau=tau[0])

    # -- backward ------------------------------------------------------

    def backward_batch(self, cache, d_rho, d_tau):
        """Parameter gradients given head gradients (post-softmax/sigmoid)."""
        cfg = self.config
        p = self.params
        grads = {}
        rho, tau = cache["rho"], cache["tau"]
        d_rho = np.asarray(d_rho, dtype=rho.dtype)
        d_tau = np.asarray(d_tau, dtype=tau.dtype)
        dz_rho = rho * (d_rho - (d_rho * rho).sum(axis=1, keepdims=True))
        dz_tau = d_tau * tau * (1.0 - tau)

        body = cache["body_out"]
        for head, dz in (("head_rho", dz_rho), ("head_tau", dz_tau)):
            dw, db = kernels.conv2d_param_grad(body, dz, 0, 1, 1)
            grads[f"{head}.w"] = dw
            grads[f"{head}.b"] = db
        dh = kernels.conv2d_input_grad(dz_rho, p["head_rho.w"], 0)
        dh += kernels.conv2d_input_grad(dz_tau, p["head_tau.w"], 0)

        def conv_back(name, dy):
            w = p[f"{name}.w"]
            dy = dy * (cache["relu_out"][name] > 0)
            h_in = cache["conv_in"][name]
            pad = w.shape[2] // 2
            dw, db = kernels.conv2d_param_grad(h_in, dy, pad, w.shape[2], w.shape[3])
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return kernels.conv2d_input_grad(dy, w, pad)

        skip_grads = {}
        for l in range(cfg.depth):
            if l in cache["drop"]:
                keep = 1.0 - cfg.dropout_rate
                dh = dh * cache["drop"][l] / keep
            dh = conv_back(f"dec{l}.c2", dh)
            dh = conv_back(f"dec{l}.c1", dh)
            f_l = cfg.base_features * (2 ** l)
            skip_grads[l] = dh[:, :f_l]
            dh = conv_back(f"dec{l}.up", dh[:, f_l:])
            dh = _upsample2_backward(dh)
        dh = conv_back("bot.c2", dh)
        dh = conv_back("bot.c1", dh)
        for l in reversed(range(cfg.depth)):
            idx, in_shape = cache["pool"][l]
            dh = _maxpool2_backward(dh, idx, in_shape) + skip_grads[l]
            dh = conv_back(f"enc{l}.c2", dh)
            dh = conv_back(f"enc{l}.c1", dh)

        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in layer {name}")
        return {name: grads[name] for name in self.params}


def gradients(model, patch, loss_closure, dropout_rng=None):
    """Loss value and parameter gradients for a scalar head-output closure.

    ``loss_closure(HeadOutputs) -> (value, d_rho, d_tau)`` supplies the loss
    and its gradients w.r.t. rho (M, H, W) and tau (M*C, H, W).
    """
    rho, tau, cache = model.forward_batch(patch[None], dropout_rng=dropout_rng, keep_cache=True)
    value, d_rho, d_tau = loss_closure(HeadOutputs(rho=rho[0], tau=tau[0]))
    grads = model.backward_batch(cache, d_rho[None], d_tau[None])
    return value, grads


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian parameter blob
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "checkpoint-v1"


def save_checkpoint(model, path, epoch=None, seed=None):
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "epoch": epoch,
        "seed": seed,
        "dtype": model.config.dtype,
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = b"".join(
        np.ascontiguousarray(v, dtype=np.dtype(model.config.dtype).newbyteorder("<")).tobytes()
        for v in model.params.values()
    )
    with open(str(path) + ".blob", "wb") as fh:
        fh.write(blob)
    with open(path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)


def checkpoint_manifest(path):
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint manifest {path}")
    with open(path, encoding="ascii") as fh:
        return json.load(fh)


def load_checkpoint(path):
    """Rebuild the model from its manifest; forward outputs are bit-exact."""
    manifest = checkpoint_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format")
    cfg_fields = dict(manifest["config"])
    cfg_fields["components_per_class"] = tuple(cfg_fields["components_per_class"])
    config = ModelConfig(**cfg_fields)
    dt = np.dtype(config.dtype).newbyteorder("<")
    blob_path = str(path) + ".blob"
    if not os.path.exists(blob_path):
        raise DataError(f"missing checkpoint blob {blob_path}")
    flat = np.fromfile(blob_path, dtype=dt)
    params = {}
    offset = 0
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise DataError(
                f"{blob_path}: blob too short for layer {layer['name']} "
                f"(need {offset + size} values, have {flat.size})"
            )
        params[layer["name"]] = flat[offset:offset + size].reshape(shape).astype(config.dtype)
        offset += size
    if offset != flat.size:
        raise DataError(f"{blob_path}: {flat.size - offset} trailing values beyond manifest shapes")
    return UNet(config, params)
