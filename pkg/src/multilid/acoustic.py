"""Acoustic network: CNN frontend, FC stack, mean/std temporal pooling.

The network maps a variable-length feature sequence (T x n_mels) to
logits over the training target classes:

  * conv layers, valid on the time axis and same-padded on the frequency
    axis, each followed by ReLU and 1 x freq_pool max pooling on the
    frequency axis only (time length is preserved for pooling);
  * a time-distributed fully connected stack ending in a bottleneck;
  * temporal pooling: per-channel mean and population standard deviation
    concatenated, which collapses time and makes the network accept any
    length above the conv stack's receptive field;
  * one post-pooling FC layer and a linear output layer.

Everything is plain numpy with hand-written gradients; gradient_check
verifies them against central finite differences.  Training is minibatch
SGD with class-specific cross-entropy weights, deterministic given the
seed and data order.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dsp import FeatureSequence
from .errors import BadInputError, CompatibilityError, NumericsError, TooShortError
from .registry import Level, PosteriorVector


MODEL_MAGIC = b"LIDM"
MODEL_VERSION = 1
STD_EPS = 1e-8

Params = dict[str, np.ndarray]


def single_thread_blas():
    """Limit BLAS pools to one thread for the duration of a block.

    The network is many small matmuls; on the typical 2-4 core box the
    thread-pool synchronization costs more than the math.  No-op when
    threadpoolctl is unavailable.
    """
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


@dataclass(frozen=True)
class NetworkConfig:
    n_targets: int
    n_mels: int = 40
    conv_layers: int = 4
    conv_filters: int = 128
    kernel_time: int = 15
    kernel_freq: int = 4
    freq_pool: int = 2
    fc_layers: int = 4
    fc_width: int = 1024
    bottleneck: int = 512
    post_width: int = 1024

    def __post_init__(self):
        for name in (
            "n_targets", "n_mels", "conv_layers", "conv_filters", "kernel_time",
            "kernel_freq", "freq_pool", "fc_layers", "fc_width", "bottleneck",
            "post_width",
        ):
            if getattr(self, name) < 1:
                raise BadInputError(f"{name} must be >= 1")
        if self.freq_trajectory()[-1] < 1:
            raise BadInputError(
                "config yields a non-positive pooled frequency dimension"
            )

    def freq_trajectory(self) -> list[int]:
        """Frequency extent after each conv+pool stage, starting at n_mels."""
        dims = [self.n_mels]
        for _ in range(self.conv_layers):
            dims.append(dims[-1] // self.freq_pool)
        return dims

    @property
    def min_frames(self) -> int:
        """Smallest T for which the valid-time conv stack emits a frame."""
        return self.conv_layers * (self.kernel_time - 1) + 1

    @property
    def flat_dim(self) -> int:
        return self.conv_filters * self.freq_trajectory()[-1]

    def to_dict(self) -> dict:
        return {
            "n_targets": self.n_targets,
            "n_mels": self.n_mels,
            "conv_layers": self.conv_layers,
            "conv_filters": self.conv_filters,
            "kernel_time": self.kernel_time,
            "kernel_freq": self.kernel_freq,
            "freq_pool": self.freq_pool,
            "fc_layers": self.fc_layers,
            "fc_width": self.fc_width,
            "bottleneck": self.bottleneck,
            "post_width": self.post_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def full_config(n_targets: int, n_mels: int = 40) -> NetworkConfig:
    """The production-size architecture (about 8M parameters at 8 targets)."""
    return NetworkConfig(n_targets=n_targets, n_mels=n_mels)


def toy_config(n_targets: int, n_mels: int = 40, **overrides) -> NetworkConfig:
    """Desk-scale architecture used by most tests and experiments."""
    cfg = NetworkConfig(
        n_targets=n_targets,
        n_mels=n_mels,
        conv_layers=2,
        conv_filters=16,
        kernel_time=3,
        kernel_freq=3,
        freq_pool=2,
        fc_layers=2,
        fc_width=64,
        bottleneck=32,
        post_width=64,
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int
    class_weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise BadInputError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise BadInputError("batch_size must be >= 1 and epochs >= 0")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(w <= 0):
                raise BadInputError("class weights must be positive")
            object.__setattr__(self, "class_weights", w)


def _layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their fixed serialization order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = 1
    for i in range(config.conv_layers):
        shapes.append(
            (f"conv{i}.W", (config.conv_filters, c_in, config.kernel_time, config.kernel_freq))
        )
        shapes.append((f"conv{i}.b", (config.conv_filters,)))
        c_in = config.conv_filters
    d = config.flat_dim
    for i in range(config.fc_layers):
        shapes.append((f"fc{i}.W", (d, config.fc_width)))
        shapes.append((f"fc{i}.b", (config.fc_width,)))
        d = config.fc_width
    shapes.append(("bottleneck.W", (d, config.bottleneck)))
    shapes.append(("bottleneck.b", (config.bottleneck,)))
    shapes.append(("post.W", (2 * config.bottleneck, config.post_width)))
    shapes.append(("post.b", (config.post_width,)))
    shapes.append(("out.W", (config.post_width, config.n_targets)))
    shapes.append(("out.b", (config.n_targets,)))
    return shapes


def param_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _layer_shapes(config))


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> Params:
    """Allocate and initialize parameters.

    Weights are uniform in +-sqrt(6 / fan_in); biases start at a small
    positive constant so no ReLU pre-activation sits exactly on the kink
    when an input row happens to be all zeros (exact zeros break both
    learning and finite-difference checks).  Draws happen in the fixed
    serialization order, so the same seed is bit-identical.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".b"):
            params[name] = np.full(shape, 0.01, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    total = sum(p.size for p in params.values())
    assert total == param_count(config)
    return params


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid-time, same-frequency 2-D convolution in (T, F, C) layout.

    The small frequency kernel is unfolded once into a (T, F, kf * C_in)
    matrix; the time kernel then reduces to kt matmuls over contiguous
    row blocks, which keeps everything on the BLAS fast path.
    """
    kt, kf = w.shape[2], w.shape[3]
    c_in, c_out = w.shape[1], w.shape[0]
    t_in, f_dim = x.shape[0], x.shape[1]
    t_out = t_in - kt + 1
    pl, pr = (kf - 1) // 2, kf // 2
    xp = np.pad(x, ((0, 0), (pl, pr), (0, 0)))
    z = np.concatenate([xp[:, j : j + f_dim, :] for j in range(kf)], axis=2)
    # w[o, c, i, j] -> w_mat[i, j * c_in + c, o]
    w_mat = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kt, kf * c_in, c_out)
    out = np.zeros((t_out * f_dim, c_out), dtype=x.dtype)
    for i in range(kt):
        out += z[i : i + t_out].reshape(t_out * f_dim, -1) @ w_mat[i]
    out = out.reshape(t_out, f_dim, c_out)
    out += b
    return out, (z, w_mat, c_in, pl)


def _conv_backward(d_out: np.ndarray, w: np.ndarray, cache):
    z, w_mat, c_in, pl = cache
    kt, kf = w.shape[2], w.shape[3]
    t_out, f_dim, c_out = d_out.shape
    d_mat = d_out.reshape(t_out * f_dim, c_out)
    d_w_mat = np.empty_like(w_mat)
    d_z = np.zeros_like(z)
    for i in range(kt):
        block = z[i : i + t_out].reshape(t_out * f_dim, -1)
        d_w_mat[i] = block.T @ d_mat
        d_z[i : i + t_out] += (d_mat @ w_mat[i].T).reshape(t_out, f_dim, -1)
    d_w = d_w_mat.reshape(kt, kf, c_in, c_out).transpose(3, 2, 0, 1)
    d_b = d_mat.sum(axis=0)
    d_xp = np.zeros((z.shape[0], f_dim + kf - 1, c_in), dtype=d_out.dtype)
    for j in range(kf):
        d_xp[:, j : j + f_dim, :] += d_z[:, :, j * c_in : (j + 1) * c_in]
    return d_xp[:, pl : pl + f_dim, :], np.ascontiguousarray(d_w), d_b


def _pool_freq_forward(x: np.ndarray, pool: int):
    """Max pooling along the frequency axis; a remainder column is dropped."""
    t_dim, f_dim, c_dim = x.shape
    f_out = f_dim // pool
    trimmed = x[:, : f_out * pool, :].reshape(t_dim, f_out, pool, c_dim)
    arg = trimmed.argmax(axis=2)
    out = np.take_along_axis(trimmed, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (arg, x.shape, pool)


def _pool_freq_backward(d_out: np.ndarray, cache):
    arg, x_shape, pool = cache
    t_dim, f_dim, c_dim = x_shape
    f_out = d_out.shape[1]
    d_trimmed = np.zeros((t_dim, f_out, pool, c_dim), dtype=d_out.dtype)
    np.put_along_axis(d_trimmed, arg[:, :, None, :], d_out[:, :, None, :], axis=2)
    d_x = np.zeros(x_shape, dtype=d_out.dtype)
    d_x[:, : f_out * pool, :] = d_trimmed.reshape(t_dim, f_out * pool, c_dim)
    return d_x


def temporal_pool(hidden: np.ndarray) -> np.ndarray:
    """Concatenate per-channel mean and population std over time.

    hidden: (T, D) -> (2 * D,).  The std uses sqrt(var + 1e-8), so a
    constant channel pools to (value, ~0).
    """
    hidden = np.asarray(hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise BadInputError("temporal_pool requires a nonempty (T, D) matrix")
    mu = hidden.mean(axis=0)
    sigma = np.sqrt(((hidden - mu) ** 2).mean(axis=0) + STD_EPS)
    return np.concatenate([mu, sigma])


def _forward_core(params: Params, config: NetworkConfig, x: np.ndarray, keep_cache: bool):
    """Shared forward pass; returns logits and (optionally) the cache."""
    dtype = params["out.W"].dtype
    h = np.ascontiguousarray(x, dtype=dtype)[:, :, None]  # (T, F, 1)
    cache: list = []
    for i in range(config.conv_layers):
        h, conv_cache = _conv_forward(h, params[f"conv{i}.W"], params[f"conv{i}.b"])
        relu_mask = h > 0
        h *= relu_mask
        h, pool_cache = _pool_freq_forward(h, config.freq_pool)
        if keep_cache:
            cache.append(("conv", i, conv_cache, relu_mask, pool_cache))
    t, f, c = h.shape
    h = h.reshape(t, f * c)  # time-distributed, flattened in (freq, channel) order
    if keep_cache:
        cache.append(("flatten", (t, f, c)))
    for i in range(config.fc_layers):
        pre = h @ params[f"fc{i}.W"] + params[f"fc{i}.b"]
        mask = pre > 0
        if keep_cache:
            cache.append(("fc", f"fc{i}", h, mask))
        h = pre * mask
    pre = h @ params["bottleneck.W"] + params["bottleneck.b"]
    mask = pre > 0
    if keep_cache:
        cache.append(("fc", "bottleneck", h, mask))
    h = pre * mask

    mu = h.mean(axis=0)
    centered = h - mu
    sigma = np.sqrt((centered**2).mean(axis=0) + STD_EPS)
    pooled = np.concatenate([mu, sigma])
    if keep_cache:
        cache.append(("pool", h.shape[0], centered, sigma))

    pre = pooled @ params["post.W"] + params["post.b"]
    mask = pre > 0
    if keep_cache:
        cache.append(("fc1d", "post", pooled, mask))
    z = pre * mask
    logits = z @ params["out.W"] + params["out.b"]
    if keep_cache:
        cache.append(("out", z))
    return logits.astype(np.float64), cache


def forward(
    params: Params, config: NetworkConfig, features: FeatureSequence
) -> tuple[np.ndarray, PosteriorVector]:
    """Logits and softmax posterior over target classes for one utterance."""
    if features.n_frames < config.min_frames:
        raise TooShortError(
            f"need at least {config.min_frames} frames, got {features.n_frames}"
        )
    if features.n_dims != config.n_mels:
        raise BadInputError(
            f"model expects {config.n_mels}-dim features, got {features.n_dims}"
        )
    logits, _ = _forward_core(params, config, features.frames, keep_cache=False)
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    return logits, PosteriorVector(Level.TARGET_CLASS, p)


def _backward_core(
    params: Params, config: NetworkConfig, cache: list, d_logits: np.ndarray
) -> Params:
    dtype = params["out.W"].dtype
    grads: Params = {}
    d_logits = d_logits.astype(dtype)

    tag = cache.pop()
    assert tag[0] == "out"
    z = tag[1]
    grads["out.W"] = np.outer(z, d_logits)
    grads["out.b"] = d_logits.copy()
    d = d_logits @ params["out.W"].T

    tag = cache.pop()
    assert tag[0] == "fc1d"
    _, name, pooled, mask = tag
    d = d * mask
    grads[f"{name}.W"] = np.outer(pooled, d)
    grads[f"{name}.b"] = d.copy()
    d = d @ params[f"{name}.W"].T

    tag = cache.pop()
    assert tag[0] == "pool"
    _, t, centered, sigma = tag
    width = centered.shape[1]
    d_mu, d_sigma = d[:width], d[width:]
    d = d_mu[None, :] / t + d_sigma[None, :] * centered / (t * sigma[None, :])

    while cache and cache[-1][0] == "fc":
        _, name, inp, mask = cache.pop()
        d = d * mask
        grads[f"{name}.W"] = inp.T @ d
        grads[f"{name}.b"] = d.sum(axis=0)
        d = d @ params[f"{name}.W"].T

    tag = cache.pop()
    assert tag[0] == "flatten"
    t, f, c = tag[1]
    d = d.reshape(t, f, c)

    for entry in reversed(cache):
        _, i, conv_cache, relu_mask, pool_cache = entry
        d = _pool_freq_backward(d, pool_cache)
        d = d * relu_mask
        d, d_w, d_b = _conv_backward(d, params[f"conv{i}.W"], conv_cache)
        grads[f"conv{i}.W"] = d_w
        grads[f"conv{i}.b"] = d_b
    return grads


def loss_and_grads(
    params: Params,
    config: NetworkConfig,
    features: FeatureSequence,
    target: int,
    weight: float = 1.0,
) -> tuple[float, Params]:
    """Weighted cross-entropy loss and its gradient for one sample."""
    if features.n_frames < config.min_frames:
        raise TooShortError(
            f"need at least {config.min_frames} frames, got {features.n_frames}"
        )
    logits, cache = _forward_core(params, config, features.frames, keep_cache=True)
    shifted = logits - logits.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = weight * (log_norm - shifted[target])
    p = np.exp(shifted - log_norm)
    d_logits = weight * p
    d_logits[target] -= weight
    grads = _backward_core(params, config, cache, d_logits)
    return float(loss), grads


def class_weights(labels: Iterable[int], n_classes: int) -> np.ndarray:
    """Inverse-frequency class weights, normalized to mean 1.

    Every class must appear at least once (a class the model can never
    see has no meaningful weight).
    """
    counts = np.bincount(np.asarray(list(labels), dtype=np.int64), minlength=n_classes)
    if len(counts) > n_classes:
        raise BadInputError("label id outside the class range")
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise BadInputError(f"class {empty} has no samples")
    w = 1.0 / counts
    return w / w.mean()


def train(
    params: Params,
    config: NetworkConfig,
    dataset: Sequence[tuple[FeatureSequence, int]],
    hyper: TrainHyper,
) -> tuple[Params, list[float]]:
    """Minibatch SGD on weighted cross-entropy.

    Returns updated parameters and the mean sample loss per epoch.  The
    run is a pure function of (params, dataset order, hyper.seed): the
    shuffle RNG is seeded and batch gradients average in a fixed order.
    """
    if not dataset:
        raise BadInputError("training dataset is empty")
    weights = hyper.class_weights
    if weights is None:
        weights = np.ones(config.n_targets)
    params = {k: v.copy() for k, v in params.items()}
    rng = np.random.default_rng(hyper.seed)
    history: list[float] = []
    n = len(dataset)
    with single_thread_blas():
        _train_epochs(params, config, dataset, hyper, weights, rng, history, n)
    return params, history


def _train_epochs(params, config, dataset, hyper, weights, rng, history, n) -> None:
    for _epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            acc: Params = {}
            for idx in batch:
                feats, target = dataset[int(idx)]
                loss, grads = loss_and_grads(
                    params, config, feats, target, float(weights[target])
                )
                if not np.isfinite(loss):
                    raise NumericsError(
                        f"non-finite loss {loss} at epoch {_epoch}, sample {int(idx)}"
                    )
                epoch_loss += loss
                for name, g in grads.items():
                    if name in acc:
                        acc[name] += g
                    else:
                        acc[name] = g
            scale = hyper.learning_rate / len(batch)
            for name, g in acc.items():
                params[name] -= (scale * g).astype(params[name].dtype)
        history.append(epoch_loss / n)


def gradient_check(
    config: NetworkConfig,
    features: FeatureSequence,
    target: int,
    seed: int,
    weight: float = 1.0,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a freshly initialized network; intended for toy
    configs where perturbing every parameter is affordable.
    """
    params = build_network(config, seed, dtype=np.float64)
    _, grads = loss_and_grads(params, config, features, target, weight)
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        g_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            up, _ = _loss_only(params, config, features, target, weight)
            flat[i] = saved - epsilon
            down, _ = _loss_only(params, config, features, target, weight)
            flat[i] = saved
            numeric = (up - down) / (2 * epsilon)
            denom = max(abs(numeric), abs(g_flat[i]), 1e-8)
            worst = max(worst, abs(numeric - g_flat[i]) / denom)
    return worst


def _loss_only(params, config, features, target, weight):
    logits, _ = _forward_core(params, config, features.frames, keep_cache=False)
    shifted = logits - logits.max()
    log_norm = np.log(np.exp(shifted).sum())
    return weight * (log_norm - shifted[target]), logits


def save_model(
    path,
    config: NetworkConfig,
    params: Params,
    class_names: Sequence[str],
    locale_to_class: Sequence[int],
    class_to_language: Sequence[int],
    registry_pairs: Sequence[tuple[str, str]],
    scheme_kind: str,
    meta: dict | None = None,
) -> None:
    """Serialize config, scheme tables and float32 tensors.

    Layout: magic, version u16, u32 JSON header length, JSON header,
    then per tensor: u16 name length, name, u8 ndim, u32 dims, f32 LE data.
    """
    header = {
        "config": config.to_dict(),
        "class_names": list(class_names),
        "locale_to_class": [int(i) for i in locale_to_class],
        "class_to_language": [int(i) for i in class_to_language],
        "registry": [[loc, lang] for loc, lang in registry_pairs],
        "scheme_kind": scheme_kind,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", MODEL_VERSION, len(blob)))
    buf.write(blob)
    for name, _shape in _layer_shapes(config):
        tensor = np.ascontiguousarray(params[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    """Inverse of save_model; returns (config, params, header dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise BadInputError(f"{path}: not a model file (bad magic)")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != MODEL_VERSION:
        raise CompatibilityError(f"{path}: unsupported model version {version}")
    header = json.loads(data[10 : 10 + header_len].decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    offset = 10 + header_len
    params: Params = {}
    for expected_name, shape in _layer_shapes(config):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        count = int(np.prod(dims))
        tensor = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        if name != expected_name or tuple(dims) != shape:
            raise CompatibilityError(f"{path}: tensor {name} does not match config")
        params[name] = tensor.reshape(dims).astype(np.float32)
    return config, params, header
