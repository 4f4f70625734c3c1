"""Byte-level gated convolutional classifier with hand-derived gradients.

Architecture: byte embedding -> two strided 1D convolutions (ReLU branch and
sigmoid gate) multiplied together -> max over time -> single dense logit ->
sigmoid. Everything is plain numpy; there is no autodiff.

Conv weights are stored flattened as ``[conv_window * embed_dim, num_filters]``
where the row index of a patch element at offset ``j`` and embedding channel
``c`` is ``j * embed_dim + c``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import fix_length
from .errors import ConfigError, DimensionError, UsageError

log = logging.getLogger(__name__)

VOCAB = 256
BCE_CLAMP = 1e-7

PARAM_NAMES = (
    "embedding",
    "conv_a_weight",
    "conv_a_bias",
    "conv_b_weight",
    "conv_b_bias",
    "dense_weight",
    "dense_bias",
)


@dataclass(frozen=True)
class ModelConfig:
    input_length: int
    conv_window: int
    conv_stride: int
    num_filters: int
    embed_dim: int = 8
    vocab: int = VOCAB
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.vocab != VOCAB:
            raise ConfigError(f"vocab must be {VOCAB}, got {self.vocab}", "model.vocab")
        for name in ("input_length", "conv_window", "conv_stride", "num_filters", "embed_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", f"model.{name}")
        if self.conv_window > self.input_length:
            raise ConfigError("conv_window exceeds input_length", "model.conv_window")
        if self.input_length % self.conv_stride:
            raise ConfigError(
                f"input_length {self.input_length} is not a multiple of conv_stride {self.conv_stride}",
                "model.conv_stride",
            )
        if (self.input_length - self.conv_window) % self.conv_stride:
            raise ConfigError("convolution windows do not tile the input", "model.conv_window")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError("must lie in (0, 1)", "model.decision_threshold")

    @property
    def num_positions(self) -> int:
        return (self.input_length - self.conv_window) // self.conv_stride + 1

    @property
    def patch_size(self) -> int:
        return self.conv_window * self.embed_dim

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "model.preset")
        return replace(base, **overrides) if overrides else base

    def with_input_length(self, length: int) -> "ModelConfig":
        return replace(self, input_length=length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


PRESETS = {
    "paper": ModelConfig(input_length=250_000, conv_window=500, conv_stride=500, num_filters=128, embed_dim=8),
    "desk": ModelConfig(input_length=4096, conv_window=32, conv_stride=32, num_filters=16, embed_dim=8),
}


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Model:
    """Parameters, gradient buffers and the config they were built for."""

    def __init__(self, config: ModelConfig, params: dict, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        expected = param_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise DimensionError(f"missing parameters: {sorted(missing)}")
        self.params = {}
        for name in PARAM_NAMES:
            arr = np.asarray(params[name], dtype=self.dtype)
            if arr.shape != expected[name]:
                raise DimensionError(f"{name}: expected shape {expected[name]}, got {arr.shape}")
            self.params[name] = arr
        self.grads = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        self.has_grads = False

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        fan_conv = 1.0 / np.sqrt(config.patch_size)
        fan_dense = 1.0 / np.sqrt(config.num_filters)
        F = config.num_filters
        params = {
            "embedding": rng.uniform(-0.05, 0.05, (config.vocab, config.embed_dim)),
            "conv_a_weight": rng.uniform(-fan_conv, fan_conv, (config.patch_size, F)),
            "conv_a_bias": np.zeros(F),
            "conv_b_weight": rng.uniform(-fan_conv, fan_conv, (config.patch_size, F)),
            "conv_b_bias": np.zeros(F),
            "dense_weight": rng.uniform(-fan_dense, fan_dense, F),
            "dense_bias": np.zeros(1),
        }
        return cls(config, params, dtype=dtype)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        return Model(self.config, self.params, dtype=dtype)

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0)
        self.has_grads = False

    @property
    def embedding(self) -> np.ndarray:
        return self.params["embedding"]

    def __repr__(self):
        c = self.config
        return (
            f"Model(D={c.input_length}, window={c.conv_window}, stride={c.conv_stride}, "
            f"filters={c.num_filters}, embed_dim={c.embed_dim}, dtype={self.dtype.name})"
        )


def param_shapes(config: ModelConfig) -> dict:
    F = config.num_filters
    return {
        "embedding": (config.vocab, config.embed_dim),
        "conv_a_weight": (config.patch_size, F),
        "conv_a_bias": (F,),
        "conv_b_weight": (config.patch_size, F),
        "conv_b_bias": (F,),
        "dense_weight": (F,),
        "dense_bias": (1,),
    }


# ---------------------------------------------------------------------------
# forward / backward


def _as_byte_array(data) -> np.ndarray:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return np.frombuffer(bytes(data), dtype=np.uint8)
    arr = np.asarray(data)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise UsageError("byte values must lie in [0, 255]")
    return arr.astype(np.uint8, copy=False)


def embedding_lookup(data, embedding: np.ndarray, input_length: int | None = None) -> np.ndarray:
    """Gather embedding rows for each byte. ``input_length``, if given, is enforced."""
    x = _as_byte_array(data)
    if input_length is not None and x.shape[-1] != input_length:
        raise DimensionError(f"expected {input_length} bytes, got {x.shape[-1]}")
    return embedding[x]


def _patches(e: np.ndarray, config: ModelConfig) -> np.ndarray:
    # e: [B, D, E] -> [B, T, W*E]
    B = e.shape[0]
    if config.conv_stride == config.conv_window:
        return e.reshape(B, config.num_positions, config.patch_size)
    view = np.lib.stride_tricks.sliding_window_view(e, config.conv_window, axis=1)
    view = view[:, :: config.conv_stride]  # [B, T, E, W]
    return np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(B, config.num_positions, config.patch_size)


def _unpatch(dpatch: np.ndarray, config: ModelConfig) -> np.ndarray:
    # adjoint of _patches
    B = dpatch.shape[0]
    D, E, W, S = config.input_length, config.embed_dim, config.conv_window, config.conv_stride
    if S == W:
        return dpatch.reshape(B, D, E)
    out = np.zeros((B, D, E), dtype=dpatch.dtype)
    blocks = dpatch.reshape(B, config.num_positions, W, E)
    for t in range(config.num_positions):
        out[:, t * S : t * S + W] += blocks[:, t]
    return out


def _check_embedding_shape(e: np.ndarray, config: ModelConfig):
    if e.shape[-2:] != (config.input_length, config.embed_dim):
        raise DimensionError(
            f"embedding input must be [{config.input_length} x {config.embed_dim}], got {list(e.shape)}"
        )


def _forward(e: np.ndarray, model: Model) -> dict:
    p = model.params
    P = _patches(e, model.config)
    a = P @ p["conv_a_weight"] + p["conv_a_bias"]
    g = _sigmoid(P @ p["conv_b_weight"] + p["conv_b_bias"])
    h = np.maximum(a, 0) * g
    idx = h.argmax(axis=1)  # [B, F]
    m = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
    z = m @ p["dense_weight"] + p["dense_bias"][0]
    return {"P": P, "a": a, "g": g, "idx": idx, "m": m, "z": z, "score": _sigmoid(z)}


def _dlogit(score: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # d BCE(clamp(s), y) / dz; zero where the clamp is active
    inside = (score > BCE_CLAMP) & (score < 1.0 - BCE_CLAMP)
    return np.where(inside, score - labels, 0.0).astype(score.dtype)


def _bce(score: np.ndarray, labels: np.ndarray) -> np.ndarray:
    s = np.clip(score, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(labels * np.log(s) + (1.0 - labels) * np.log(1.0 - s))


def _backward(cache: dict, dz: np.ndarray, model: Model, want_params: bool, want_input: bool):
    p = model.params
    B = dz.shape[0]
    idx = cache["idx"]
    rows = np.arange(B)[:, None]
    a_sel = cache["a"][rows, idx, np.arange(idx.shape[1])]
    g_sel = cache["g"][rows, idx, np.arange(idx.shape[1])]
    dm = dz[:, None] * p["dense_weight"][None, :]
    da = dm * g_sel * (a_sel > 0)
    dg = dm * np.maximum(a_sel, 0) * g_sel * (1.0 - g_sel)
    out = {}
    if want_params:
        P_sel = cache["P"][rows, idx]  # [B, F, W*E]
        out["conv_a_weight"] = np.einsum("bfk,bf->kf", P_sel, da)
        out["conv_a_bias"] = da.sum(axis=0)
        out["conv_b_weight"] = np.einsum("bfk,bf->kf", P_sel, dg)
        out["conv_b_bias"] = dg.sum(axis=0)
        out["dense_weight"] = dz @ cache["m"]
        out["dense_bias"] = np.array([dz.sum()], dtype=dz.dtype)
    if want_input:
        dP_sel = da[..., None] * p["conv_a_weight"].T[None] + dg[..., None] * p["conv_b_weight"].T[None]
        dP = np.zeros_like(cache["P"])
        np.add.at(dP, (np.broadcast_to(rows, idx.shape), idx), dP_sel)
        out["input"] = _unpatch(dP, model.config)
    return out


def forward_from_embedding(e: np.ndarray, model: Model) -> float:
    e = np.asarray(e, dtype=model.dtype)
    _check_embedding_shape(e, model.config)
    return float(_forward(e[None], model)["score"][0])


def forward_from_bytes(data, model: Model) -> float:
    x = fix_length(data, model.config.input_length)
    return forward_from_embedding(model.embedding[x], model)


def predict_scores(samples, model: Model, batch_size: int = 64) -> np.ndarray:
    """Scores for many byte sequences at once; each is fixed to the model's length first."""
    D = model.config.input_length
    X = np.stack([fix_length(s, D) for s in samples]) if len(samples) else np.zeros((0, D), np.uint8)
    return _scores_fixed(X, model, batch_size)


def _scores_fixed(X: np.ndarray, model: Model, batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(X), dtype=np.float64)
    for lo in range(0, len(X), batch_size):
        out[lo : lo + batch_size] = _forward(model.embedding[X[lo : lo + batch_size]], model)["score"]
    return out


def predict_label(data, model: Model) -> int:
    return int(forward_from_bytes(data, model) > model.config.decision_threshold)


def grad_wrt_embedding(e: np.ndarray, target_label: int, model: Model) -> np.ndarray:
    """Gradient of BCE(score, target_label) with respect to the embedded input."""
    e = np.asarray(e, dtype=model.dtype)
    _check_embedding_shape(e, model.config)
    cache = _forward(e[None], model)
    dz = _dlogit(cache["score"], np.array([target_label], dtype=model.dtype))
    return _backward(cache, dz, model, want_params=False, want_input=True)["input"][0]


def loss_and_param_gradients(batch, model: Model) -> float:
    """Mean BCE over ``batch`` of ``(bytes, label)`` pairs; fills ``model.grads``."""
    if len(batch) == 0:
        raise UsageError("batch is empty")
    D = model.config.input_length
    X = np.stack([fix_length(x, D) for x, _ in batch])
    y = np.array([label for _, label in batch], dtype=model.dtype)
    return _loss_and_grads_fixed(X, y, model)


def _loss_and_grads_fixed(X: np.ndarray, y: np.ndarray, model: Model) -> float:
    B = len(X)
    e = model.embedding[X]
    cache = _forward(e, model)
    loss = float(_bce(cache["score"], y).mean())
    dz = _dlogit(cache["score"], y) / B
    grads = _backward(cache, dz, model, want_params=True, want_input=True)
    de = grads.pop("input")
    E = model.config.embed_dim
    flat = X.ravel()
    demb = np.empty_like(model.params["embedding"])
    for c in range(E):
        demb[:, c] = np.bincount(flat, weights=de[..., c].ravel(), minlength=VOCAB)
    grads["embedding"] = demb
    for name, g in grads.items():
        model.grads[name][...] = g
    model.has_grads = True
    return loss


def penultimate_features(data, model: Model) -> np.ndarray:
    """Post-max-pool activations, length ``num_filters``."""
    x = fix_length(data, model.config.input_length)
    return _forward(model.embedding[x][None], model)["m"][0].copy()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        state.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        return state


def adam_step(model: Model, state: AdamState):
    if not model.has_grads:
        raise UsageError("adam_step called before any gradient computation")
    if not state.m:
        fresh = AdamState.for_model(model)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, param in model.params.items():
        g = model.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)).astype(param.dtype)
    return model, state


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 1e-3
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise UsageError("validation_fraction must lie in [0, 1)")


TRAINING_PRESETS = {
    "paper": TrainingConfig(epochs=50, batch_size=512),
    "desk": TrainingConfig(epochs=12, batch_size=32, learning_rate=3e-3),
}


def _samples_to_arrays(corpus, D: int):
    xs, ys = [], []
    for item in corpus:
        if hasattr(item, "data"):
            data, label = item.data, item.label
        else:
            data, label = item
        if label not in (0, 1):
            raise UsageError(f"labels must be 0 or 1, got {label!r}")
        xs.append(fix_length(data, D))
        ys.append(label)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def train(
    corpus,
    config: ModelConfig,
    epochs: int = 50,
    batch_size: int = 512,
    seed: int = 0,
    learning_rate: float = 1e-3,
    validation_fraction: float = 0.1,
    dtype=np.float32,
) -> Model:
    """Train from scratch; return the parameters with the best validation accuracy.

    ``corpus`` holds ``ByteFile`` objects or ``(bytes, label)`` pairs. The
    validation split is a seeded shuffle; with no validation samples the final
    epoch's parameters are returned.
    """
    TrainingConfig(epochs, batch_size, learning_rate, validation_fraction)
    if len(corpus) == 0:
        raise UsageError("cannot train on an empty corpus")
    X, y = _samples_to_arrays(corpus, config.input_length)
    rng = np.random.default_rng(seed)
    model = Model.initialize(config, seed=int(rng.integers(2**32)), dtype=dtype)
    if epochs == 0:
        return model

    order = rng.permutation(len(X))
    n_val = int(len(X) * validation_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    y_f = y.astype(model.dtype)
    state = AdamState.for_model(model, learning_rate=learning_rate)
    best, best_key = None, (-1.0, 0.0)
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for lo in range(0, len(perm), batch_size):
            sel = perm[lo : lo + batch_size]
            losses.append(_loss_and_grads_fixed(X[sel], y_f[sel], model))
            adam_step(model, state)
        if n_val:
            scores = _scores_fixed(X[val_idx], model)
            acc = float(np.mean((scores > config.decision_threshold) == y[val_idx]))
            val_loss = float(_bce(scores, y[val_idx]).mean())
            # accuracy first, validation loss breaks ties
            if (acc, -val_loss) > best_key:
                best, best_key = model.copy(), (acc, -val_loss)
            log.info("epoch %d loss %.4f val_acc %.4f val_loss %.4f", epoch + 1, np.mean(losses), acc, val_loss)
        else:
            log.info("epoch %d loss %.4f", epoch + 1, np.mean(losses))
    result = best if best is not None else model
    result.zero_grads()
    return result


def evaluate_accuracy(corpus, model: Model) -> float:
    X, y = _samples_to_arrays(corpus, model.config.input_length)
    scores = _scores_fixed(X, model)
    return float(np.mean((scores > model.config.decision_threshold) == y))
