"""De-randomized smoothing over byte windows.

The fixed-length input is cut into ``L / w`` disjoint windows. Window ``i`` is
classified by its own base model, and the smoothed label is the majority vote
(ties go to malware). A contiguous patch of ``p`` bytes touches at most
``ceil(p / w) + 1`` windows, which yields the vote-margin certificate in
:func:`certify`.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import BENIGN, MALWARE, fix_length
from .errors import ConfigError, FormatError, MalsmoothError, UsageError
from .model import Model, ModelConfig, TrainingConfig, _scores_fixed, train

log = logging.getLogger(__name__)

ABLATION_FILE = "ablation.cfg"


@dataclass(frozen=True)
class AblationConfig:
    window_size: int
    input_length: int
    assumed_patch_size: int = 1

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError("must be >= 1", "smoothing.window_size")
        if self.input_length < 1:
            raise ConfigError("must be >= 1", "smoothing.input_length")
        if self.input_length % self.window_size:
            raise ConfigError(
                f"input length {self.input_length} is not divisible by window size {self.window_size}",
                "smoothing.window_size",
            )
        if self.assumed_patch_size < 1:
            raise ConfigError("must be >= 1", "smoothing.assumed_patch_size")

    @property
    def num_windows(self) -> int:
        return self.input_length // self.window_size

    @property
    def delta(self) -> int:
        return compute_delta(self.assumed_patch_size, self.window_size)


def compute_delta(p: int, w: int) -> int:
    """Most windows of width ``w`` a contiguous ``p``-byte patch can overlap."""
    if p < 1 or w < 1:
        raise UsageError("patch and window sizes must be >= 1")
    return -(-p // w) + 1


def window_ablate(data, w: int) -> list[np.ndarray]:
    x = np.asarray(data) if not isinstance(data, (bytes, bytearray)) else np.frombuffer(bytes(data), np.uint8)
    if w < 1 or len(x) % w:
        raise ConfigError(f"length {len(x)} is not divisible by window size {w}", "smoothing.window_size")
    return [x[i : i + w] for i in range(0, len(x), w)]


@dataclass(frozen=True)
class CertificationResult:
    prediction: int
    n_m: int
    n_b: int
    delta: int
    certified: bool


class SmoothedModel:
    def __init__(self, ablation: AblationConfig, base_models: list[Model]):
        if len(base_models) != ablation.num_windows:
            raise ConfigError(
                f"expected {ablation.num_windows} base models, got {len(base_models)}", "smoothing.window_size"
            )
        for i, m in enumerate(base_models):
            if m.config.input_length != ablation.window_size:
                raise ConfigError(
                    f"base model {i} has input length {m.config.input_length}, expected {ablation.window_size}",
                    "smoothing.window_size",
                )
        self.ablation = ablation
        self.base_models = list(base_models)

    @property
    def num_windows(self) -> int:
        return self.ablation.num_windows

    def with_patch_size(self, p: int) -> "SmoothedModel":
        ab = AblationConfig(self.ablation.window_size, self.ablation.input_length, p)
        return SmoothedModel(ab, self.base_models)

    def save(self, directory, overwrite: bool = False) -> Path:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        cfg = root / ABLATION_FILE
        if cfg.exists() and not overwrite:
            raise FileExistsError(f"{cfg} exists; pass overwrite to replace it")
        cfg.write_text(json.dumps(asdict(self.ablation), sort_keys=True) + "\n", encoding="utf-8")
        for i, m in enumerate(self.base_models):
            save_checkpoint(m, root / f"base_{i:03d}.smcv")
        return root

    @classmethod
    def load(cls, directory) -> "SmoothedModel":
        root = Path(directory)
        try:
            raw = json.loads((root / ABLATION_FILE).read_text(encoding="utf-8"))
            ablation = AblationConfig(
                window_size=raw["window_size"],
                input_length=raw["input_length"],
                assumed_patch_size=raw["assumed_patch_size"],
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{root / ABLATION_FILE}: {exc}") from None
        models = [load_checkpoint(root / f"base_{i:03d}.smcv") for i in range(ablation.num_windows)]
        return cls(ablation, models)


def _map_positions(fn, n: int, jobs: int) -> list:
    """``[fn(0), ..., fn(n-1)]``, run on up to ``jobs`` threads; order is preserved."""
    if jobs <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(jobs, n)) as pool:
        return list(pool.map(fn, range(n)))


def _window_seed(seed: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def train_smoothed(
    corpus,
    ablation: AblationConfig,
    base_config: ModelConfig,
    training: TrainingConfig = TrainingConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> SmoothedModel:
    """One base model per window position, each trained on that window with the file's label.

    Position ``i`` is seeded from ``(seed, i)`` alone, so results do not depend on ``jobs``.
    """
    if len(corpus) == 0:
        raise UsageError("cannot train on an empty corpus")
    base_config = base_config.with_input_length(ablation.window_size)
    L, w = ablation.input_length, ablation.window_size
    X = np.stack([fix_length(f.data if hasattr(f, "data") else f[0], L) for f in corpus])
    labels = [f.label if hasattr(f, "label") else f[1] for f in corpus]

    def fit(i):
        windows = [(X[j, i * w : (i + 1) * w], labels[j]) for j in range(len(X))]
        try:
            m = train(
                windows,
                base_config,
                epochs=training.epochs,
                batch_size=training.batch_size,
                seed=_window_seed(seed, i),
                learning_rate=training.learning_rate,
                validation_fraction=training.validation_fraction,
            )
        except MalsmoothError as exc:
            raise type(exc)(f"window position {i}: {exc}") from exc
        log.info("trained base model %d/%d", i + 1, ablation.num_windows)
        return m

    return SmoothedModel(ablation, _map_positions(fit, ablation.num_windows, jobs))


def window_votes(samples, smoothed: SmoothedModel, jobs: int = 1) -> np.ndarray:
    """Per-window malware votes, shape ``[n_samples, num_windows]`` of 0/1."""
    L, w = smoothed.ablation.input_length, smoothed.ablation.window_size
    X = np.stack([fix_length(s, L) for s in samples]) if len(samples) else np.zeros((0, L), np.uint8)
    votes = np.zeros((len(X), smoothed.num_windows), dtype=np.int64)

    def vote(i):
        m = smoothed.base_models[i]
        return _scores_fixed(np.ascontiguousarray(X[:, i * w : (i + 1) * w]), m) > m.config.decision_threshold

    for i, col in enumerate(_map_positions(vote, smoothed.num_windows, jobs)):
        votes[:, i] = col
    return votes


def vote_label(n_m: int, n_b: int) -> int:
    return MALWARE if n_m >= n_b else BENIGN


def smoothed_predict(data, smoothed: SmoothedModel) -> tuple[int, int, int]:
    votes = window_votes([data], smoothed)[0]
    n_m = int(votes.sum())
    n_b = smoothed.num_windows - n_m
    return vote_label(n_m, n_b), n_m, n_b


def smoothed_predict_many(samples, smoothed: SmoothedModel, jobs: int = 1) -> list[tuple[int, int, int]]:
    votes = window_votes(samples, smoothed, jobs)
    out = []
    for row in votes:
        n_m = int(row.sum())
        n_b = smoothed.num_windows - n_m
        out.append((vote_label(n_m, n_b), n_m, n_b))
    return out


def certify(n_m: int, n_b: int, delta: int, true_label: int) -> CertificationResult:
    """Vote-margin certificate: the true class must lead by more than ``2 * delta``."""
    if n_m < 0 or n_b < 0:
        raise UsageError("vote counts must be non-negative")
    if true_label == MALWARE:
        ok = n_m > n_b + 2 * delta
    elif true_label == BENIGN:
        ok = n_b > n_m + 2 * delta
    else:
        raise UsageError(f"true_label must be 0 or 1, got {true_label!r}")
    return CertificationResult(vote_label(n_m, n_b), n_m, n_b, delta, ok)
