"""Append-only adversarial patches: per-file iterated FGSM and universal patches.

All optimisation happens in embedding space. Only the rows holding appended
bytes are ever modified; the result is projected back to bytes with a
nearest-neighbour lookup against the model's embedding table.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BENIGN, ByteFile, bytes_addable, fix_length
from .errors import FeasibilityError, FormatError, UsageError
from .model import Model, forward_from_bytes, grad_wrt_embedding

log = logging.getLogger(__name__)

_MAPPING_CHUNK = 4096


@dataclass(frozen=True)
class PatchSpec:
    size_mode: str = "percent_of_file"
    size_value: float = 1.0
    epsilon: float = 0.5
    iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.size_mode not in ("absolute_bytes", "percent_of_file"):
            raise UsageError(f"unknown size_mode {self.size_mode!r}")
        if not self.size_value > 0:
            raise UsageError("size_value must be positive")
        if not self.epsilon > 0:
            raise UsageError("epsilon must be positive")
        if self.iterations < 1:
            raise UsageError("iterations must be >= 1")

    def patch_length(self, file_length: int) -> int:
        if self.size_mode == "absolute_bytes":
            n = int(self.size_value)
        else:
            n = math.ceil(self.size_value * file_length / 100.0)
        if n < 1:
            raise UsageError(f"resolved patch length {n} < 1")
        return n


@dataclass
class AttackResult:
    adversarial_file: ByteFile
    patch_bytes: bytes
    score_before: float
    score_after: float
    evaded: bool


@dataclass
class UniversalPatch:
    patch_bytes: bytes
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.patch_bytes) < 1:
            raise UsageError("a universal patch needs at least one byte")

    def __len__(self):
        return len(self.patch_bytes)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.patch_bytes)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "UniversalPatch":
        path = Path(path)
        data = path.read_bytes()
        sidecar = path.with_suffix(path.suffix + ".json")
        provenance = {}
        if sidecar.exists():
            try:
                provenance = json.loads(sidecar.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{sidecar}: {exc}") from None
        if not data:
            raise FormatError(f"{path}: empty patch file")
        return cls(data, provenance)


def pad_random(data: bytes, num_bytes: int, seed: int, input_length: int | None = None) -> bytes:
    """Append ``num_bytes`` seeded-uniform random bytes."""
    if num_bytes < 1:
        raise UsageError(f"num_bytes must be >= 1, got {num_bytes}")
    if input_length is not None and not bytes_addable(data, num_bytes, input_length):
        raise FeasibilityError(f"{len(data)} + {num_bytes} bytes exceed input length {input_length}")
    rng = np.random.default_rng(seed)
    return bytes(data) + rng.integers(0, 256, size=num_bytes, dtype=np.uint8).tobytes()


def gradient_attack_step(e: np.ndarray, epsilon: float, model: Model, target_label: int = BENIGN) -> np.ndarray:
    """One signed-gradient step descending BCE toward ``target_label``."""
    grad = grad_wrt_embedding(e, target_label, model)
    return e - epsilon * np.sign(grad)


def embedding_mapping(rows: np.ndarray, table: np.ndarray) -> bytes:
    """Nearest byte (L2) for each row; ties go to the smaller byte value."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    table = np.asarray(table, dtype=np.float64)
    out = np.empty(len(rows), dtype=np.uint8)
    for lo in range(0, len(rows), _MAPPING_CHUNK):
        chunk = rows[lo : lo + _MAPPING_CHUNK]
        # explicit differences keep exact matches at distance exactly zero
        dist = ((chunk[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
        out[lo : lo + len(chunk)] = dist.argmin(axis=1)
    return out.tobytes()


def _perturb_patch_rows(
    file_bytes: bytes, patch_rows: np.ndarray, epsilon: float, iterations: int, model: Model
) -> np.ndarray:
    """Run FGSM on the rows appended after ``file_bytes``; other rows stay fixed."""
    k, n = len(file_bytes), len(patch_rows)
    e = model.embedding[fix_length(file_bytes, model.config.input_length)].copy()
    e[k : k + n] = patch_rows
    for _ in range(iterations):
        step = gradient_attack_step(e, epsilon, model)
        e[k : k + n] = step[k : k + n]
    return e[k : k + n].copy()


def _malware_score(file: ByteFile, model: Model) -> float:
    return forward_from_bytes(file.data, model)


def fgsm_append(file: ByteFile, spec: PatchSpec, model: Model) -> AttackResult:
    """Input-specific append attack: random pad, iterated FGSM on the pad, map back to bytes."""
    D = model.config.input_length
    threshold = model.config.decision_threshold
    n = spec.patch_length(len(file))
    if not bytes_addable(file, n, D):
        raise FeasibilityError(f"{file.id}: {len(file)} + {n} bytes exceed input length {D}")
    score_before = _malware_score(file, model)
    if score_before <= threshold:
        raise UsageError(f"{file.id}: model does not predict malware (score {score_before:.4f})")
    padded = pad_random(file.data, n, spec.seed, D)
    init_rows = model.embedding[np.frombuffer(padded[len(file) :], dtype=np.uint8)]
    rows = _perturb_patch_rows(file.data, init_rows, spec.epsilon, spec.iterations, model)
    patch = embedding_mapping(rows, model.embedding)
    adv = ByteFile(file.id, file.data + patch, file.label, file.source)
    score_after = forward_from_bytes(adv.data, model)
    return AttackResult(adv, patch, score_before, score_after, score_after <= threshold)


def build_universal_patch(
    generation_set, num_bytes: int, epsilon: float, iterations: int, seed: int, model: Model
) -> UniversalPatch:
    """Average per-file FGSM perturbations of one shared random patch embedding."""
    if len(generation_set) == 0:
        raise UsageError("generation set is empty")
    if num_bytes < 1:
        raise UsageError(f"num_bytes must be >= 1, got {num_bytes}")
    if iterations < 1 or not epsilon > 0:
        raise UsageError("need iterations >= 1 and epsilon > 0")
    D = model.config.input_length
    rng = np.random.default_rng(seed)
    e_init = model.embedding[rng.integers(0, 256, size=num_bytes, dtype=np.uint8)].astype(np.float64)
    total = np.zeros_like(e_init)
    used = []
    for f in generation_set:
        if not bytes_addable(f, num_bytes, D):
            log.warning("skipping %s: %d + %d bytes exceed input length %d", f.id, len(f), num_bytes, D)
            continue
        if _malware_score(f, model) <= model.config.decision_threshold:
            log.warning("skipping %s: not predicted malware", f.id)
            continue
        total += _perturb_patch_rows(f.data, e_init.astype(model.dtype), epsilon, iterations, model)
        used.append(f)
    if not used:
        raise FeasibilityError("no file in the generation set is usable for the universal patch")
    e_universal = total / len(used)
    patch = embedding_mapping(e_universal, model.embedding)
    provenance = {
        "num_bytes": num_bytes,
        "epsilon": epsilon,
        "iterations": iterations,
        "seed": seed,
        "generation_set": [{"id": f.id, "sha256": f.sha256} for f in used],
        "skipped": len(generation_set) - len(used),
    }
    return UniversalPatch(patch, provenance)


def apply_patch(file: ByteFile, patch: UniversalPatch, input_length: int | None = None) -> ByteFile:
    if len(patch.patch_bytes) < 1:
        raise UsageError("empty patch")
    if input_length is not None and not bytes_addable(file, len(patch), input_length):
        raise FeasibilityError(f"{file.id}: {len(file)} + {len(patch)} bytes exceed input length {input_length}")
    return ByteFile(file.id, file.data + patch.patch_bytes, file.label, file.source)


def patch_spec_dict(spec: PatchSpec) -> dict:
    return asdict(spec)
