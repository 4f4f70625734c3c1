"""Byte-file ingestion, synthetic corpora, manifests and splits."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, IntegrityError, UsageError

BENIGN, MALWARE = 0, 1
LABEL_DIRS = {BENIGN: "benign", MALWARE: "malware"}
MANIFEST_NAME = "manifest.jsonl"
MZ = b"MZ"


@dataclass(frozen=True)
class ByteFile:
    id: str
    data: bytes
    label: int
    source: str = "synthetic"

    def __post_init__(self):
        if len(self.data) < 1:
            raise UsageError(f"{self.id}: byte file is empty")
        if self.label not in (BENIGN, MALWARE):
            raise UsageError(f"{self.id}: label must be 0 or 1, got {self.label!r}")
        if self.source not in ("disk", "synthetic"):
            raise UsageError(f"{self.id}: unknown source {self.source!r}")

    def __len__(self):
        return len(self.data)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


def fix_length(data, length: int) -> np.ndarray:
    """Truncate to ``length`` bytes or zero-pad at the end. Returns uint8."""
    if isinstance(data, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(bytes(data[:length]), dtype=np.uint8)
    else:
        arr = np.asarray(data)[:length]
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise UsageError("byte values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
    if len(arr) == length:
        return arr
    out = np.zeros(length, dtype=np.uint8)
    out[: len(arr)] = arr
    return out


def load_and_fix_length(path, length: int) -> tuple[bytes, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw:
        raise UsageError(f"{path}: file is empty")
    return raw, fix_length(raw, length)


def bytes_addable(file, patch_len: int, input_length: int) -> bool:
    """True when ``patch_len`` appended bytes still fall inside the model input."""
    if patch_len < 1:
        raise UsageError(f"patch length must be >= 1, got {patch_len}")
    k = len(file.data) if hasattr(file, "data") else len(file)
    return k + patch_len <= input_length


# ---------------------------------------------------------------------------
# synthetic corpus

DEFAULT_MOTIF_BENIGN = bytes.fromhex("2e74657874000000e8a1b2c3d4c3cc90")
DEFAULT_MOTIF_MALWARE = bytes.fromhex("558bec83ec40535657fc31c0648b4030")


@dataclass(frozen=True)
class SyntheticSpec:
    num_benign: int = 1000
    num_malware: int = 1000
    length_min: int = 1024
    length_max: int = 4096
    motif_benign: bytes = DEFAULT_MOTIF_BENIGN
    motif_malware: bytes = DEFAULT_MOTIF_MALWARE
    motifs_per_file: int = 8
    seed: int = 0
    # Fraction of background bytes redrawn from [low_byte_floor, low_byte_ceiling). Packed or
    # obfuscated payloads skew byte statistics; this gives malware a diffuse
    # class signal besides the motif, so the model does not rely on motifs alone.
    # The floor starts at 1 so that 0x00, the padding byte, stays class-neutral.
    low_fraction_benign: float = 0.0
    low_fraction_malware: float = 0.2
    low_byte_floor: int = 1
    low_byte_ceiling: int = 16

    def __post_init__(self):
        if self.num_benign < 0 or self.num_malware < 0:
            raise UsageError("file counts must be non-negative")
        if self.length_min < len(MZ) + 1 or self.length_max < self.length_min:
            raise UsageError(f"bad length bounds [{self.length_min}, {self.length_max}]")
        for name in ("motif_benign", "motif_malware"):
            motif = getattr(self, name)
            if not motif:
                raise UsageError(f"{name} is empty")
            if len(motif) > self.length_min - len(MZ):
                raise UsageError(f"{name} ({len(motif)} bytes) does not fit in length_min={self.length_min}")
        if self.motifs_per_file < 0:
            raise UsageError("motifs_per_file must be non-negative")
        for name in ("low_fraction_benign", "low_fraction_malware"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1]")
        if not 0 <= self.low_byte_floor < self.low_byte_ceiling <= 256:
            raise UsageError("need 0 <= low_byte_floor < low_byte_ceiling <= 256")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motif_benign"] = self.motif_benign.hex()
        d["motif_malware"] = self.motif_malware.hex()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        for name in ("motif_benign", "motif_malware"):
            if isinstance(data.get(name), str):
                data[name] = bytes.fromhex(data[name])
        return cls(**data)


def _synth_file(rng: np.random.Generator, spec: SyntheticSpec, motif: bytes, low_fraction: float) -> bytes:
    k = int(rng.integers(spec.length_min, spec.length_max + 1))
    buf = rng.integers(0, 256, size=k, dtype=np.uint8)
    if low_fraction > 0:
        mask = rng.random(k) < low_fraction
        buf[mask] = rng.integers(spec.low_byte_floor, spec.low_byte_ceiling, size=int(mask.sum()), dtype=np.uint8)
    buf[: len(MZ)] = np.frombuffer(MZ, dtype=np.uint8)
    m = np.frombuffer(motif, dtype=np.uint8)
    for off in rng.integers(len(MZ), k - len(m) + 1, size=spec.motifs_per_file):
        buf[off : off + len(m)] = m
    return buf.tobytes()


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[ByteFile]:
    """Benign files first, then malware; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    files = []
    for label, count, motif, low in (
        (BENIGN, spec.num_benign, spec.motif_benign, spec.low_fraction_benign),
        (MALWARE, spec.num_malware, spec.motif_malware, spec.low_fraction_malware),
    ):
        for i in range(count):
            data = _synth_file(rng, spec, motif, low)
            files.append(ByteFile(f"{LABEL_DIRS[label]}_{i:05d}", data, label))
    return files


# ---------------------------------------------------------------------------
# on-disk corpus + manifest


def write_corpus(directory, files, overwrite: bool = False) -> Path:
    """Write files under ``benign/`` and ``malware/`` and emit the manifest."""
    root = Path(directory)
    for sub in LABEL_DIRS.values():
        (root / sub).mkdir(parents=True, exist_ok=True)
    for f in files:
        path = root / LABEL_DIRS[f.label] / f"{f.id}.bin"
        if path.exists() and not overwrite:
            raise FileExistsError(f"{path} exists; pass overwrite to replace it")
        path.write_bytes(f.data)
    return write_manifest(root)


def write_manifest(directory) -> Path:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    entries, seen = [], set()
    for label, sub in sorted(LABEL_DIRS.items()):
        d = root / sub
        if not d.is_dir():
            continue
        for path in sorted(d.iterdir()):
            if not path.is_file():
                continue
            data = path.read_bytes()
            fid = path.stem
            if fid in seen:
                raise FormatError(f"duplicate file id {fid!r}")
            seen.add(fid)
            entries.append(
                {
                    "id": fid,
                    "path": f"{sub}/{path.name}",
                    "label": label,
                    "length": len(data),
                    "sha256": hashlib.sha256(data).hexdigest(),
                }
            )
    out = root / MANIFEST_NAME
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return out


MANIFEST_FIELDS = {"id", "path", "label", "length", "sha256"}


def read_manifest_entries(directory) -> list[dict]:
    path = Path(directory) / MANIFEST_NAME
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if set(entry) != MANIFEST_FIELDS:
                raise FormatError(f"{path}:{lineno}: fields must be {sorted(MANIFEST_FIELDS)}")
            if entry["id"] in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {entry['id']!r}")
            seen.add(entry["id"])
            entries.append(entry)
    return entries


def iter_manifest(directory) -> Iterator[ByteFile]:
    """Yield files listed in the manifest, verifying each digest as it is read."""
    root = Path(directory)
    for entry in read_manifest_entries(root):
        data = (root / entry["path"]).read_bytes()
        if len(data) != entry["length"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"digest mismatch for {entry['id']} ({entry['path']})")
        yield ByteFile(entry["id"], data, entry["label"], source="disk")


def load_corpus(directory) -> list[ByteFile]:
    return list(iter_manifest(directory))


def read_byte_file(path, label: int) -> ByteFile:
    raw = Path(path).read_bytes()
    if not raw:
        raise UsageError(f"{path}: file is empty")
    return ByteFile(Path(path).stem, raw, label, source="disk")


# ---------------------------------------------------------------------------
# splits


def split_corpus(corpus, fractions, seed: int) -> list[list]:
    """Seeded shuffle, then contiguous slices of ``floor(f * n)`` items each.

    When the fractions sum to one, flooring leftovers go to the last subset.
    """
    fractions = list(fractions)
    if not fractions or any(f <= 0 for f in fractions):
        raise UsageError("fractions must be positive")
    total = sum(fractions)
    if total > 1.0 + 1e-9:
        raise UsageError(f"fractions sum to {total} > 1")
    items = list(corpus)
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    sizes = [int(math.floor(f * n + 1e-9)) for f in fractions]
    if math.isclose(total, 1.0):
        sizes[-1] = n - sum(sizes[:-1])
    out, lo = [], 0
    for size in sizes:
        out.append([items[i] for i in order[lo : lo + size]])
        lo += size
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
