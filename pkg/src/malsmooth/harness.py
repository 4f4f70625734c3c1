"""Evaluation protocol: accuracy, certified accuracy, evasion tables, reports, feature export.

Every metric is a :class:`ReportRow` holding integer counts. The ``value`` is
always derived as ``numerator / denominator``, so it never drifts from the
counts that produced it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import PatchSpec, UniversalPatch, fgsm_append, pad_random
from .corpus import MALWARE, ByteFile, bytes_addable
from .errors import FeasibilityError, UsageError
from .model import Model, penultimate_features, predict_scores
from .smoothing import SmoothedModel, certify, compute_delta, smoothed_predict_many

log = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "metric", "w", "p", "attack", "numerator", "denominator", "value")
COHORTS = ("clean", "uap", "input-specific")


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    metric: str
    w: int | None
    p: int | None
    attack: str
    numerator: int
    denominator: int

    def __post_init__(self):
        if self.denominator < 0 or not 0 <= self.numerator <= max(self.denominator, 0):
            raise UsageError(f"bad counts {self.numerator}/{self.denominator} for {self.metric}")

    @property
    def value(self) -> float | None:
        """``numerator / denominator``; ``None`` (undefined) when the denominator is zero."""
        return self.numerator / self.denominator if self.denominator else None

    def sort_key(self):
        return (
            self.experiment,
            -1 if self.w is None else self.w,
            -1 if self.p is None else self.p,
            self.attack,
            self.metric,
        )

    def to_record(self) -> dict:
        d = asdict(self)
        d["value"] = self.value
        return d


# ---------------------------------------------------------------------------
# predictors: callables mapping a list of byte strings to an int label array


Predictor = Callable[[Sequence[bytes]], np.ndarray]


def model_predictor(model: Model) -> Predictor:
    def predict(samples):
        scores = predict_scores(list(samples), model)
        return (scores > model.config.decision_threshold).astype(np.int64)

    return predict


def smoothed_predictor(smoothed: SmoothedModel, jobs: int = 1) -> Predictor:
    def predict(samples):
        return np.array([p[0] for p in smoothed_predict_many(list(samples), smoothed, jobs=jobs)], dtype=np.int64)

    return predict


def _data(samples) -> list[bytes]:
    return [s.data for s in samples]


# ---------------------------------------------------------------------------
# metrics


def eval_standard_accuracy(
    samples, predictor: Predictor, experiment: str = "standard", w=None, p=None, attack: str = "none"
) -> ReportRow:
    if len(samples) == 0:
        raise UsageError("cannot evaluate accuracy on an empty set")
    labels = np.array([s.label for s in samples])
    correct = int(np.sum(predictor(_data(samples)) == labels))
    return ReportRow(experiment, "standard_accuracy", w, p, attack, correct, len(samples))


def eval_certified_accuracy(
    samples, smoothed: SmoothedModel, p: int, experiment: str = "certified", attack: str = "none", jobs: int = 1
) -> ReportRow:
    """Correct and certified against any contiguous patch of at most ``p`` bytes."""
    if len(samples) == 0:
        raise UsageError("cannot evaluate certified accuracy on an empty set")
    w = smoothed.ablation.window_size
    delta = compute_delta(p, w)
    preds = smoothed_predict_many(_data(samples), smoothed, jobs=jobs)
    ok = 0
    for s, (label, n_m, n_b) in zip(samples, preds):
        ok += label == s.label and certify(n_m, n_b, delta, s.label).certified
    return ReportRow(experiment, "certified_accuracy", w, p, attack, int(ok), len(samples))


def certification_rows(samples, smoothed: SmoothedModel, p: int, jobs: int = 1) -> list[dict]:
    """Per-sample certificate records: id, true label, prediction, counts, delta, verdict."""
    delta = compute_delta(p, smoothed.ablation.window_size)
    out = []
    for s, (_, n_m, n_b) in zip(samples, smoothed_predict_many(_data(samples), smoothed, jobs=jobs)):
        r = certify(n_m, n_b, delta, s.label)
        out.append(
            {
                "id": s.id,
                "true_label": s.label,
                "prediction": r.prediction,
                "n_m": r.n_m,
                "n_b": r.n_b,
                "delta": r.delta,
                "certified": r.certified,
            }
        )
    return out


# ---------------------------------------------------------------------------
# attacks as evaluated objects


class AppendAttack:
    """Something that appends bytes to a file; ``patch_length`` decides addability."""

    name = "attack"

    def patch_length(self, file: ByteFile) -> int:
        raise NotImplementedError

    def apply(self, file: ByteFile) -> bytes:
        raise NotImplementedError


class FgsmAttack(AppendAttack):
    name = "fgsm"

    def __init__(self, spec: PatchSpec, model: Model):
        self.spec, self.model = spec, model

    def patch_length(self, file):
        return self.spec.patch_length(len(file))

    def apply(self, file):
        return fgsm_append(file, self.spec, self.model).adversarial_file.data


class UapAttack(AppendAttack):
    name = "uap"

    def __init__(self, patch: UniversalPatch):
        self.patch = patch

    def patch_length(self, file):
        return len(self.patch)

    def apply(self, file):
        return file.data + self.patch.patch_bytes


class RandomPadAttack(AppendAttack):
    name = "random"

    def __init__(self, spec: PatchSpec):
        self.spec = spec

    def patch_length(self, file):
        return self.spec.patch_length(len(file))

    def apply(self, file):
        return pad_random(file.data, self.patch_length(file), self.spec.seed)


def eval_evasion(
    samples,
    attack: AppendAttack,
    predictor: Predictor,
    input_length: int,
    experiment: str = "evasion",
    w=None,
    p=None,
    cache: dict | None = None,
) -> tuple[ReportRow, ReportRow]:
    """Evasion over the Bytes Addable cohort of files the predictor flags as malware.

    Returns ``(addable, evasion)``: ``addable`` counts addable files out of the
    total predicted-malware cohort, ``evasion`` counts adversarial files
    predicted benign out of the addable ones. An empty addable cohort gives an
    undefined evasion value rather than an error. ``cache`` (keyed by file id)
    lets callers reuse adversarial bytes across predictors.
    """
    malware = [s for s in samples if s.label == MALWARE]
    if malware:
        flagged = [s for s, y in zip(malware, predictor(_data(malware))) if y == MALWARE]
    else:
        flagged = []
    addable = [s for s in flagged if bytes_addable(s, attack.patch_length(s), input_length)]
    adversarial = []
    for s in addable:
        if cache is not None and s.id in cache:
            adversarial.append(cache[s.id])
            continue
        try:
            adv = attack.apply(s)
        except (FeasibilityError, UsageError) as exc:
            # the attacked model may disagree with the evaluated predictor; the
            # file then stays unmodified and counts as not evaded
            log.info("%s: attack not applied (%s)", s.id, exc)
            adv = s.data
        if cache is not None:
            cache[s.id] = adv
        adversarial.append(adv)
    evaded = int(np.sum(predictor(adversarial) == 0)) if adversarial else 0
    return (
        ReportRow(experiment, "addable", w, p, attack.name, len(addable), len(flagged)),
        ReportRow(experiment, "evasion", w, p, attack.name, evaded, len(addable)),
    )


def certified_grid(samples, smoothed_by_w: dict, patch_sizes, experiment: str = "sweep", jobs: int = 1):
    """Standard and certified accuracy for every ``(w, p)`` cell."""
    rows = []
    for w in sorted(smoothed_by_w):
        sm = smoothed_by_w[w]
        std = eval_standard_accuracy(samples, smoothed_predictor(sm, jobs), experiment, w, None)
        rows.append(std)
        for p in sorted(patch_sizes):
            rows.append(eval_certified_accuracy(samples, sm, p, experiment, jobs=jobs))
    return rows


# ---------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    return "" if v is None else str(v)


def export_report(rows, directory, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.jsonl`` in a deterministic order.

    The CSV ``value`` column is a fraction with four decimals, i.e. a
    percentage with two; the summary file keeps full precision.
    """
    rows = sorted(rows, key=ReportRow.sort_key)
    if not rows:
        raise UsageError("no rows to export")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    csv_path, jsonl_path = root / f"{stem}.csv", root / f"{stem}.jsonl"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in rows:
            value = "" if r.value is None else f"{r.value:.4f}"
            writer.writerow([r.experiment, r.metric, _fmt(r.w), _fmt(r.p), r.attack, r.numerator, r.denominator, value])
    with open(jsonl_path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    return csv_path, jsonl_path


def read_report(path) -> list[ReportRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise UsageError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            exp, metric, w, p, attack, num, den, _ = rec
            rows.append(
                ReportRow(exp, metric, int(w) if w else None, int(p) if p else None, attack, int(num), int(den))
            )
    return rows


def export_features(tagged_samples, model: Model, path) -> Path:
    """One CSV row per ``(sample, cohort)``: id, label, cohort, then the pooled features."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    F = model.config.num_filters
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "cohort"] + [f"f{i}" for i in range(F)])
        for sample, cohort in tagged_samples:
            if cohort not in COHORTS:
                raise UsageError(f"unknown cohort {cohort!r}")
            feats = penultimate_features(sample.data, model)
            writer.writerow([sample.id, sample.label, cohort] + [repr(float(v)) for v in feats])
    return path


# Reference numbers from the original large-scale evaluation. They are reported
# alongside desk results for context and are never used as pass/fail oracles.
REFERENCE_ROWS = (
    ("reference", "evasion", None, 20000, "uap", 8374, 10000),
    ("reference", "evasion", 10000, 20000, "uap", 1935, 10000),
)


def reference_rows() -> list[ReportRow]:
    return [ReportRow(*r) for r in REFERENCE_ROWS]
