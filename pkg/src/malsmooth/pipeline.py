"""End-to-end evaluation run: corpus, training, attacks, smoothing, reports.

Every step draws its seed from one named stream of the run's global seed, so
a run is a pure function of its configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import PatchSpec, UniversalPatch, build_universal_patch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CliConfig, dump_config
from .corpus import MALWARE, ByteFile, generate_synthetic_corpus, load_corpus, split_corpus, write_corpus
from .errors import UsageError
from .harness import (
    FgsmAttack,
    RandomPadAttack,
    UapAttack,
    certification_rows,
    certified_grid,
    eval_certified_accuracy,
    eval_evasion,
    eval_standard_accuracy,
    export_features,
    export_report,
    model_predictor,
    reference_rows,
    smoothed_predictor,
)
from .model import Model, train
from .smoothing import AblationConfig, SmoothedModel, train_smoothed

log = logging.getLogger(__name__)

RECORD_NAME = "run.json"
STREAMS = ("split", "train", "attack", "uap_split", "uap", "smooth")


def derive_seeds(seed: int) -> dict:
    """Independent per-step seeds spawned from the global seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STREAMS, children)}


def guard_outputs(out: Path, names, overwrite: bool):
    """Refuse to replace existing artifacts unless ``overwrite`` is set."""
    existing = [n for n in names if (out / n).exists()]
    if existing and not overwrite:
        raise UsageError(f"{out}: would overwrite {', '.join(sorted(existing))}; pass --overwrite")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def artifact_digests(out: Path) -> dict:
    digests = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != RECORD_NAME:
            digests[path.relative_to(out).as_posix()] = sha256_file(path)
    return digests


def write_record(out: Path, command: str, config: CliConfig, seeds: dict, extra: dict | None = None) -> Path:
    """Reproducibility record: config snapshot, seeds, artifact digests, environment."""
    record = {
        "command": command,
        "config": json.loads(dump_config(config)),
        "seeds": seeds,
        "artifacts": artifact_digests(out),
        "versions": {"malsmooth": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if extra:
        record.update(extra)
    if not config.deterministic:
        record["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path = out / RECORD_NAME
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def obtain_corpus(config: CliConfig, out: Path | None = None) -> list[ByteFile]:
    if config.corpus.path:
        return load_corpus(config.corpus.path)
    files = generate_synthetic_corpus(config.corpus.synthetic_spec(config.seed))
    if out is not None:
        write_corpus(out / "corpus", files, overwrite=True)
    return files


def uap_sets(test_malware, config: CliConfig, seed: int):
    """Generation and held-out sets drawn from at most ``uap_num_files`` test malware files."""
    a = config.attack
    n = len(test_malware)
    if n < 2:
        raise UsageError("need at least two malware test files for the universal patch")
    pool = min(a.uap_num_files, n)
    g = a.uap_generation_fraction
    gen, held = split_corpus(test_malware, (g * pool / n, (1 - g) * pool / n), seed)
    return gen, held


def uap_size(generation_set, config: CliConfig) -> int:
    if config.attack.uap_bytes:
        return config.attack.uap_bytes
    mean = float(np.mean([len(f) for f in generation_set]))
    return max(1, int(round(config.attack.uap_percent_of_mean / 100.0 * mean)))


@dataclass
class PipelineResult:
    rows: list
    model: Model
    smoothed: SmoothedModel
    patch: UniversalPatch
    metrics: dict = field(default_factory=dict)
    out: Path | None = None
    smoothed_by_w: dict = field(default_factory=dict)
    # wall-clock seconds per stage; kept out of every written artifact
    timings: dict = field(default_factory=dict)


OUTPUT_NAMES = ("model.smcv", "smoothed", "uap.uap", "report.csv", "report.jsonl", "features.csv", RECORD_NAME)


def run_pipeline(config: CliConfig, overwrite: bool = False, write: bool = True) -> PipelineResult:
    """Train, attack, smooth and evaluate; write every artifact under ``config.out``."""
    out = Path(config.out)
    if write:
        guard_outputs(out, OUTPUT_NAMES, overwrite)
        out.mkdir(parents=True, exist_ok=True)
    jobs = config.effective_jobs
    seeds = derive_seeds(config.seed)
    exp = config.harness.experiment
    mcfg = config.model.model_config()
    tcfg = config.model.training_config()
    D = mcfg.input_length

    corpus = obtain_corpus(config, out if write else None)
    tf = config.corpus.test_fraction
    train_set, test_set = split_corpus(corpus, (1 - tf, tf), seeds["split"])
    if not train_set or not test_set:
        raise UsageError("corpus too small for a train/test split")

    timings = {}
    started = time.perf_counter()
    if config.model.checkpoint:
        model = load_checkpoint(config.model.checkpoint, expected_config=mcfg)
    else:
        model = train(
            train_set,
            mcfg,
            epochs=tcfg.epochs,
            batch_size=tcfg.batch_size,
            seed=seeds["train"],
            learning_rate=tcfg.learning_rate,
            validation_fraction=tcfg.validation_fraction,
        )
    timings["train"] = time.perf_counter() - started
    if write:
        save_checkpoint(model, out / "model.smcv")
    plain = model_predictor(model)
    test_malware = [f for f in test_set if f.label == MALWARE]

    rows = [
        eval_standard_accuracy(test_set, plain, f"{exp}/undefended/clean"),
        eval_standard_accuracy(test_malware, plain, f"{exp}/undefended/malware"),
    ]

    # input-specific attack against the undefended model
    attack_files = test_malware[: config.attack.max_files] if config.attack.max_files else test_malware
    a = config.attack
    spec = PatchSpec("percent_of_file", a.pad_percent, a.epsilon, a.iterations, seeds["attack"])
    fgsm_cache: dict = {}
    rows += eval_evasion(attack_files, FgsmAttack(spec, model), plain, D, f"{exp}/undefended/input-specific", cache=fgsm_cache)
    rows += eval_evasion(attack_files, RandomPadAttack(spec), plain, D, f"{exp}/undefended/random-pad")

    # universal patch: built on the generation set, evaluated on held-out files
    gen_set, held_out = uap_sets(test_malware, config, seeds["uap_split"])
    p_uap = uap_size(gen_set, config)
    patch = build_universal_patch(gen_set, p_uap, a.epsilon, a.iterations, seeds["uap"], model)
    if write:
        patch.save(out / "uap.uap")
    uap = UapAttack(patch)
    rows += eval_evasion(held_out, uap, plain, D, f"{exp}/undefended/uap", p=p_uap)

    # smoothed model; adversarial files are crafted against the undefended model
    w = config.window_size
    p_def = config.smoothing.patch_size or p_uap
    ablation = AblationConfig(w, D, p_def)
    if config.smoothing.model_dir:
        smoothed = SmoothedModel.load(config.smoothing.model_dir).with_patch_size(p_def)
        if smoothed.ablation.input_length != D:
            raise UsageError(f"smoothed model input length {smoothed.ablation.input_length} != model input length {D}")
        w = smoothed.ablation.window_size
    else:
        smoothed = train_smoothed(train_set, ablation, mcfg, tcfg, seeds["smooth"], jobs=jobs)
    if write:
        smoothed.save(out / "smoothed", overwrite=True)
    sm = smoothed_predictor(smoothed, jobs)
    rows += [
        eval_standard_accuracy(test_set, sm, f"{exp}/smoothed/clean", w, p_def),
        eval_standard_accuracy(test_malware, sm, f"{exp}/smoothed/malware", w, p_def),
        eval_certified_accuracy(test_set, smoothed, p_def, f"{exp}/smoothed/clean", jobs=jobs),
        eval_certified_accuracy(test_malware, smoothed, p_def, f"{exp}/smoothed/malware", jobs=jobs),
    ]
    rows += eval_evasion(held_out, uap, sm, D, f"{exp}/smoothed/uap", w, p_uap)
    rows += eval_evasion(attack_files, FgsmAttack(spec, model), sm, D, f"{exp}/smoothed/input-specific", w, cache=fgsm_cache)
    patched = [ByteFile(f.id, f.data + patch.patch_bytes, f.label, f.source) for f in held_out]
    rows.append(eval_certified_accuracy(patched, smoothed, p_def, f"{exp}/smoothed/uap-patched", "uap", jobs=jobs))

    # accuracy grid over window and patch sizes
    grid_ws = sorted(set(config.smoothing.window_sizes) | {w})
    grid_ps = sorted(set(config.smoothing.patch_sizes) or {p_def, w // 2, w, 2 * w})
    by_w = {w: smoothed}
    for gw in grid_ws:
        if gw not in by_w:
            by_w[gw] = train_smoothed(train_set, AblationConfig(gw, D, p_def), mcfg, tcfg, seeds["smooth"], jobs=jobs)
    rows += certified_grid(test_set, by_w, [p for p in grid_ps if p >= 1], f"{exp}/sweep", jobs=jobs)
    rows += reference_rows()

    metrics = _headline(rows, exp)
    metrics.update(uap_bytes=p_uap, window_size=w, defender_patch_size=p_def)
    timings["total"] = time.perf_counter() - started
    result = PipelineResult(rows, model, smoothed, patch, metrics, out if write else None, by_w, timings)
    if write:
        export_report(rows, out)
        if config.harness.export_features:
            tagged = [(f, "clean") for f in test_set]
            tagged += [(f, "uap") for f in patched]
            tagged += [
                (ByteFile(f.id, fgsm_cache[f.id], f.label, f.source), "input-specific")
                for f in attack_files
                if f.id in fgsm_cache
            ]
            export_features(tagged, model, out / "features.csv")
        cert = certification_rows(test_set, smoothed, p_def, jobs)
        with open(out / "certification.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in cert:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        write_record(out, "eval", config, seeds, {"metrics": metrics})
    return result


def _headline(rows, exp: str) -> dict:
    """Flat ``name -> value`` view of the rows the summary cares about."""
    want = {
        "undefended_accuracy": (f"{exp}/undefended/clean", "standard_accuracy"),
        "fgsm_evasion": (f"{exp}/undefended/input-specific", "evasion"),
        "random_pad_evasion": (f"{exp}/undefended/random-pad", "evasion"),
        "uap_evasion": (f"{exp}/undefended/uap", "evasion"),
        "smoothed_accuracy": (f"{exp}/smoothed/clean", "standard_accuracy"),
        "smoothed_certified_accuracy": (f"{exp}/smoothed/clean", "certified_accuracy"),
        "uap_evasion_smoothed": (f"{exp}/smoothed/uap", "evasion"),
        "fgsm_evasion_smoothed": (f"{exp}/smoothed/input-specific", "evasion"),
    }
    out = {}
    for name, (e, m) in want.items():
        hit = [r for r in rows if r.experiment == e and r.metric == m]
        out[name] = hit[0].value if hit else None
    return out
