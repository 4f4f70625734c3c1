"""Command-line entry point: ``malsmooth <command> [options]``.

Settings come from an optional JSON config (``--config``) with flags layered on
top. Every command writes a ``run.json`` reproducibility record next to its
artifacts and refuses to replace existing outputs without ``--overwrite``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attacks import PatchSpec, build_universal_patch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CliConfig, load_config, with_overrides
from .corpus import MALWARE, generate_synthetic_corpus, split_corpus, write_corpus
from .errors import ConfigError, MalsmoothError
from .harness import (
    FgsmAttack,
    UapAttack,
    certification_rows,
    eval_certified_accuracy,
    eval_evasion,
    eval_standard_accuracy,
    export_report,
    model_predictor,
    smoothed_predictor,
)
from .model import train
from .pipeline import (
    RECORD_NAME,
    derive_seeds,
    guard_outputs,
    obtain_corpus,
    run_pipeline,
    uap_sets,
    uap_size,
    write_record,
)
from .smoothing import AblationConfig, SmoothedModel, train_smoothed

log = logging.getLogger("malsmooth")

EXIT_IO = 3
EXIT_INTERNAL = 5


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker threads (default: available cores)")
    common.add_argument("--deterministic", action="store_true", help="single worker, no timestamps in records")
    common.add_argument("--overwrite", action="store_true", help="allow replacing existing outputs")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--preset", choices=("paper", "desk"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="malsmooth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="write a synthetic corpus and manifest")

    p = sub.add_parser("train", parents=[common], help="train the undefended classifier")
    p.add_argument("--corpus", type=Path, help="corpus directory (default: synthetic)")

    p = sub.add_parser("attack", parents=[common], help="input-specific append attack")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--model", type=Path, required=True, help="checkpoint to attack")
    p.add_argument("--pad-percent", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("uap", parents=[common], help="build and evaluate a universal patch")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--patch-size", type=int, help="patch length in bytes (default: share of mean file length)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("smooth-train", parents=[common], help="train per-window base models")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--window-size", type=int)
    p.add_argument("--patch-size", type=int, help="defender's assumed patch size in bytes")

    p = sub.add_parser("certify", parents=[common], help="per-file certificates for a smoothed model")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--smoothed", type=Path, required=True, help="smoothed model directory")
    p.add_argument("--model", type=Path, help="undefended checkpoint whose input length must match")
    p.add_argument("--patch-size", type=int, required=True)

    p = sub.add_parser("eval", parents=[common], help="full evaluation grid and report")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--model", type=Path, help="reuse a trained checkpoint")
    p.add_argument("--smoothed", type=Path, help="reuse a trained smoothed model")
    p.add_argument("--window-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--pad-percent", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    return parser


def _path(v):
    return None if v is None else str(Path(v).resolve())


def resolve_config(args) -> CliConfig:
    """Config file first, then flags; flags win."""
    config = load_config(args.config) if args.config else CliConfig()
    get = lambda name: getattr(args, name, None)  # noqa: E731
    attack = {"pad_percent": get("pad_percent"), "epsilon": get("epsilon"), "iterations": get("iterations")}
    smoothing = {"window_size": get("window_size"), "model_dir": _path(get("smoothed"))}
    if args.command == "uap":
        attack["uap_bytes"] = get("patch_size")
    else:
        smoothing["patch_size"] = get("patch_size")
    return with_overrides(
        config,
        model={"preset": get("preset"), "checkpoint": _path(get("model"))},
        corpus={"path": _path(get("corpus"))},
        attack=attack,
        smoothing=smoothing,
        seed=get("seed"),
        jobs=get("jobs"),
        out=_path(get("out")),
        deterministic=True if args.deterministic else None,
    )


def _split(config: CliConfig, corpus):
    tf = config.corpus.test_fraction
    return split_corpus(corpus, (1 - tf, tf), derive_seeds(config.seed)["split"])


def _prepare(config: CliConfig, names, overwrite: bool) -> Path:
    out = Path(config.out)
    guard_outputs(out, list(names) + [RECORD_NAME], overwrite)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_corpus(config, args):
    out = Path(config.out)
    guard_outputs(out, ["benign", "malware", "manifest.jsonl", RECORD_NAME], args.overwrite)
    spec = config.corpus.synthetic_spec(config.seed)
    write_corpus(out, generate_synthetic_corpus(spec), overwrite=args.overwrite)
    write_record(out, "gen-corpus", config, {"corpus": spec.seed}, {"synthetic_spec": spec.to_dict()})


def cmd_train(config, args):
    out = _prepare(config, ["model.smcv", "report.csv", "report.jsonl"], args.overwrite)
    seeds = derive_seeds(config.seed)
    train_set, test_set = _split(config, obtain_corpus(config))
    t = config.model.training_config()
    model = train(
        train_set,
        config.model.model_config(),
        epochs=t.epochs,
        batch_size=t.batch_size,
        seed=seeds["train"],
        learning_rate=t.learning_rate,
        validation_fraction=t.validation_fraction,
    )
    save_checkpoint(model, out / "model.smcv")
    row = eval_standard_accuracy(test_set, model_predictor(model), "train/held-out")
    export_report([row], out)
    write_record(out, "train", config, seeds, {"held_out_accuracy": row.value})


def _load_model(config):
    return load_checkpoint(config.model.checkpoint, expected_config=config.model.model_config())


def cmd_attack(config, args):
    out = _prepare(config, ["adversarial", "report.csv", "report.jsonl"], args.overwrite)
    seeds = derive_seeds(config.seed)
    model = _load_model(config)
    D = model.config.input_length
    a = config.attack
    spec = PatchSpec("percent_of_file", a.pad_percent, a.epsilon, a.iterations, seeds["attack"])
    _, test_set = _split(config, obtain_corpus(config))
    cache = {}
    rows = list(eval_evasion(test_set, FgsmAttack(spec, model), model_predictor(model), D, "attack", cache=cache))
    adv_dir = out / "adversarial"
    adv_dir.mkdir(exist_ok=True)
    for fid in sorted(cache):
        (adv_dir / f"{fid}.bin").write_bytes(cache[fid])
    export_report(rows, out)
    write_record(out, "attack", config, seeds)


def cmd_uap(config, args):
    out = _prepare(config, ["uap.uap", "report.csv", "report.jsonl"], args.overwrite)
    seeds = derive_seeds(config.seed)
    model = _load_model(config)
    _, test_set = _split(config, obtain_corpus(config))
    gen_set, held_out = uap_sets([f for f in test_set if f.label == MALWARE], config, seeds["uap_split"])
    p = uap_size(gen_set, config)
    a = config.attack
    patch = build_universal_patch(gen_set, p, a.epsilon, a.iterations, seeds["uap"], model)
    patch.save(out / "uap.uap")
    rows = eval_evasion(held_out, UapAttack(patch), model_predictor(model), model.config.input_length, "uap", p=p)
    export_report(rows, out)
    write_record(out, "uap", config, seeds)


def cmd_smooth_train(config, args):
    out = _prepare(config, ["smoothed"], args.overwrite)
    seeds = derive_seeds(config.seed)
    mcfg = config.model.model_config()
    p = config.smoothing.patch_size or 1
    ablation = AblationConfig(config.window_size, mcfg.input_length, p)
    train_set, _ = _split(config, obtain_corpus(config))
    smoothed = train_smoothed(
        train_set, ablation, mcfg, config.model.training_config(), seeds["smooth"], jobs=config.effective_jobs
    )
    smoothed.save(out / "smoothed", overwrite=args.overwrite)
    write_record(out, "smooth-train", config, seeds)


def cmd_certify(config, args):
    smoothed = SmoothedModel.load(config.smoothing.model_dir).with_patch_size(config.smoothing.patch_size)
    L = smoothed.ablation.input_length
    D = config.model.model_config().input_length
    if config.model.checkpoint:
        D = load_checkpoint(config.model.checkpoint).config.input_length
    if D != L:
        raise ConfigError(f"model input length {D} differs from smoothing input length {L}", "smoothing.input_length")
    out = _prepare(config, ["certification.jsonl", "report.csv", "report.jsonl"], args.overwrite)
    jobs = config.effective_jobs
    _, test_set = _split(config, obtain_corpus(config))
    p = config.smoothing.patch_size
    recs = certification_rows(test_set, smoothed, p, jobs)
    with open(out / "certification.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in recs:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    w = smoothed.ablation.window_size
    rows = [
        eval_standard_accuracy(test_set, smoothed_predictor(smoothed, jobs), "certify", w, p),
        eval_certified_accuracy(test_set, smoothed, p, "certify", jobs=jobs),
    ]
    export_report(rows, out)
    write_record(out, "certify", config, derive_seeds(config.seed))


def cmd_eval(config, args):
    result = run_pipeline(config, overwrite=args.overwrite)
    for name, value in result.metrics.items():
        print(f"{name}: {value}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "attack": cmd_attack,
    "uap": cmd_uap,
    "smooth-train": cmd_smooth_train,
    "certify": cmd_certify,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config, args)
    except MalsmoothError as exc:
        print(f"malsmooth {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"malsmooth {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        return EXIT_INTERNAL
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
