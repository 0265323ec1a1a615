"""Command-line entry point.

Verbs: generate, anonymize, train-deanon, evaluate, suite, report.  All take
--config (JSON); --seed overrides the config's root seed.  Exit codes: 0 on
success, 1 for configuration errors, 2 for stage failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataio import generate_synthetic_faces, write_png
from .harness import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    StageError,
    _anon_context,
    _load_images,
    anonymizer_label,
    emit_report,
    materialize_dataset,
    run_experiment,
    run_suite,
    train_deanonymizer,
)
from .anonymizers import AnonymizerSpec

log = logging.getLogger(__name__)


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _cache_dir(args) -> Path:
    if args.cache:
        return Path(args.cache)
    return Path(args.out) / "cache"


def _cmd_generate(args) -> int:
    obj = _load_config(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    config = DatasetConfig.from_json(obj, obj.get("seed", 0))
    if config.kind != "synthetic":
        raise ConfigError("generate requires a synthetic dataset config")
    manifest = generate_synthetic_faces(
        config.identity_count,
        config.images_per_identity,
        config.resolution,
        config.seed,
        args.out,
    )
    print(f"generated {len(manifest.entries)} images under {args.out}")
    return 0


def _cmd_anonymize(args) -> int:
    obj = _load_config(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    root_seed = obj.get("seed", 0)
    dataset = DatasetConfig.from_json(obj["dataset"], root_seed)
    spec = AnonymizerSpec.from_json(obj["anonymizer"])
    manifest, _ = materialize_dataset(dataset, _cache_dir(args))
    background_ids: tuple[str, ...] = ()
    if "background_ids" in obj:
        background_ids = tuple(obj["background_ids"])
    ctx, _ = _anon_context(spec, manifest, background_ids, obj.get("background_components", 32))
    fn = ctx.function()
    by_id = manifest.by_identity()
    wanted = {i: tuple(e.image_id for e in by_id[i]) for i in sorted(by_id)}
    count = 0
    for li in _load_images(manifest, wanted):
        out = fn(li.image, f"{li.identity_id}/{li.image_id}")
        write_png(Path(args.out) / li.identity_id / f"{li.image_id}.png", out)
        count += 1
    print(f"anonymized {count} images with {anonymizer_label(spec)} under {args.out}")
    return 0


def _cmd_train_deanon(args) -> int:
    obj = _load_config(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    obj.setdefault("protocols", ["reversal"])
    config = ExperimentConfig.from_json(obj)
    fitted = train_deanonymizer(config, _cache_dir(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "details.json").write_text(json.dumps(fitted.details, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"kind": fitted.kind, "cache_hit": fitted.cache_hit, **fitted.details},
                     sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    obj = _load_config(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    config = ExperimentConfig.from_json(obj)
    report = run_experiment(config, _cache_dir(args), args.out)
    for proto in sorted(report["protocols"]):
        s = report["protocols"][proto]
        print(f"{proto}: accuracy={s['mean_accuracy']:.4f} ci={s['ci_half_width']:.4f} "
              f"ssim={s['mean_ssim']:.4f}")
    rev = report["reversibility"]
    if rev is not None:
        if "score" in rev:
            print(f"reversibility: {rev['score']:.4f} ({rev['category']})")
        else:
            print(f"reversibility: {rev['error']}")
    return 0


def _cmd_suite(args) -> int:
    obj = _load_config(args.config)
    if args.seed is not None:
        for exp in obj.get("experiments", []):
            exp["seed"] = args.seed
    result = run_suite(obj, _cache_dir(args), args.out, jobs=args.jobs)
    done = len(result["reports"])
    failed = len(result["failures"])
    print(f"suite: {done} succeeded, {failed} failed; aggregate at {result['aggregate_csv']}")
    for failure in result["failures"]:
        print(f"  FAILED {failure['name']} at stage {failure['stage']}: {failure['cause']}",
              file=sys.stderr)
    return 2 if failed else 0


def _cmd_report(args) -> int:
    report = _load_config(args.config)
    if "rows" not in report:
        raise ConfigError("not an experiment report: missing rows")
    path = emit_report(report, "csv", args.out)
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "anonymize": _cmd_anonymize,
    "train-deanon": _cmd_train_deanon,
    "evaluate": _cmd_evaluate,
    "suite": _cmd_suite,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="anonrev", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override root seed")
        p.add_argument("--cache", default=None, help="cache directory (default: <out>/cache)")
        p.add_argument("--jobs", type=int, default=1, help="parallel experiments in a suite")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
