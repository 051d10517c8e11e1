"""Command-line entry point: ``vetosgg {synth,train,eval,params,gradcheck}``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""
from __future__ import annotations

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .backbone.scene import SceneFormatError  # noqa: E402
from .backbone.synth import ConfigError, DatasetManifest, SynthConfig, synthesize_dataset  # noqa: E402
from .checkpoint import CheckpointError, atomic_write  # noqa: E402
from .config import PRESETS, RunConfig, merge  # noqa: E402
from .data import SceneTable  # noqa: E402
from .metrics import MetricError, render_table  # noqa: E402
from .model import gradient_check, parameter_report  # noqa: E402
from .train import NumericError, evaluate, load_model, train  # noqa: E402

log = logging.getLogger("vetosgg")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


def resolve_config(args) -> RunConfig:
    """Preset, then ``--config`` JSON merged over it, then ``--seed``/``--mode``."""
    d = merge(RunConfig().to_dict(), PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            override = json.loads(Path(args.config).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: parse error at line {err.lineno}, column {err.colno}: {err.msg}") \
                from None
        if not isinstance(override, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        d = merge(d, override)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "mode", None):
        d["model"]["mode"] = args.mode
    return RunConfig.from_dict(d).validate()


def _check_dataset(cfg: RunConfig, manifest: DatasetManifest) -> None:
    if manifest.synth and SynthConfig.from_dict(manifest.synth).to_dict() != cfg.synth.to_dict():
        raise ConfigError("dataset was synthesized with different synth settings than the run config")
    if manifest.num_predicates != cfg.synth.num_predicates:
        raise ConfigError(f"dataset has {manifest.num_predicates} predicates, config expects "
                          f"{cfg.synth.num_predicates}")


def _load_table(manifest: DatasetManifest, split: str) -> SceneTable:
    scenes = manifest.load_split(split)
    if not scenes:
        raise UsageError(f"split {split!r} is empty")
    return SceneTable(scenes)


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out_dir)
    manifest = synthesize_dataset(cfg.synth, cfg.seed, out)
    print(json.dumps({"out_dir": str(out), "frequency": manifest.frequency,
                      "splits": {k: len(v) for k, v in manifest.splits.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = DatasetManifest.load(args.data_dir)
    _check_dataset(cfg, manifest)
    train_table = _load_table(manifest, "train")
    val_table = _load_table(manifest, "val") if manifest.splits.get("val") else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", cfg.to_json())
    result = train(cfg, train_table, manifest.frequency, val_table, out, resume=args.resume,
                   log=lambda rec: log.info(json.dumps(rec, sort_keys=True)))
    print(json.dumps({"steps": result.step, "best": result.best_metric, "checkpoint": str(out / "last.json")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, freq = load_model(args.checkpoint)
    manifest = DatasetManifest.load(args.data_dir)
    _check_dataset(cfg, manifest)
    table = _load_table(manifest, args.split)
    report = evaluate(model, table, freq, cfg)
    report.extra["split"] = args.split
    report.extra["config"] = cfg.to_dict()
    text = render_table(report, cfg.model.mode)
    if args.out_dir:
        out = Path(args.out_dir)
        atomic_write(out / f"report_{args.split}.json", report.to_json())
        atomic_write(out / f"report_{args.split}.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    print(json.dumps(parameter_report(cfg), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    report = gradient_check(cfg, seed=cfg.seed, tolerance=args.tolerance)
    print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vetosgg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training records to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="JSON file merged over the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", required=out_required)

    p = sub.add_parser("synth", help="write a synthetic long-tail dataset")
    common(p, out_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a relation model")
    common(p, out_required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--mode", choices=["single", "rwt", "meet", "baseline"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="report analytic parameter counts")
    common(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    common(p)
    p.add_argument("--mode", choices=["single", "rwt", "meet", "baseline"])
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SceneFormatError, CheckpointError, MetricError, UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
