"""Command line: ``ictseg generate | train | evaluate | sweep``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from ictseg.config import ConfigError, TOY_CONFIG, config_hash, load_config, read_resolved, resolve
from ictseg.data import (
    DatasetFormatError,
    TOY_DATASET,
    SplitError,
    generate_synthetic_dataset,
    make_split,
    read_dataset,
    write_dataset,
)
from ictseg.experiments import ABLATIONS, ExperimentPlan, run_sweep
from ictseg.metrics import evaluate_predictions
from ictseg.model import CheckpointError, build_model
from ictseg.trainer import evaluation_volumes, final_report, load_state, run_training

log = logging.getLogger("ictseg")


class UsageError(Exception):
    pass


def _config_path(value: str | None):
    if value == "toy":
        return TOY_CONFIG
    return value


def _load(args) -> object:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(_config_path(args.config), overrides)


def _echo(args, report) -> None:
    if not args.quiet:
        a = report.averaged
        print(f"DSC {a['dsc']:.4f}  ASD {a['asd']:.4f} mm  HD {a['hd']:.4f} mm")


def cmd_generate(args) -> int:
    volumes = generate_synthetic_dataset(
        args.volumes, args.slices, args.size, args.size, args.classes, args.noise, args.seed,
        spacing=(args.spacing, args.spacing),
    )
    path = write_dataset(volumes, args.out)
    if not args.quiet:
        print(f"wrote {len(volumes)} volumes to {path.parent}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    report = run_training(cfg, args.data, args.out, resume_from=args.resume)
    _echo(args, report)
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.config is not None:
        cfg = resolve(_load(args))
    else:
        resolved = ckpt.parent.parent / "config.resolved.json"
        if not resolved.is_file():
            raise UsageError(f"no --config given and {resolved} does not exist")
        cfg = read_resolved(resolved)
    state, meta = load_state(ckpt)
    if meta["config_hash"] != config_hash(cfg):
        warnings.warn(
            f"checkpoint config hash {meta['config_hash']} differs from config {config_hash(cfg)}", stacklevel=1
        )
    volumes = read_dataset(args.data)
    by_id = {v.id: v for v in volumes}
    split = make_split(volumes, cfg.data.label_fraction, cfg.data.n_validation, cfg.data.n_test, cfg.seed)
    if args.split == "auto":
        split_name, vols = evaluation_volumes(split, by_id)
    elif args.split == "all":
        split_name, vols = "all", volumes
    else:
        split_name, vols = args.split, [by_id[i] for i in getattr(split, args.split)]
    if not vols:
        raise UsageError(f"split {args.split!r} is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ground_truth:
        preds = [[lab.values[:, :, 0] for lab in v.labels] for v in vols]
        report = evaluate_predictions(
            preds, vols, cfg.model.n_classes, config_hash=config_hash(cfg), seed=cfg.seed,
            iteration=state.iteration, extra={"split": split_name, "params": "ground_truth"},
        )
    else:
        which = "student" if args.use_student else "teacher"
        params = state.pair.student if args.use_student else state.pair.teacher
        report = final_report(cfg, build_model(cfg.model), params, vols, split_name, state.iteration, which)
    report.write(out / "report.json")
    _echo(args, report)
    return 0


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    base = load_config(_config_path(args.config), args.set or [])
    ablations = [a for a in (args.ablations or "").split(",") if a.strip()]
    try:
        plan = ExperimentPlan(base, _floats(args.fractions), _ints(args.seeds), ablations)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_sweep(plan, args.data, args.out, jobs=args.jobs)
    if not args.quiet:
        for f in plan.label_fractions:
            line = "  ".join(f"{v} {100 * result.mean_dsc(f, v):.2f}" for v in plan.variants)
            print(f"fraction {f:g}: {line}")
        for r in result.failures:
            print(f"FAILED {r['ablation']} fraction={r['fraction']} seed={r['seed']}: {r['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ictseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key=value config file, or 'toy' for the bundled toy config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. ramp.w_max=0")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--quiet", action="store_true")

    g = sub.add_parser("generate", help="write a synthetic ellipse dataset")
    common(g, config=False)
    # defaults reproduce the toy dataset that the bundled toy config expects
    g.add_argument("--volumes", type=int, default=TOY_DATASET["n_volumes"])
    g.add_argument("--slices", type=int, default=TOY_DATASET["slices_per_volume"])
    g.add_argument("--size", type=int, default=TOY_DATASET["height"])
    g.add_argument("--classes", type=int, default=TOY_DATASET["n_classes"])
    g.add_argument("--noise", type=float, default=TOY_DATASET["noise_sigma"])
    g.add_argument("--spacing", type=float, default=1.0)
    g.set_defaults(func=cmd_generate, seed=TOY_DATASET["seed"])

    t = sub.add_parser("train", help="run one training job")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="auto", choices=["auto", "test", "validation", "labelled", "unlabelled", "all"])
    e.add_argument("--use-student", action="store_true", help="score the student instead of the teacher")
    e.add_argument("--ground-truth", action="store_true", help="debug: score the ground truth against itself")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="label-fraction x seed x ablation sweep")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", default="0.1,0.25,1.0")
    s.add_argument("--seeds", default="0")
    s.add_argument("--ablations", default="supervised_only", help=f"comma list from {sorted(ABLATIONS)}")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError, SplitError) as exc:
        print(f"ictseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"ictseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
