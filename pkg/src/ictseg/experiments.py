"""Label-fraction sweeps over training variants, consolidated CSV tables and DSC-vs-fraction plots."""

from __future__ import annotations

import csv
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ictseg.config import TrainConfig, build_config
from ictseg.trainer import run_training

log = logging.getLogger(__name__)

BASE_VARIANT = "ict"
ABLATIONS: dict[str, dict[str, str]] = {
    "supervised_only": {"ramp.w_max": "0"},
    "fixed_alpha": {"mix.mode": "fixed", "mix.alpha_fixed": "0.5"},
    "beta_alpha": {"mix.mode": "beta", "mix.beta_a": "1.0"},
    "linear_ramp": {"ramp.shape": "linear"},
}
SWEEP_COLUMNS = ("fraction", "seed", "ablation", "dsc", "asd", "hd")


@dataclass
class ExperimentPlan:
    base_config: TrainConfig
    label_fractions: list[float]
    seeds: list[int]
    ablations: list[str] = field(default_factory=lambda: ["supervised_only"])

    def __post_init__(self) -> None:
        if not self.label_fractions or not self.seeds:
            raise ValueError("a plan needs at least one label fraction and one seed")
        for f in self.label_fractions:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"label fraction {f} outside (0, 1]")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}; choose from {sorted(ABLATIONS)}")

    @property
    def variants(self) -> list[str]:
        return [BASE_VARIANT, *self.ablations]

    def runs(self) -> list[tuple[float, int, str]]:
        return [(f, s, v) for f in self.label_fractions for s in self.seeds for v in self.variants]

    def config_for(self, fraction: float, seed: int, variant: str) -> TrainConfig:
        overrides = {"data.label_fraction": repr(float(fraction)), "train.seed": str(seed)}
        overrides.update(ABLATIONS.get(variant, {}))
        return build_config(overrides, self.base_config)


def run_dir_name(fraction: float, seed: int, variant: str) -> str:
    return f"{variant}_f{fraction:g}_s{seed}"


@dataclass
class SweepResult:
    rows: list[dict]
    failures: list[dict]
    out_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failures

    def mean_dsc(self, fraction: float, variant: str) -> float:
        vals = [r["dsc"] for r in self.rows if r["fraction"] == fraction and r["ablation"] == variant]
        return sum(vals) / len(vals) if vals else math.nan


def _one_run(args) -> dict:
    cfg, fraction, seed, variant, dataset_dir, run_dir = args
    try:
        report = run_training(cfg, dataset_dir, run_dir)
    except Exception as exc:  # recorded, the sweep carries on
        return {
            "fraction": fraction, "seed": seed, "ablation": variant,
            "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
        }
    a = report.averaged
    return {"fraction": fraction, "seed": seed, "ablation": variant, "dsc": a["dsc"], "asd": a["asd"], "hd": a["hd"]}


def run_sweep(plan: ExperimentPlan, dataset_dir: str | Path, out_dir: str | Path, jobs: int = 1) -> SweepResult:
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    tasks = [
        (plan.config_for(f, s, v), f, s, v, str(dataset_dir), str(out / "runs" / run_dir_name(f, s, v)))
        for f, s, v in plan.runs()
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = []
        for task in tasks:
            log.info("sweep run %s", run_dir_name(*task[1:4]))
            results.append(_one_run(task))

    order = {v: i for i, v in enumerate(plan.variants)}
    key = lambda r: (r["fraction"], r["seed"], order[r["ablation"]])  # noqa: E731
    rows = sorted((r for r in results if "error" not in r), key=key)
    failures = sorted((r for r in results if "error" in r), key=key)
    result = SweepResult(rows, failures, out)
    write_sweep_csv(out / "sweep.csv", rows)
    write_summary(out / "summary.csv", result, plan)
    if failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "seed", "ablation", "error"])
            for r in failures:
                w.writerow([r["fraction"], r["seed"], r["ablation"], r["error"]])
    if rows:
        plot_dsc_vs_fraction(result, plan, out)
    return result


def _cell(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(x)


def write_sweep_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(r["fraction"]), r["seed"], r["ablation"], _cell(r["dsc"]), _cell(r["asd"]), _cell(r["hd"])])


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "fraction": float(r["fraction"]),
                "seed": int(r["seed"]),
                "ablation": r["ablation"],
                **{k: float(r[k]) if r[k] else math.nan for k in ("dsc", "asd", "hd")},
            }
            for r in csv.DictReader(fh)
        ]


def write_summary(path: Path, result: SweepResult, plan: ExperimentPlan) -> None:
    """Mean DSC per (fraction, variant) and the ICT minus supervised-only difference."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "ablation", "n_runs", "mean_dsc", "dsc_minus_supervised_only"])
        for f in plan.label_fractions:
            sup = result.mean_dsc(f, "supervised_only")
            for v in plan.variants:
                n = sum(1 for r in result.rows if r["fraction"] == f and r["ablation"] == v)
                mean = result.mean_dsc(f, v)
                diff = mean - sup if v != "supervised_only" and not math.isnan(sup) else math.nan
                w.writerow([repr(f), v, n, _cell(mean), _cell(diff)])


def plot_dsc_vs_fraction(result: SweepResult, plan: ExperimentPlan, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fractions = sorted(set(plan.label_fractions))
    curves = {v: [100 * result.mean_dsc(f, v) for f in fractions] for v in plan.variants}
    paths = []
    for v, ys in curves.items():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([100 * f for f in fractions], ys, marker="o")
        ax.set_xlabel("labelled volumes (%)")
        ax.set_ylabel("mean DSC (%)")
        ax.set_title(v)
        fig.tight_layout()
        paths.append(out / f"dsc_vs_fraction_{v}.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for v, ys in curves.items():
        ax.plot([100 * f for f in fractions], ys, marker="o", label=v)
    ax.set_xlabel("labelled volumes (%)")
    ax.set_ylabel("mean DSC (%)")
    ax.legend()
    fig.tight_layout()
    paths.append(out / "dsc_vs_fraction.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    return paths
