"""The interpolation-consistency training loop: steps, optimizers, checkpoints, full runs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ictseg.config import TrainConfig, config_hash, resolve, write_resolved
from ictseg.data import SlicePool, Volume, make_split, read_dataset, sample_batch, stack_images, stack_labels
from ictseg.metrics import MetricReport, evaluate_volumes
from ictseg.mixing import draw_alpha
from ictseg.model import (
    NonFiniteLossError,
    ParamSet,
    StudentTeacher,
    build_model,
    ema_update,
    forward,
    init_params,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
)
from ictseg.objective import LossReport, consistency_loss, cross_entropy, ramp, total_loss

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "l_ce", "l_u", "r_t", "total")
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    pair: StudentTeacher
    iteration: int
    rngs: dict[str, np.random.Generator]
    opt_state: dict
    history: list[LossReport] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    # independent streams so that removing the unsupervised branch leaves labelled sampling untouched
    labelled, unlabelled = np.random.SeedSequence(seed).spawn(2)
    return {"labelled": np.random.default_rng(labelled), "unlabelled": np.random.default_rng(unlabelled)}


def init_state(cfg: TrainConfig, net: nn.Module | None = None) -> TrainState:
    cfg = resolve(cfg)
    student = init_params(cfg.model, net=net)
    return TrainState(
        pair=StudentTeacher.from_student(student, cfg.lambda_ema),
        iteration=0,
        rngs=make_rngs(cfg.seed),
        opt_state=init_optimizer_state(student),
    )


def init_optimizer_state(params: ParamSet) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(v) for k, v in params.items()},
        "v": {k: torch.zeros_like(v) for k, v in params.items()},
    }


@torch.no_grad()
def optimizer_step(params: ParamSet, grads: ParamSet, opt_state: dict, cfg: TrainConfig) -> tuple[ParamSet, dict]:
    """One Adam (bias-corrected) or plain SGD update; returns new params and state."""
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        return {k: p - lr * grads[k] for k, p in params.items()}, {**opt_state, "step": opt_state["step"] + 1}
    b1, b2 = cfg.adam_betas
    step = opt_state["step"] + 1
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * opt_state["m"][k] + (1.0 - b1) * g
        v = b2 * opt_state["v"][k] + (1.0 - b2) * g * g
        new_params[k] = p - lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps)
        m_new[k], v_new[k] = m, v
    return new_params, {"step": step, "m": m_new, "v": v_new}


def train_step(state: TrainState, pool: SlicePool, cfg: TrainConfig, net: nn.Module) -> TrainState:
    """One iteration of interpolation-consistency training.

    labelled batch -> CE; unlabelled pair -> teacher pseudo-labels -> mixed input
    and mixed target -> student on mixed input -> MSE; total = CE + r(t) * MSE;
    gradient; EMA and optimizer step in the configured order.
    """
    t = state.iteration
    if t >= cfg.total_iters:
        raise ValueError(f"iteration {t} already reached total_iters={cfg.total_iters}")
    dtype = next(iter(state.pair.student.values())).dtype

    batch = sample_batch(pool, "labelled", cfg.batch_labelled, state.rngs["labelled"])
    x = torch.from_numpy(stack_images(batch.first)).to(dtype)
    y = torch.from_numpy(stack_labels(batch.second))

    if cfg.unsupervised:
        pair = sample_batch(pool, "unlabelled", cfg.batch_unlabelled, state.rngs["unlabelled"])
        alpha = draw_alpha(cfg.mix, state.rngs["unlabelled"], cfg.batch_unlabelled)
        u_i = torch.from_numpy(stack_images(pair.first)).to(dtype)
        u_j = torch.from_numpy(stack_images(pair.second)).to(dtype)
    r_t = ramp(cfg.ramp, t)
    parts: dict[str, float] = {"l_u": 0.0}

    def loss_fn(params: ParamSet) -> torch.Tensor:
        l_ce = cross_entropy(forward(net, params, x), y)
        parts["l_ce"] = float(l_ce.detach())
        if not math.isfinite(parts["l_ce"]):
            raise NonFiniteLossError("l_ce", parts["l_ce"], t)
        if not cfg.unsupervised:
            return l_ce
        l_u = consistency_loss(net, params, state.pair.teacher, u_i, u_j, alpha)
        parts["l_u"] = float(l_u.detach())
        if not math.isfinite(parts["l_u"]):
            raise NonFiniteLossError("l_u", parts["l_u"], t)
        return l_ce + r_t * l_u

    _, grads = loss_gradient(state.pair.student, loss_fn, iteration=t)
    report = total_loss(parts["l_ce"], parts["l_u"], cfg.ramp, t)

    student = state.pair.student
    if cfg.ema_before_step:
        pair = ema_update(state.pair)
        new_student, opt_state = optimizer_step(student, grads, state.opt_state, cfg)
        pair = StudentTeacher(new_student, pair.teacher, cfg.lambda_ema)
    else:
        new_student, opt_state = optimizer_step(student, grads, state.opt_state, cfg)
        pair = ema_update(StudentTeacher(new_student, state.pair.teacher, cfg.lambda_ema))

    state.pair = pair
    state.opt_state = opt_state
    state.iteration = t + 1
    state.history.append(report)
    return state


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #


def save_state(path: str | Path, state: TrainState, cfg: TrainConfig) -> Path:
    tensors = {}
    for prefix, params in (
        ("student", state.pair.student),
        ("teacher", state.pair.teacher),
        ("adam_m", state.opt_state["m"]),
        ("adam_v", state.opt_state["v"]),
    ):
        tensors.update({f"{prefix}/{k}": v for k, v in params.items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(cfg),
        "iteration": state.iteration,
        "optimizer_step": state.opt_state["step"],
        "lambda_ema": state.pair.lambda_ema,
        "rng": {name: g.bit_generator.state for name, g in state.rngs.items()},
        "history": [[r.iteration, r.l_ce, r.l_u, r.r_t, r.total] for r in state.history],
        "validation": state.validation,
    }
    return save_checkpoint(path, tensors, meta)


def _split_prefix(tensors: dict[str, torch.Tensor], prefix: str) -> ParamSet:
    p = prefix + "/"
    return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}


def load_state(path: str | Path) -> tuple[TrainState, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    rngs = {}
    for name, st in meta["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[name] = g
    state = TrainState(
        pair=StudentTeacher(
            _split_prefix(tensors, "student"), _split_prefix(tensors, "teacher"), meta["lambda_ema"]
        ),
        iteration=int(meta["iteration"]),
        rngs=rngs,
        opt_state={
            "step": int(meta["optimizer_step"]),
            "m": _split_prefix(tensors, "adam_m"),
            "v": _split_prefix(tensors, "adam_v"),
        },
        history=[LossReport(l_ce=a, l_u=b, r_t=c, total=d, iteration=int(i)) for i, a, b, c, d in meta["history"]],
        validation=list(meta.get("validation", [])),
    )
    return state, meta


# --------------------------------------------------------------------------- #
# full runs
# --------------------------------------------------------------------------- #


def write_history(path: Path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.iteration, repr(r.l_ce), repr(r.l_u), repr(r.r_t), repr(r.total)])


def read_history(path: str | Path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LossReport(
            l_ce=float(r["l_ce"]), l_u=float(r["l_u"]), r_t=float(r["r_t"]),
            total=float(r["total"]), iteration=int(r["iteration"]),
        )
        for r in rows
    ]


def _write_validation(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "dsc", "asd", "hd"])
        for r in rows:
            w.writerow([r["iteration"], *(repr(r[k]) if r[k] is not None else "" for k in ("dsc", "asd", "hd"))])


def evaluation_volumes(split, by_id: dict[str, Volume]) -> tuple[str, list[Volume]]:
    """Test volumes, falling back to validation and then labelled training volumes."""
    for name in ("test", "validation", "labelled"):
        ids = getattr(split, name)
        if ids:
            return name, [by_id[i] for i in ids]
    raise ValueError("split has no volumes to evaluate")


def final_report(
    cfg: TrainConfig,
    net: nn.Module,
    params: ParamSet,
    volumes: list[Volume],
    split_name: str,
    iteration: int,
    which: str = "teacher",
) -> MetricReport:
    return evaluate_volumes(
        net,
        params,
        volumes,
        cfg.model.n_classes,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        iteration=iteration,
        extra={"split": split_name, "params": which},
    )


def run_training(
    config: TrainConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> MetricReport:
    """Train for ``total_iters`` steps and write every run artifact to ``out_dir``.

    Validation and the final test report use the teacher parameters.
    """
    cfg = resolve(config)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.resolved.json")
    chash = config_hash(cfg)

    volumes = read_dataset(dataset_dir)
    by_id = {v.id: v for v in volumes}
    split = make_split(volumes, cfg.data.label_fraction, cfg.data.n_validation, cfg.data.n_test, cfg.seed)
    pool = SlicePool.from_split(split, volumes)
    net = build_model(cfg.model)

    if resume_from is not None:
        state, meta = load_state(resume_from)
        if meta["config_hash"] != chash:
            raise ValueError(f"checkpoint {resume_from} was written by config {meta['config_hash']}, not {chash}")
        log.info("resumed from %s at iteration %d", resume_from, state.iteration)
    else:
        state = init_state(cfg, net)

    val_volumes = [by_id[i] for i in split.validation]
    try:
        while state.iteration < cfg.total_iters:
            train_step(state, pool, cfg, net)
            t = state.iteration
            if val_volumes and t % cfg.eval_every == 0:
                rep = evaluate_volumes(net, state.pair.teacher, val_volumes, cfg.model.n_classes)
                state.validation.append({"iteration": t, **{k: _opt(v) for k, v in rep.averaged.items()}})
                log.info("iter %d  loss %.4f  val dsc %.4f", t, state.history[-1].total, rep.averaged["dsc"])
            if t % cfg.checkpoint_every == 0 or t == cfg.total_iters:
                save_state(out / "checkpoints" / f"iter_{t}.ckpt", state, cfg)
    except NonFiniteLossError:
        write_history(out / "history.csv", state.history)
        raise
    write_history(out / "history.csv", state.history)
    _write_validation(out / "validation.csv", state.validation)

    split_name, eval_vols = evaluation_volumes(split, by_id)
    report = final_report(cfg, net, state.pair.teacher, eval_vols, split_name, state.iteration)
    report.write(out / "report.json")
    return report


def _opt(x: float):
    return None if not math.isfinite(x) else x
