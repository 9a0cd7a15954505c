"""Dice, Hausdorff and average symmetric surface distance on 2-D label maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree
from torch import nn

from ictseg.data import Volume, stack_images
from ictseg.model import ParamSet, forward

REPORT_SCHEMA_VERSION = 1

_CROSS = ndimage.generate_binary_structure(2, 1)


def _as_mask(labels, class_id: int) -> np.ndarray:
    arr = labels.values if hasattr(labels, "values") else np.asarray(labels)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return arr == class_id


def _check_shapes(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = pred.values if hasattr(pred, "values") else np.asarray(pred)
    g = gt.values if hasattr(gt, "values") else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def dice(pred, gt, class_id: int) -> float:
    p, g = _check_shapes(pred, gt)
    pm, gm = _as_mask(p, class_id), _as_mask(g, class_id)
    total = int(pm.sum()) + int(gm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, gm).sum()) / total


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of foreground pixels with a 4-neighbour outside the mask.

    Pixels on the grid edge count as touching the outside.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return np.argwhere(mask & ~eroded)


def _directed_distances(pred_mask, gt_mask, spacing) -> tuple[np.ndarray, np.ndarray] | None:
    bp, bg = boundary_pixels(pred_mask), boundary_pixels(gt_mask)
    if len(bp) == 0 or len(bg) == 0:
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    pts_p, pts_g = bp * scale, bg * scale
    d_pg, _ = cKDTree(pts_g).query(pts_p)
    d_gp, _ = cKDTree(pts_p).query(pts_g)
    return d_pg, d_gp


def _distance_case(pred, gt, class_id):
    p, g = _check_shapes(pred, gt)
    pm, gm = _as_mask(p, class_id), _as_mask(g, class_id)
    empty_p, empty_g = not pm.any(), not gm.any()
    if empty_p and empty_g:
        return "both_empty", pm, gm
    if empty_p or empty_g:
        return "one_empty", pm, gm
    return "ok", pm, gm


def hausdorff(pred, gt, class_id: int, spacing=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance in mm; NaN when exactly one mask is empty."""
    case, pm, gm = _distance_case(pred, gt, class_id)
    if case == "both_empty":
        return 0.0
    if case == "one_empty":
        return math.nan
    d_pg, d_gp = _directed_distances(pm, gm, spacing)
    return float(max(d_pg.max(), d_gp.max()))


def hausdorff95(pred, gt, class_id: int, spacing=(1.0, 1.0)) -> float:
    """95th-percentile Hausdorff variant (max of the two directed 95th percentiles).

    Only for comparison with work that reports HD95; reports use the exact HD.
    """
    case, pm, gm = _distance_case(pred, gt, class_id)
    if case == "both_empty":
        return 0.0
    if case == "one_empty":
        return math.nan
    d_pg, d_gp = _directed_distances(pm, gm, spacing)
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def asd(pred, gt, class_id: int, spacing=(1.0, 1.0)) -> float:
    """Mean of the two directed mean nearest-boundary distances, in mm."""
    case, pm, gm = _distance_case(pred, gt, class_id)
    if case == "both_empty":
        return 0.0
    if case == "one_empty":
        return math.nan
    d_pg, d_gp = _directed_distances(pm, gm, spacing)
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


@dataclass
class ClassMetrics:
    dsc: float
    asd: float
    hd: float
    defined: bool


@dataclass
class MetricReport:
    """Per-class and class-averaged scores over foreground classes.

    DSC is averaged over every foreground class; ASD and HD only over classes
    whose distances are defined (``n_excluded`` counts the others).
    """

    per_class: dict[int, ClassMetrics]
    averaged: dict[str, float]
    n_excluded: int
    config_hash: str = ""
    seed: int | None = None
    iteration: int | None = None
    n_volumes: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "per_class": {
                str(k): {"dsc": _num(m.dsc), "asd": _num(m.asd), "hd": _num(m.hd), "defined": m.defined}
                for k, m in sorted(self.per_class.items())
            },
            "averaged": {k: _num(v) for k, v in self.averaged.items()},
            "n_excluded": self.n_excluded,
            "n_volumes": self.n_volumes,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "iteration": self.iteration,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        per_class = {
            int(k): ClassMetrics(_unnum(v["dsc"]), _unnum(v["asd"]), _unnum(v["hd"]), bool(v["defined"]))
            for k, v in d["per_class"].items()
        }
        return cls(
            per_class=per_class,
            averaged={k: _unnum(v) for k, v in d["averaged"].items()},
            n_excluded=int(d["n_excluded"]),
            config_hash=d.get("config_hash", ""),
            seed=d.get("seed"),
            iteration=d.get("iteration"),
            n_volumes=int(d.get("n_volumes", 0)),
            extra=d.get("extra", {}),
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _num(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


def _unnum(x):
    return math.nan if x is None else float(x)


def _nanmean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def evaluate_predictions(
    predictions: Sequence[Sequence[np.ndarray]],
    volumes: Sequence[Volume],
    n_classes: int,
    **report_fields,
) -> MetricReport:
    """Aggregate metrics for predicted label maps, one list of H x W maps per volume.

    Slices are scored independently and averaged within each volume, then over
    volumes, then over foreground classes.
    """
    if not volumes:
        raise ValueError("no volumes to evaluate")
    if len(predictions) != len(volumes):
        raise ValueError("one prediction list per volume is required")
    per_class: dict[int, ClassMetrics] = {}
    for c in range(1, n_classes):
        vol_dsc, vol_asd, vol_hd = [], [], []
        for preds, vol in zip(predictions, volumes):
            if vol.labels is None:
                raise ValueError(f"volume {vol.id} has no ground truth")
            if len(preds) != len(vol):
                raise ValueError(f"volume {vol.id}: {len(preds)} predictions for {len(vol)} slices")
            s_dsc, s_asd, s_hd = [], [], []
            for pred, lab in zip(preds, vol.labels):
                gt = lab.values[:, :, 0]
                s_dsc.append(dice(pred, gt, c))
                s_asd.append(asd(pred, gt, c, vol.spacing))
                s_hd.append(hausdorff(pred, gt, c, vol.spacing))
            vol_dsc.append(sum(s_dsc) / len(s_dsc))
            vol_asd.append(_nanmean(s_asd))
            vol_hd.append(_nanmean(s_hd))
        c_asd, c_hd = _nanmean(vol_asd), _nanmean(vol_hd)
        per_class[c] = ClassMetrics(
            dsc=sum(vol_dsc) / len(vol_dsc), asd=c_asd, hd=c_hd, defined=not math.isnan(c_hd)
        )
    defined = [m for m in per_class.values() if m.defined]
    averaged = {
        "dsc": sum(m.dsc for m in per_class.values()) / len(per_class),
        "asd": sum(m.asd for m in defined) / len(defined) if defined else math.nan,
        "hd": sum(m.hd for m in defined) / len(defined) if defined else math.nan,
    }
    return MetricReport(
        per_class=per_class,
        averaged=averaged,
        n_excluded=len(per_class) - len(defined),
        n_volumes=len(volumes),
        **report_fields,
    )


@torch.no_grad()
def predict_volume(net: nn.Module, params: ParamSet, volume: Volume, batch_size: int = 32) -> list[np.ndarray]:
    """Argmax label map for each slice of ``volume``."""
    dtype = next(iter(params.values())).dtype
    out = []
    for start in range(0, len(volume), batch_size):
        x = torch.from_numpy(stack_images(volume.images[start : start + batch_size])).to(dtype)
        probs = forward(net, params, x)
        out.extend(probs.argmax(dim=1).numpy().astype(np.int64))
    return out


def evaluate_volumes(
    net: nn.Module,
    params: ParamSet,
    volumes: Sequence[Volume],
    n_classes: int,
    **report_fields,
) -> MetricReport:
    predictions = [predict_volume(net, params, v) for v in volumes]
    return evaluate_predictions(predictions, volumes, n_classes, **report_fields)
