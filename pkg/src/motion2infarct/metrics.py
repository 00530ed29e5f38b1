"""Agreement metrics between predicted and ground-truth vertex labels."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .spatial import KDTree

METRICS = ("dice", "recall", "asd_mm", "gdice")


def _as_bool(labels):
    arr = getattr(labels, "labels", labels)
    return np.asarray(arr).astype(bool)


def _pair(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"label size mismatch: {p.size} vs {g.size}")
    return p, g


def dice(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both sets are empty."""
    p, g = _pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / denom


def recall(pred, gt) -> float:
    p, g = _pair(pred, gt)
    if not g.any():
        return 1.0
    return np.count_nonzero(p & g) / np.count_nonzero(g)


def asd(pred, gt, positions) -> float:
    """Symmetric average distance (mm) between labelled vertex position sets.

    Returns NaN when either set is empty.
    """
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return math.nan
    pos = np.asarray(positions, dtype=np.float64)
    pp, gp = pos[p], pos[g]
    d_pg = np.sqrt(KDTree(gp).query(pp, 1)[0][:, 0])
    d_gp = np.sqrt(KDTree(pp).query(gp, 1)[0][:, 0])
    return 0.5 * (d_pg.mean() + d_gp.mean())


def generalized_dice(pred, gt, eps=1e-6) -> float:
    """Two-class (background, infarct) generalized Dice.

    Class weights are ``1 / max(|G_l|, eps)**2``, so a class absent from the
    ground truth gets weight ``1 / eps**2``.
    """
    p, g = _pair(pred, gt)
    num = den = 0.0
    for gl, pl in ((~g, ~p), (g, p)):
        w = 1.0 / max(float(gl.sum()), eps) ** 2
        num += w * np.count_nonzero(gl & pl)
        den += w * (gl.sum() + pl.sum())
    if den == 0:
        return 1.0
    return 2.0 * num / den


@dataclass
class EvalReport:
    dice: float
    recall: float
    asd_mm: float
    gdice: float
    std: dict = field(default_factory=dict)
    per_case: list = field(default_factory=list)
    asd_excluded: int = 0
    n_cases: int = 0

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and math.isnan(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean(asdict(self)), indent=1)

    @classmethod
    def from_json(cls, text) -> "EvalReport":
        doc = json.loads(text)

        def nan(x):
            return math.nan if x is None else x
        for k in METRICS:
            doc[k] = nan(doc[k])
        doc["std"] = {k: nan(v) for k, v in doc["std"].items()}
        doc["per_case"] = [{k: (nan(v) if k in METRICS else v) for k, v in c.items()}
                           for c in doc["per_case"]]
        return cls(**doc)

    def summary(self) -> str:
        return "  ".join(f"{k}={getattr(self, k):.3f}±{self.std.get(k, math.nan):.3f}" for k in METRICS)


def _mean_std(values):
    vals = np.array([v for v in values if not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), std


def evaluate_case(pred, gt, positions) -> dict:
    return {"dice": float(dice(pred, gt)), "recall": float(recall(pred, gt)),
            "asd_mm": float(asd(pred, gt, positions)), "gdice": float(generalized_dice(pred, gt))}


def evaluate_dataset(cases, names=None) -> EvalReport:
    """Mean and sample standard deviation of each metric over ``(pred, gt, positions)`` cases.

    Cases with undefined ASD are left out of the ASD aggregate and counted.
    """
    if not cases:
        raise ValueError("no cases to evaluate")
    per_case = []
    for i, (pred, gt, pos) in enumerate(cases):
        row = evaluate_case(pred, gt, pos)
        row["case"] = names[i] if names is not None else i
        per_case.append(row)
    means, stds = {}, {}
    for k in METRICS:
        means[k], stds[k] = _mean_std([row[k] for row in per_case])
    excluded = sum(math.isnan(row["asd_mm"]) for row in per_case)
    return EvalReport(std=stds, per_case=per_case, asd_excluded=excluded,
                      n_cases=len(per_case), **means)
