"""Metrics, multi-seed reports and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .model import predict
from .training import prepare_splits, train

DEFAULT_SEEDS = (0, 1, 2, 3, 4)

AXES = {
    "input-source": ("input_source", str),
    "speaker-view": ("speaker_view", str),
    "enc-dec-layers": (("L_enc", "L_dec"), None),
    "history-dropout": ("p_hist", float),
    "N_max": ("N_max", int),
    "memory-mechanism": ("memory_mode", str),
    "memory-slots": ("S", int),
    "lambda-sym": ("lambda_sym", float),
    "readout": ("readout", str),
}
AXIS_ALIASES = {"n-max": "N_max", "n_max": "N_max", "λ_sym": "lambda-sym", "lambda_sym": "lambda-sym"}


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mae of an empty set")
    return float(np.mean(np.abs(pred - target)))


def per_session_mae(pred, target, session_index) -> dict:
    """MAE grouped by session index (only indices that occur)."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    idx = np.asarray(session_index)
    return {int(k): mae(pred[idx == k], target[idx == k]) for k in np.unique(idx)}


def aggregate_seeds(values):
    """(mean, sample std with n-1 denominator); exact for identical values."""
    v = [float(x) for x in values]
    if len(v) < 2:
        raise ValueError("need at least two per-seed values")
    return statistics.fmean(v), statistics.stdev(v)


@dataclass
class SeedResult:
    seed: int
    overall_mae: float
    per_session: dict
    symptom_mae: float = None
    predictions: list = field(default_factory=list)

    def to_dict(self):
        return {"seed": self.seed, "overall_mae": self.overall_mae,
                "per_session_mae": {str(k): v for k, v in sorted(self.per_session.items())},
                "symptom_mae": self.symptom_mae, "predictions": self.predictions}


def evaluate(params, cfg: TrainConfig, examples, seed=0) -> SeedResult:
    """Eval-mode predictions for one seed's model; no parameter is modified."""
    if not examples:
        raise ValueError("evaluation split is empty")
    items, totals = predict(params, cfg.model, examples)
    targets = np.array([e.target_total for e in examples], dtype=np.float64)
    index = np.array([e.session_index for e in examples])
    sym = None
    have_items = [i for i, e in enumerate(examples) if e.target_items is not None]
    if have_items:
        t_items = np.stack([examples[i].target_items for i in have_items])
        sym = float(np.mean(np.abs(items[have_items] - t_items)))
    preds = [{"run_id": e.run_id, "session_index": e.session_index,
              "pred_total": float(totals[i]), "target_total": float(targets[i]),
              "pred_items": [float(v) for v in items[i]]}
             for i, e in enumerate(examples)]
    return SeedResult(seed, mae(totals, targets), per_session_mae(totals, targets, index), sym, preds)


@dataclass
class EvalReport:
    seeds: list
    overall_mae: float
    per_session_mae: dict
    mean: float
    std: float = None
    symptom_mae: float = None
    config_fingerprint: str = ""

    @classmethod
    def from_seeds(cls, results, fingerprint=""):
        results = sorted(results, key=lambda r: r.seed)
        overall = [r.overall_mae for r in results]
        mean, std = (aggregate_seeds(overall) if len(results) > 1 else (overall[0], None))
        idx = sorted({k for r in results for k in r.per_session})
        per = {k: float(np.mean([r.per_session[k] for r in results if k in r.per_session])) for k in idx}
        sym = [r.symptom_mae for r in results if r.symptom_mae is not None]
        return cls(results, mean, per, mean, std, float(np.mean(sym)) if sym else None, fingerprint)

    def to_dict(self):
        return {
            "overall_mae": self.overall_mae,
            "mean": self.mean,
            "std": self.std,
            "per_session_mae": {str(k): v for k, v in sorted(self.per_session_mae.items())},
            "symptom_mae": self.symptom_mae,
            "config_fingerprint": self.config_fingerprint,
            "per_seed": [r.to_dict() for r in self.seeds],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# -- ablation -----------------------------------------------------------------------

def axis_overrides(axis: str, value) -> dict:
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key, cast = AXES[axis]
    if axis == "enc-dec-layers":
        enc, dec = (int(p) for p in str(value).lower().split("x"))
        return {"L_enc": enc, "L_dec": dec}
    return {key: cast(value)}


def train_and_evaluate(cfg: TrainConfig, corpus, manifest, seed, split="test") -> SeedResult:
    cfg = cfg.replace(seed=seed)
    prep = prepare_splits(corpus, manifest, cfg)
    res = train(prep.train, prep.val, cfg, seed=seed)
    return evaluate(res.params, cfg, getattr(prep, split), seed)


def _cell(args):
    axis, value, base, corpus, manifest, seed = args
    cfg = base.replace(**axis_overrides(axis, value))
    return str(value), train_and_evaluate(cfg, corpus, manifest, seed)


@dataclass
class AblationTable:
    axis: str
    rows: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        idx = sorted({k for r in self.rows.values() for k in r.per_session_mae})
        w.writerow(["axis", "value", "mean_mae", "std_mae", "n_seeds", "symptom_mae"]
                   + [f"mae_session_{k}" for k in idx])
        for value, rep in self.rows.items():
            w.writerow([self.axis, value, f"{rep.mean:.6f}",
                        "" if rep.std is None else f"{rep.std:.6f}", len(rep.seeds),
                        "" if rep.symptom_mae is None else f"{rep.symptom_mae:.6f}"]
                       + [f"{rep.per_session_mae[k]:.6f}" if k in rep.per_session_mae else "" for k in idx])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"axis": self.axis, "rows": {k: v.to_dict() for k, v in self.rows.items()}},
                          indent=1, sort_keys=True) + "\n"


def run_ablation(axis, grid, base: TrainConfig, corpus, manifest, seeds=DEFAULT_SEEDS, jobs=1) -> AblationTable:
    """Train and evaluate one model per (grid value, seed); rows keep grid order."""
    axis = AXIS_ALIASES.get(axis, axis)
    for v in grid:
        base.replace(**axis_overrides(axis, v))  # fail fast on bad values
    tasks = [(axis, v, base, corpus, manifest, s) for v in grid for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]
    rows = {}
    for v in grid:
        cell = [r for key, r in results if key == str(v)]
        cfg = base.replace(**axis_overrides(axis, v))
        rows[str(v)] = EvalReport.from_seeds(cell, cfg.fingerprint())
    return AblationTable(axis, rows)
