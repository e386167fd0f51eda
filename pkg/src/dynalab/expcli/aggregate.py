"""Cross-run aggregation, timing tables and plot data, all read back from disk."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..dyna import format_rows
from ..envsuite import make_spec
from .config import parse_run_config
from .runner import run_dirs

NORMALIZERS = ("per_task_max_mean", "dmc_max_return")
PLOT_METRICS = {"return": "eval_return_mean", "mean_q": "mean_q",
                "model_error": "pct_model_error"}
AGGREGATE_HEADER = ("task", "algorithm", "normalized_return", "raw_mean", "raw_std",
                    "n_seeds", "expected_seeds", "sec_per_env_step_mean", "note")
TIMING_HEADER = ("run", "task", "algorithm", "mean", "p95", "n", "flag")
PLOT_HEADER = ("task", "series", "x", "y", "band", "n")


@dataclass
class RunRecord:
    path: Path
    task: str
    algorithm: str
    seed: int
    metrics: List[dict]

    def column(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Steps and values of the rows where ``name`` is present."""
        pairs = [(int(r["step"]), float(r[name])) for r in self.metrics if r.get(name, "") != ""]
        if not pairs:
            return np.zeros(0, int), np.zeros(0)
        steps, vals = zip(*pairs)
        return np.array(steps), np.array(vals)

    def final_return(self) -> Optional[float]:
        _, vals = self.column("eval_return_mean")
        return float(vals[-1]) if len(vals) else None


def load_runs(paths: Union[str, Path, Iterable[Union[str, Path]]]) -> List[RunRecord]:
    """Completed runs (those with a metrics file) under the given roots."""
    roots = [paths] if isinstance(paths, (str, Path)) else list(paths)
    records = []
    for root in roots:
        for d in run_dirs(root):
            metrics = d / "metrics.csv"
            if not metrics.exists():
                continue
            cfg = parse_run_config((d / "config.txt").read_text())
            with open(metrics, newline="") as fh:
                rows = list(csv.DictReader(fh))
            records.append(RunRecord(d, cfg.env_id, cfg.algorithm, cfg.seed, rows))
    return records


@dataclass
class AggregateRow:
    task: str
    algorithm: str
    normalized_return: float
    raw_mean: float
    raw_std: float
    n_seeds: int
    expected_seeds: int
    sec_per_env_step_mean: float
    note: str = ""


def _normalize(cells: Dict[Tuple[str, str], List[float]], normalizer: str) -> Dict:
    means = {k: float(np.mean(v)) for k, v in cells.items() if v}
    out = {}
    for (task, alg), m in means.items():
        if normalizer == "per_task_max_mean":
            top = max(v for (t, _), v in means.items() if t == task)
            out[(task, alg)] = (m / top, "") if top > 0 else (math.nan, "non-positive maximum")
        else:
            _, variant = make_spec(task)
            if variant.reward_style != "normalized_unit":
                out[(task, alg)] = (math.nan, "dmc_max_return needs unit rewards")
            else:
                out[(task, alg)] = (m / (variant.horizon * 1.0), "")
    return out


def aggregate(paths, normalizer: str = "per_task_max_mean",
              expected: Optional[Dict[Tuple[str, str], int]] = None,
              cells: Sequence[Tuple[str, str]] = ()) -> List[AggregateRow]:
    """One row per (task, algorithm) cell of final eval returns.

    ``cells`` lists cells that should exist; those without completed runs
    come back as rows with ``n_seeds = 0`` and note ``missing``.
    """
    if normalizer not in NORMALIZERS:
        raise ValueError(f"normalizer must be one of {NORMALIZERS}")
    records = load_runs(paths)
    finals: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    timing: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for rec in records:
        key = (rec.task, rec.algorithm)
        f = rec.final_return()
        if f is not None:
            finals[key].append(f)
        _, t = rec.column("sec_per_env_step")
        timing[key].extend(t.tolist())
    norm = _normalize(finals, normalizer)
    keys = sorted(set(finals) | set(timing) | set(cells))
    expected = expected or {}
    rows = []
    for key in keys:
        vals = finals.get(key, [])
        n_norm, note = norm.get(key, (math.nan, "missing"))
        exp = expected.get(key, len(vals))
        if vals and exp != len(vals):
            note = (note + "; " if note else "") + "seed count mismatch"
        t = timing.get(key, [])
        rows.append(AggregateRow(key[0], key[1], n_norm,
                                 float(np.mean(vals)) if vals else math.nan,
                                 float(np.std(vals)) if vals else math.nan, len(vals), exp,
                                 float(np.mean(t)) if t else math.nan, note))
    return rows


def aggregate_table(rows: Sequence[AggregateRow]) -> str:
    return format_rows([asdict(r) for r in rows], AGGREGATE_HEADER)


def plot_data(paths, metric: str) -> List[dict]:
    """Long-format series: mean and std across seeds of ``metric`` at each logged step."""
    column = PLOT_METRICS[metric]
    groups: Dict[Tuple[str, str], List[Tuple[np.ndarray, np.ndarray]]] = defaultdict(list)
    for rec in load_runs(paths):
        steps, vals = rec.column(column)
        if len(steps):
            groups[(rec.task, rec.algorithm)].append((steps, vals))
    rows = []
    for (task, alg) in sorted(groups):
        by_step: Dict[int, List[float]] = defaultdict(list)
        for steps, vals in groups[(task, alg)]:
            for s, v in zip(steps.tolist(), vals.tolist()):
                by_step[s].append(v)
        for s in sorted(by_step):
            v = by_step[s]
            rows.append({"task": task, "series": alg, "x": s, "y": float(np.mean(v)),
                         "band": float(np.std(v)), "n": len(v)})
    return rows


def percentile95(values: np.ndarray) -> float:
    return float(np.percentile(values, 95))


def time_runs(paths) -> List[dict]:
    """Per-run mean and p95 of sec_per_env_step, then per-(task, algorithm) means.

    Runs without timing data are listed with flag ``no_timing`` and empty numbers.
    """
    rows, by_alg = [], defaultdict(list)
    for rec in load_runs(paths):
        _, t = rec.column("sec_per_env_step")
        if len(t) == 0:
            rows.append({"run": rec.path.name, "task": rec.task, "algorithm": rec.algorithm,
                         "mean": "", "p95": "", "n": 0, "flag": "no_timing"})
            continue
        rows.append({"run": rec.path.name, "task": rec.task, "algorithm": rec.algorithm,
                     "mean": float(np.mean(t)), "p95": percentile95(t), "n": len(t), "flag": ""})
        by_alg[(rec.task, rec.algorithm)].append(float(np.mean(t)))
    for (task, alg), means in sorted(by_alg.items()):
        rows.append({"run": "*", "task": task, "algorithm": alg, "mean": float(np.mean(means)),
                     "p95": "", "n": len(means), "flag": "algorithm_mean"})
    return rows


def write_outputs(root: Union[str, Path], paths=None, normalizer: str = "per_task_max_mean",
                  expected=None, cells=()) -> Dict[str, Path]:
    """Write aggregate, timing and plot files under ``root/aggregate``."""
    root = Path(root)
    paths = root if paths is None else paths
    out = root / "aggregate"
    out.mkdir(parents=True, exist_ok=True)
    written = {"aggregate": out / "aggregate.csv", "timing": out / "timing.csv"}
    written["aggregate"].write_text(aggregate_table(aggregate(paths, normalizer, expected,
                                                             cells)))
    written["timing"].write_text(format_rows(time_runs(paths), TIMING_HEADER))
    from .svg import line_chart

    for metric in PLOT_METRICS:
        rows = plot_data(paths, metric)
        p = out / f"plot_{metric}.csv"
        p.write_text(format_rows(rows, PLOT_HEADER))
        written[f"plot_{metric}"] = p
        for task in sorted({r["task"] for r in rows}):
            svg = out / f"plot_{metric}_{task.replace('/', '_')}.svg"
            svg.write_text(line_chart([r for r in rows if r["task"] == task],
                                      title=f"{task} {metric}"))
            written[svg.stem] = svg
    return written
