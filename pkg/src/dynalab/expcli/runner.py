"""Execute an experiment's run matrix and write a hashed artifact manifest."""
from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

from ..diffmath.serialize import save_params
from ..dyna import METRICS_HEADER, format_rows, train
from .config import ExperimentSpec, RunSpec, emit, emit_run_config

MANIFEST_HEADER = ("run_id", "status", "artifact", "sha256", "canonical_sha256", "error")
SNAPSHOTS = ("actor_", "critic_", "target_critic_", "log_alpha_")

EXIT_OK, EXIT_TOTAL_FAILURE, EXIT_PARTIAL = 0, 1, 2


def canonical_metrics(text: str) -> str:
    """Metrics CSV with the wall-clock column emptied; the deterministic part."""
    rows = list(csv.DictReader(io.StringIO(text)))
    return format_rows(rows, METRICS_HEADER, blank=("sec_per_env_step",))


def file_hashes(path: Path):
    data = path.read_bytes()
    raw = hashlib.sha256(data).hexdigest()
    if path.name == "metrics.csv":
        canon = hashlib.sha256(canonical_metrics(data.decode()).encode()).hexdigest()
    else:
        canon = raw
    return raw, canon


@dataclass
class RunOutcome:
    run_id: str
    status: str
    error: str = ""


def execute_run(run: RunSpec, root: Union[str, Path]) -> RunOutcome:
    """One isolated run; writes everything under ``root/runs/<run_id>``."""
    out = Path(root) / "runs" / run.run_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_run_config(run.config))
    try:
        result = train(run.config, out)
    except Exception as exc:  # recorded in the manifest
        (out / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
        return RunOutcome(run.run_id, "failed", f"{type(exc).__name__}: {exc}")
    for name in SNAPSHOTS:
        save_params(out / f"{name.rstrip('_')}.dynl", getattr(result.agent, name))
    model = result.model
    if model is not None and hasattr(model, "ensemble"):
        save_params(out / "ensemble.dynl", model.ensemble.params_)
    return RunOutcome(run.run_id, "ok")


def _execute(args):
    return execute_run(*args)


def run_experiment(spec: ExperimentSpec, parallelism: int = 1,
                   out: Union[str, Path, None] = None,
                   runs: Optional[Sequence[RunSpec]] = None) -> int:
    """Run every cell of ``spec``; returns the process exit status.

    Runs are independent processes when ``parallelism > 1``. The manifest
    lists each artifact with its raw hash and a canonical hash that ignores
    the wall-clock column, so reruns can be compared exactly.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    root = Path(out if out is not None else spec.out or spec.name)
    root.mkdir(parents=True, exist_ok=True)
    runs = list(spec.runs() if runs is None else runs)
    (root / "experiment.txt").write_text(emit(spec))
    jobs = [(r, root) for r in runs]
    if parallelism == 1:
        outcomes = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(_execute, jobs))
    write_manifest(root, outcomes)
    failed = sum(o.status != "ok" for o in outcomes)
    if failed == 0:
        return EXIT_OK
    return EXIT_TOTAL_FAILURE if failed == len(outcomes) else EXIT_PARTIAL


def write_manifest(root: Path, outcomes: List[RunOutcome]) -> Path:
    rows = []
    for o in outcomes:
        run_dir = root / "runs" / o.run_id
        for path in sorted(run_dir.iterdir()):
            raw, canon = file_hashes(path)
            rows.append({"run_id": o.run_id, "status": o.status,
                         "artifact": path.relative_to(root).as_posix(), "sha256": raw,
                         "canonical_sha256": canon, "error": o.error})
    path = root / "manifest.csv"
    path.write_text(format_rows(rows, MANIFEST_HEADER))
    return path


def read_manifest(root: Union[str, Path]) -> List[dict]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def manifest_digest(root: Union[str, Path]) -> str:
    """One hash over all canonical artifact hashes of an experiment."""
    h = hashlib.sha256()
    for row in read_manifest(root):
        h.update(f"{row['artifact']}:{row['canonical_sha256']}\n".encode())
    return h.hexdigest()


def run_dirs(root: Union[str, Path]) -> List[Path]:
    """Run directories under an experiment root, or ``root`` itself if it is a run."""
    root = Path(root)
    if (root / "config.txt").exists():
        return [root]
    base = root / "runs" if (root / "runs").is_dir() else root
    return sorted(p for p in base.iterdir() if (p / "config.txt").exists())
