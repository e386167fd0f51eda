"""Experiment files, the run matrix, aggregation and the ``dynalab`` CLI."""
from .aggregate import (AggregateRow, NORMALIZERS, aggregate, aggregate_table, load_runs,
                        plot_data, time_runs, write_outputs)
from .cli import main
from .config import (ConfigError, ExperimentSpec, RunSpec, emit, emit_run_config, parse,
                     parse_run_config, run_seed)
from .runner import (EXIT_OK, EXIT_PARTIAL, EXIT_TOTAL_FAILURE, canonical_metrics,
                     manifest_digest, read_manifest, run_dirs, run_experiment)
from .svg import line_chart

__all__ = [
    "AggregateRow", "NORMALIZERS", "aggregate", "aggregate_table", "load_runs", "plot_data",
    "time_runs", "write_outputs", "main", "ConfigError", "ExperimentSpec", "RunSpec", "emit",
    "emit_run_config", "parse", "parse_run_config", "run_seed", "EXIT_OK", "EXIT_PARTIAL",
    "EXIT_TOTAL_FAILURE", "canonical_metrics", "manifest_digest", "read_manifest", "run_dirs",
    "run_experiment", "line_chart",
]
