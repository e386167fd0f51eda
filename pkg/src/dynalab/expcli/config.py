"""Flat ``key = value`` experiment files and their expansion into runs.

Format::

    # comments start with '#'
    name = gap
    master_seed = 0
    seeds = 0, 1, 2
    profile = desk
    env_id = pendulum/dmc
    total_steps = 30000
    sweep.algorithm = sac, mbpo, mbpo_perfect_model
    sweep.env_id = pendulum/gym, pendulum/dmc

Experiment keys are ``name``, ``master_seed``, ``seeds``, ``profile``
(``full`` or ``desk``) and ``out``. Every other key must be a
:class:`~dynalab.dyna.RunConfig` field; tuple-valued fields are written
``64x64``. ``sweep.<key>`` lines form a cross product in file order.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..dyna import CONFIG_FIELDS, DESK_PROFILE, RunConfig, sac_limit

EXPERIMENT_KEYS = ("name", "master_seed", "seeds", "profile", "out")
PROFILES = {"full": {}, "desk": DESK_PROFILE}


class ConfigError(ValueError):
    pass


def parse_value(key: str, text: str):
    """Typed value of RunConfig field ``key`` from its text form."""
    if key not in CONFIG_FIELDS:
        raise ConfigError(f"unknown RunConfig field {key!r}")
    kind = CONFIG_FIELDS[key].type
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("Tuple"):
            return tuple(int(p) for p in text.split("x"))
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} ({kind})") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    replicate: int
    config: RunConfig


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    master_seed: int = 0
    seeds: Tuple[int, ...] = (0,)
    profile: str = "full"
    out: Optional[str] = None
    base: Dict[str, object] = field(default_factory=dict)
    sweeps: List[Tuple[str, tuple]] = field(default_factory=list)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {tuple(PROFILES)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        keys = [k for k, _ in self.sweeps]
        if len(set(keys)) != len(keys):
            raise ConfigError("a key may be swept only once")
        for key in list(self.base) + keys:
            if key not in CONFIG_FIELDS:
                raise ConfigError(f"unknown RunConfig field {key!r}")
            if key == "seed":
                raise ConfigError("run seeds derive from master_seed and seeds")

    def runs(self) -> List[RunSpec]:
        """The run matrix: sweep combinations in file order, then seeds."""
        keys = [k for k, _ in self.sweeps]
        out, seen = [], set()
        for combo in itertools.product(*(vals for _, vals in self.sweeps)):
            overrides = {**PROFILES[self.profile], **self.base, **dict(zip(keys, combo))}
            label = "-".join(f"{k}={format_value(v)}" for k, v in zip(keys, combo)) or "base"
            for rep in self.seeds:
                cfg = _build(overrides, run_seed(self.master_seed, rep))
                run_id = _slug(f"{label}-rep={rep}")
                if run_id in seen:
                    raise ConfigError(f"duplicate run id {run_id}")
                seen.add(run_id)
                out.append(RunSpec(run_id, rep, cfg))
        return out


def run_seed(master_seed: int, replicate: int) -> int:
    """Seed shared by all runs of one replicate, so algorithms are compared paired."""
    return int(np.random.SeedSequence([int(master_seed), int(replicate)]).generate_state(1)[0])


def _build(overrides: dict, seed: int) -> RunConfig:
    algorithm = overrides.get("algorithm", RunConfig.algorithm)
    try:
        if algorithm == "sac":
            # sac cells always sit at the S = 0 limit whatever the base says
            clean = {k: v for k, v in overrides.items()
                     if k not in ("algorithm", "synthetic_ratio", "rollouts_per_step",
                                  "updates_per_step")}
            return sac_limit(RunConfig.for_algorithm("sac", **clean, seed=seed))
        return RunConfig(**{**overrides, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]+", "_", text.replace("/", "_"))


def parse(text: str) -> ExperimentSpec:
    raw: Dict[str, str] = {}
    base: Dict[str, object] = {}
    sweeps: List[Tuple[str, tuple]] = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key.startswith("sweep."):
            name = key[len("sweep."):]
            vals = tuple(parse_value(name, v) for v in value.split(",") if v.strip())
            if not vals:
                raise ConfigError(f"line {n}: empty sweep")
            sweeps.append((name, vals))
        elif key in EXPERIMENT_KEYS:
            raw[key] = value
        else:
            if key in base:
                raise ConfigError(f"line {n}: {key} set twice")
            base[key] = parse_value(key, value)
    try:
        seeds = tuple(int(s) for s in raw.get("seeds", "0").split(",") if s.strip())
        master = int(raw.get("master_seed", "0"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentSpec(name=raw.get("name", "experiment"), master_seed=master, seeds=seeds,
                          profile=raw.get("profile", "full"), out=raw.get("out"), base=base,
                          sweeps=sweeps)


def emit(spec: ExperimentSpec) -> str:
    lines = [f"name = {spec.name}", f"master_seed = {spec.master_seed}",
             f"seeds = {', '.join(str(s) for s in spec.seeds)}", f"profile = {spec.profile}"]
    if spec.out is not None:
        lines.append(f"out = {spec.out}")
    lines += [f"{k} = {format_value(v)}" for k, v in spec.base.items()]
    lines += [f"sweep.{k} = {', '.join(format_value(v) for v in vals)}" for k, vals in spec.sweeps]
    return "\n".join(lines) + "\n"


def with_master_seed(spec: ExperimentSpec, seed: int) -> ExperimentSpec:
    return replace(spec, master_seed=int(seed))


def emit_run_config(config: RunConfig) -> str:
    """Every field of ``config`` as ``key = value`` lines."""
    return "".join(f"{f.name} = {format_value(getattr(config, f.name))}\n"
                   for f in fields(RunConfig))


def parse_run_config(text: str) -> RunConfig:
    values = {}
    for line in text.splitlines():
        if line.strip():
            key, value = (p.strip() for p in line.split("=", 1))
            values[key] = parse_value(key, value)
    return RunConfig(**values)
