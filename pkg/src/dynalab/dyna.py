"""The Dyna training loop: real interaction, model fitting, rollouts, mixed-batch updates.

A run is a pure function of its :class:`RunConfig`. Every source of
randomness is a separate stream keyed by ``(seed, stream name)``, so turning
the model off leaves the agent's streams untouched and an MBPO run without
synthetic data reproduces a SAC run byte for byte.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .envsuite import Env, EnvState, make_spec
from .replay import RingBuffer, sample_mixed
from .sac import SACAgent, UpdateReport, evaluate
from .worldmodel import (LearnedModel, PerfectModel, ProbabilisticEnsemble, generate_rollouts,
                         reset_model_params, train_ensemble)

ALGORITHMS = ("sac", "mbpo", "mbpo_perfect_model")

METRICS_HEADER = ("step", "eval_return_mean", "eval_return_std", "mean_q", "critic_loss",
                  "actor_loss", "temperature", "pct_model_error", "sec_per_env_step", "event")
MODEL_REPORT_HEADER = ("step", "member", "train_nll", "val_nll", "pct_model_error")

STREAMS = {"agent_init": 1, "model_init": 2, "env": 3, "explore": 4, "act": 5, "batch": 6,
           "model_fit": 7, "rollout": 8, "eval": 9, "agent_reset": 10, "model_reset": 11}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, index)])


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a training run.

    Periods and intervals of ``0`` disable the corresponding event. The
    defaults are the full-size MBPO settings; :meth:`desk` scales them down
    for single-core runs and :meth:`for_algorithm` applies the SAC limit.
    """

    env_id: str = "pendulum/dmc"
    algorithm: str = "mbpo"
    synthetic_ratio: float = 0.95
    updates_per_step: int = 20
    retrain_interval: int = 250
    rollouts_per_step: int = 400
    model_horizon: int = 1
    model_train_steps: int = 2500
    total_steps: int = 30_000
    warmup_steps: int = 10_000
    batch_size: int = 256
    eval_interval: int = 1000
    eval_episodes: int = 5
    log_interval: int = 250
    agent_reset_period: int = 0
    model_reset_period: int = 0
    layernorm: bool = False
    seed: int = 0
    agent_hidden: Tuple[int, ...] = (256, 256)
    ensemble_hidden: Tuple[int, ...] = (200, 200)
    n_members: int = 7
    n_elites: int = 5
    gamma: float = 0.99
    lr: float = 3e-4
    model_lr: float = 3e-4
    model_batch_size: int = 256
    soft_update_rate: float = 0.995
    soft_update_convention: str = "retain"
    initial_temperature: float = 1.0
    real_capacity: int = 1_000_000
    synthetic_capacity: int = 100_000
    audit_interval: int = 250
    dtype: str = "float64"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        make_spec(self.env_id)
        if not 0.0 <= self.synthetic_ratio <= 1.0:
            raise ValueError("synthetic_ratio must lie in [0, 1]")
        if self.algorithm == "sac" and (self.synthetic_ratio != 0 or self.rollouts_per_step != 0):
            raise ValueError("sac runs use synthetic_ratio = 0 and no rollouts")
        if self.synthetic_ratio > 0 and self.rollouts_per_step == 0:
            raise ValueError("synthetic_ratio > 0 needs rollouts_per_step > 0")
        for name in ("updates_per_step", "retrain_interval", "rollouts_per_step",
                     "model_train_steps", "warmup_steps", "eval_interval", "eval_episodes",
                     "log_interval", "agent_reset_period", "model_reset_period",
                     "audit_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0 (0 disables)")
        for name in ("total_steps", "batch_size", "model_horizon", "real_capacity",
                     "synthetic_capacity", "n_members", "n_elites", "model_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.uses_learned_model and self.retrain_interval == 0:
            raise ValueError("a learned model needs retrain_interval > 0")

    @classmethod
    def for_algorithm(cls, algorithm: str, **overrides) -> "RunConfig":
        """Defaults for ``algorithm``; ``sac`` gets S = 0, no rollouts and one update per step."""
        base = dict(synthetic_ratio=0.0, rollouts_per_step=0, updates_per_step=1) \
            if algorithm == "sac" else {}
        return cls(algorithm=algorithm, **{**base, **overrides})

    @classmethod
    def desk(cls, algorithm: str = "mbpo", **overrides) -> "RunConfig":
        """Single-core scale: small networks, short warmup, 32-bit math."""
        return cls.for_algorithm(algorithm, **{**DESK_PROFILE, **overrides})

    @property
    def has_model(self) -> bool:
        """A model exists only when something consumes its rollouts."""
        return self.algorithm != "sac" and self.rollouts_per_step > 0

    @property
    def uses_learned_model(self) -> bool:
        return self.has_model and self.algorithm == "mbpo"

    @property
    def post_warmup_steps(self) -> int:
        return max(0, self.total_steps - self.warmup_steps)


DESK_PROFILE = dict(warmup_steps=1000, agent_hidden=(64, 64), ensemble_hidden=(64, 64),
                    model_train_steps=125, eval_interval=2500, eval_episodes=3,
                    dtype="float32")

CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


# ---------------------------------------------------------------- ledger


@dataclass
class RunLedger:
    env_steps: int = 0
    post_warmup_steps: int = 0
    gradient_updates: int = 0
    min_updates_per_step: int = 0
    max_updates_per_step: int = 0
    model_retrains: int = 0
    rollouts_generated: int = 0
    blowups_dropped: int = 0
    agent_resets: int = 0
    model_resets: int = 0
    episodes: int = 0
    clipped_actions: int = 0
    audited_transitions: int = 0
    audit_failures: int = 0

    def record_updates(self, n: int) -> None:
        if self.post_warmup_steps == 0:
            self.min_updates_per_step = self.max_updates_per_step = n
        self.min_updates_per_step = min(self.min_updates_per_step, n)
        self.max_updates_per_step = max(self.max_updates_per_step, n)
        self.post_warmup_steps += 1
        self.gradient_updates += n

    @staticmethod
    def expected(config: RunConfig) -> Dict[str, int]:
        """Closed-form counters implied by the config (dropped blowups aside)."""
        post = config.post_warmup_steps
        retrains = math.ceil(post / config.retrain_interval) if config.uses_learned_model else 0
        rollouts = post * config.rollouts_per_step if config.has_model else 0

        def every(period):
            return config.total_steps // period if period else 0

        return {"env_steps": config.total_steps, "post_warmup_steps": post,
                "gradient_updates": post * config.updates_per_step,
                "model_retrains": retrains, "agent_resets": every(config.agent_reset_period),
                "model_resets": every(config.model_reset_period) if config.uses_learned_model else 0,
                "rollouts_generated": rollouts}

    def check(self, config: RunConfig) -> List[str]:
        """Mismatches between counters and the closed forms; empty when consistent."""
        problems = []
        for key, want in self.expected(config).items():
            have = getattr(self, key)
            if key == "rollouts_generated":
                have += self.blowups_dropped
                if config.model_horizon > 1:
                    continue
            if have != want:
                problems.append(f"{key}: {have} != {want}")
        if self.post_warmup_steps and not (self.min_updates_per_step == self.max_updates_per_step
                                           == config.updates_per_step):
            problems.append("updates per post-warmup step not constant")
        if self.audit_failures:
            problems.append(f"{self.audit_failures} perfect-model audit failures")
        return problems

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RunLedger":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, value = (p.strip() for p in line.split("=", 1))
                values[key] = int(value)
        return cls(**values)


# ---------------------------------------------------------------- interventions


def build_agent(config: RunConfig, obs_dim: int, act_dim: int, rng) -> SACAgent:
    return SACAgent(hidden_sizes=tuple(config.agent_hidden), gamma=config.gamma, lr=config.lr,
                    initial_temperature=config.initial_temperature,
                    soft_update_rate=config.soft_update_rate,
                    soft_update_convention=config.soft_update_convention,
                    layernorm=config.layernorm, dtype=config.dtype).initialize(obs_dim, act_dim,
                                                                              rng)


def build_model(config: RunConfig):
    if not config.has_model:
        return None
    if config.algorithm == "mbpo_perfect_model":
        return PerfectModel(config.env_id)
    env = Env(config.env_id)
    ens = ProbabilisticEnsemble(n_members=config.n_members, n_elites=config.n_elites,
                                hidden_sizes=tuple(config.ensemble_hidden), lr=config.model_lr,
                                batch_size=config.model_batch_size,
                                train_steps=config.model_train_steps, dtype=config.dtype)
    ens.initialize(env.obs_dim + env.act_dim, env.obs_dim + 1,
                   stream(config.seed, "model_init"))
    return LearnedModel(ens, config.env_id)


def apply_interventions(config: RunConfig, step: int, agent: SACAgent,
                        model=None) -> List[str]:
    """Run the resets scheduled at ``step``; returns the event tags that fired.

    Each reset draws from its own generator ``stream(seed, kind, k)`` where
    ``k`` counts the resets of that kind, so a reset is reproducible in
    isolation.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    events = []
    p = config.agent_reset_period
    if p and step > 0 and step % p == 0:
        agent.reset_agent(stream(config.seed, "agent_reset", step // p))
        events.append("agent_reset")
    p = config.model_reset_period
    if p and step > 0 and step % p == 0 and isinstance(model, LearnedModel):
        reset_model_params(model, stream(config.seed, "model_reset", step // p))
        events.append("model_reset")
    return events


# ---------------------------------------------------------------- run


class RunAbortedError(RuntimeError):
    """A component failed; ``step`` is the environment step being processed."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"run aborted at env step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class TrainResult:
    config: RunConfig
    agent: SACAgent
    model: object
    ledger: RunLedger
    metrics: List[dict]
    model_report: List[dict]
    real: RingBuffer
    synthetic: Optional[RingBuffer]

    def final_return(self) -> float:
        evals = [r["eval_return_mean"] for r in self.metrics if r["eval_return_mean"] != ""]
        return float(evals[-1]) if evals else float("nan")


def format_rows(rows: Sequence[dict], header: Sequence[str],
                blank: Sequence[str] = ()) -> str:
    """CSV text with floats in shortest round-trip form; ``blank`` columns emptied."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if k in blank else _fmt(row.get(k, "")) for k in header])
    return out.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


Hook = Callable[[str, int, dict], None]


def train(config: RunConfig, out_dir: Union[str, Path, None] = None,
          hook: Optional[Hook] = None) -> TrainResult:
    """Execute one run; write ``metrics.csv``, ``model_report.csv`` and ``ledger.txt`` if asked.

    Per environment step the order is fixed: act, env step, store, maybe
    retrain, maybe rollouts, updates, maybe resets, maybe evaluate. ``hook``
    is called as ``hook(point, step, state)`` before and after interventions.
    """
    run = _Run(config, hook)
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            run.env_step(step)
    except Exception as exc:
        raise RunAbortedError(step, exc) from exc
    result = run.result()
    if out_dir is not None:
        write_run(result, Path(out_dir))
    return result


def write_run(result: TrainResult, out_dir: Path) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out_dir / "metrics.csv", "model_report": out_dir / "model_report.csv",
             "ledger": out_dir / "ledger.txt"}
    paths["metrics"].write_text(format_rows(result.metrics, METRICS_HEADER))
    paths["model_report"].write_text(format_rows(result.model_report, MODEL_REPORT_HEADER))
    paths["ledger"].write_text(result.ledger.to_text())
    return paths


class _Run:
    def __init__(self, config: RunConfig, hook: Optional[Hook]):
        self.c = c = config
        self.hook = hook
        self.env = Env(c.env_id)
        self.scale = self.env.action_scale
        obs_dim, act_dim = self.env.obs_dim, self.env.act_dim
        self.agent = build_agent(c, obs_dim, act_dim, stream(c.seed, "agent_init"))
        self.model = build_model(c)
        self.real = RingBuffer(c.real_capacity, obs_dim, act_dim, "real")
        self.synthetic = (RingBuffer(c.synthetic_capacity, obs_dim, act_dim, "synthetic")
                          if self.model is not None else None)
        self.rng = {k: stream(c.seed, k) for k in ("env", "explore", "act", "batch",
                                                   "model_fit", "rollout")}
        self.ledger = RunLedger()
        self.metrics: List[dict] = []
        self.model_report: List[dict] = []
        self.window: List[UpdateReport] = []
        self.window_time = 0.0
        self.window_steps = 0
        self.pct_error: Union[float, str] = ""
        self.pending_events: List[str] = []
        self.tag_next_eval = False
        self.obs = self._new_episode()

    def _new_episode(self) -> np.ndarray:
        return self.env.reset(int(self.rng["env"].integers(0, 2 ** 31)))

    def _state(self) -> dict:
        return {"agent": self.agent, "model": self.model, "real": self.real,
                "synthetic": self.synthetic, "ledger": self.ledger}

    def env_step(self, t: int) -> None:
        c = self.c
        t0 = time.perf_counter()
        if t <= c.warmup_steps:
            a = self.rng["explore"].uniform(-1.0, 1.0, self.env.act_dim)
        else:
            a = self.agent.act_batch(self.obs[None], "stochastic", self.rng["act"])[0]
            a = a.astype(float)
        nxt, r, term, trunc = self.env.step(a * self.scale)
        self.real.push_batch(self.obs[None], a[None], np.array([r]), nxt[None],
                             np.array([term]), np.array([trunc]))
        self.ledger.env_steps += 1
        if term or trunc:
            self.ledger.episodes += 1
            self.obs = self._new_episode()
        else:
            self.obs = nxt

        if t > c.warmup_steps:
            k = t - c.warmup_steps
            if c.uses_learned_model and (k - 1) % c.retrain_interval == 0:
                self._retrain(t)
            if self.model is not None:
                self._rollouts()
            audit = (c.algorithm == "mbpo_perfect_model" and c.audit_interval
                     and t % c.audit_interval == 0)
            for j in range(c.updates_per_step):
                batch = sample_mixed(self.real, self.synthetic, c.batch_size,
                                     c.synthetic_ratio, self.rng["batch"])
                self.window.append(self.agent.partial_fit(batch))
                if audit and j == 0:
                    self._audit(batch)
            self.ledger.record_updates(c.updates_per_step)

        if self.hook:
            self.hook("before_interventions", t, self._state())
        events = apply_interventions(c, t, self.agent, self.model)
        if events:
            self.pending_events += events
            self.ledger.agent_resets += events.count("agent_reset")
            self.ledger.model_resets += events.count("model_reset")
            self.tag_next_eval = self.tag_next_eval or "agent_reset" in events
        if self.hook:
            self.hook("after_interventions", t, self._state())

        self.window_time += time.perf_counter() - t0
        self.window_steps += 1
        do_eval = (c.eval_interval and t % c.eval_interval == 0) or t == c.total_steps
        do_log = (c.log_interval and t % c.log_interval == 0) or do_eval or events
        if do_log:
            self._log(t, do_eval)

    def _retrain(self, t: int) -> None:
        _, report = train_ensemble(self.model, self.real, self.c.model_train_steps,
                                   self.rng["model_fit"])
        self.ledger.model_retrains += 1
        self.pct_error = report.percent_error
        self.model_report += report.rows(t)

    def _rollouts(self) -> None:
        agent = self.agent

        def policy(obs, rng):
            return agent.act_batch(obs, "stochastic", rng).astype(float)

        out = generate_rollouts(self.model, self.real, policy, self.c.rollouts_per_step,
                                self.c.model_horizon, self.rng["rollout"])
        out.push_to(self.synthetic)
        self.ledger.rollouts_generated += len(out)
        self.ledger.blowups_dropped += out.n_dropped

    def _audit(self, batch) -> None:
        """Re-derive each synthetic row of ``batch`` through reset-to-state and step."""
        env = Env(self.c.env_id)
        for i in range(batch.n_real, len(batch)):
            env.reset_to_state(EnvState(env.state_from_observation(batch.obs[i])))
            o, r, _, _ = env.step(batch.act[i] * self.scale)
            self.ledger.audited_transitions += 1
            if o.tobytes() != batch.next_obs[i].tobytes() or r != batch.rew[i]:
                self.ledger.audit_failures += 1

    def _log(self, t: int, do_eval: bool) -> None:
        c = self.c
        row = {k: "" for k in METRICS_HEADER}
        row["step"] = t
        events = list(self.pending_events)
        if do_eval:
            mean, std = evaluate(self.agent, c.env_id, c.eval_episodes,
                                 stream(c.seed, "eval", t).integers(0, 2 ** 31))
            row["eval_return_mean"], row["eval_return_std"] = mean, std
            if self.tag_next_eval:
                events.append("post_reset_eval")
                self.tag_next_eval = False
        if self.window:
            w = self.window
            row["mean_q"] = float(np.mean([r.mean_q for r in w]))
            row["critic_loss"] = float(np.mean([r.critic_loss for r in w]))
            row["actor_loss"] = float(np.mean([r.actor_loss for r in w]))
            row["temperature"] = w[-1].temperature
        if c.has_model:
            row["pct_model_error"] = 0.0 if c.algorithm == "mbpo_perfect_model" else self.pct_error
        row["sec_per_env_step"] = self.window_time / self.window_steps
        row["event"] = ";".join(events)
        self.metrics.append(row)
        self.pending_events = []
        self.window = []
        self.window_time = 0.0
        self.window_steps = 0

    def result(self) -> TrainResult:
        return TrainResult(self.c, self.agent, self.model, self.ledger, self.metrics,
                           self.model_report, self.real, self.synthetic)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    synthetic_ratio: float
    seed: int
    final_return: float
    status: str = "ok"
    error: str = ""


def sac_limit(config: RunConfig) -> RunConfig:
    """The S = 0 end of the spectrum: plain SAC with one update per step."""
    return replace(config, algorithm="sac", synthetic_ratio=0.0, rollouts_per_step=0,
                   updates_per_step=1)


def ratio_sweep(base: RunConfig, ratios: Sequence[float], seeds: Sequence[int],
                runner: Callable[[RunConfig], TrainResult] = train) -> List[SweepRow]:
    """One run per ``(S, seed)``; failures are recorded and the sweep continues."""
    if not ratios or not seeds:
        raise ValueError("ratios and seeds must be non-empty")
    rows = []
    for s in ratios:
        for seed in seeds:
            cfg = sac_limit(replace(base, seed=seed)) if s == 0 else \
                replace(base, synthetic_ratio=float(s), seed=seed)
            try:
                rows.append(SweepRow(float(s), int(seed), runner(cfg).final_return()))
            except Exception as exc:  # recorded, not raised
                rows.append(SweepRow(float(s), int(seed), float("nan"), "failed", str(exc)))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    return format_rows([asdict(r) for r in rows],
                       ("synthetic_ratio", "seed", "final_return", "status", "error"))
