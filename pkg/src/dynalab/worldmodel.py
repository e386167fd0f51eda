"""Learned and oracle dynamics models, synthetic rollouts and model-error diagnostics.

Two models share the :class:`PredictiveModel` surface: a probabilistic
ensemble wrapped by :class:`LearnedModel`, and :class:`PerfectModel`, which
resets the true environment to each queried state and steps it. Actions
everywhere in this module live in the agent's normalized ``[-1, 1]`` space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Tuple

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin

from .diffmath import AdamState, ParamSet, Tape, adam_step, backward
from .diffmath import tape as T
from .diffmath.fused import MLPCache, mlp_backward, mlp_forward
from .diffmath.nn import forward_mlp, init_mlp, mlp_layout
from .envsuite import Env, check_state, step_batch
from .replay import RingBuffer, Transition
from .validation import TrainingDivergedError, as_rng, check_fitted, resolve_dtype

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateBatchError(ValueError):
    """Every sample of a model-error batch had a near-zero target norm."""


class InsufficientDataError(ValueError):
    pass


class PredictiveModel(Protocol):
    """What rollouts and diagnostics need from a dynamics model."""

    def step(self, obs: np.ndarray, act: np.ndarray,
             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sampled ``(next_obs, reward, terminated)`` for a batch of rows."""

    def predict_mean(self, obs: np.ndarray, act: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Point prediction ``(next_obs, reward)``."""


# ---------------------------------------------------------------- ensemble


def select_elites(val_nll, n_elites: int) -> np.ndarray:
    """Indices of the ``n_elites`` lowest validation losses, best first."""
    val_nll = np.asarray(val_nll, dtype=float)
    if not 1 <= n_elites <= val_nll.size:
        raise ValueError(f"cannot pick {n_elites} elites from {val_nll.size} members")
    return np.argsort(val_nll, kind="stable")[:n_elites]


def _clamp_scale(lo: float, hi: float) -> float:
    # the lower softplus overshoots ``hi`` by softplus(lo - hi); shrink to land on it exactly
    return (hi - lo) / (hi - lo + math.log1p(math.exp(lo - hi)))


def soft_clamp(raw, lo: float, hi: float):
    """Smooth, monotone map of the real line into ``[lo, hi]``.

    A softplus bound from above, then one from below, rescaled so the upper
    limit is exact; close to the identity well inside the interval.
    """
    upper = hi - np.logaddexp(0.0, hi - raw)
    return lo + _clamp_scale(lo, hi) * np.logaddexp(0.0, upper - lo)


@dataclass
class EnsembleReport:
    """Diagnostics of one training call.

    ``train_nll`` and ``val_nll`` have one row per logged step and one
    column per member; ``logged_steps`` names the rows.
    """

    logged_steps: np.ndarray
    train_nll: np.ndarray
    val_nll: np.ndarray
    elites: np.ndarray
    percent_error: float
    n_train: int
    n_holdout: int

    def rows(self, env_step: int) -> List[dict]:
        """One row per member with its final train/validation losses."""
        return [{"step": env_step, "member": m, "train_nll": float(self.train_nll[-1, m]),
                 "val_nll": float(self.val_nll[-1, m]), "pct_model_error": self.percent_error}
                for m in range(self.train_nll.shape[1])]


class ProbabilisticEnsemble(BaseEstimator, RegressorMixin):
    """Ensemble of Gaussian MLP regressors with bootstrap training and elites.

    ``fit(X, Y)`` learns ``p(Y | X)`` per member with a diagonal Gaussian
    whose log-variance is smoothly clamped to ``logvar_bounds``. Inputs and
    targets are standardized with statistics recomputed on every fit. A
    holdout split scores each member; the ``n_elites`` best are kept in
    ``elites_``.

    With ``warm_start=True`` a second ``fit`` continues from the current
    weights instead of reinitializing.
    """

    def __init__(self, n_members=7, n_elites=5, hidden_sizes=(200, 200), activation="swish",
                 lr=3e-4, batch_size=256, train_steps=2500, holdout_fraction=0.1,
                 logvar_bounds=(-10.0, 0.5), adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8,
                 log_every=250, error_sample=5000, min_samples=10, warm_start=True,
                 dtype="float64", random_state=None):
        self.n_members = n_members
        self.n_elites = n_elites
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.lr = lr
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.holdout_fraction = holdout_fraction
        self.logvar_bounds = logvar_bounds
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.log_every = log_every
        self.error_sample = error_sample
        self.min_samples = min_samples
        self.warm_start = warm_start
        self.dtype = dtype
        self.random_state = random_state

    # ------------------------------------------------------------ setup

    def initialize(self, n_inputs: int, n_outputs: int, rng=None) -> "ProbabilisticEnsemble":
        """Fresh member weights and optimizer state; normalization is identity."""
        if self.n_elites > self.n_members:
            raise ValueError("n_elites cannot exceed n_members")
        rng = as_rng(self.random_state if rng is None else rng)
        dt = resolve_dtype(self.dtype)
        self.n_features_in_, self.n_outputs_ = int(n_inputs), int(n_outputs)
        sizes = [n_inputs] + list(self.hidden_sizes) + [2 * n_outputs]
        self.params_ = init_mlp(ParamSet(mlp_layout(sizes, members=self.n_members), dtype=dt), rng)
        self.opt_ = AdamState.for_params(self.params_, lr=self.lr, beta1=self.adam_beta1,
                                         beta2=self.adam_beta2, eps=self.adam_eps)
        self._grads = self.params_.zeros_like()
        self.in_mean_ = np.zeros(n_inputs, dt)
        self.in_std_ = np.ones(n_inputs, dt)
        self.out_mean_ = np.zeros(n_outputs, dt)
        self.out_std_ = np.ones(n_outputs, dt)
        self.elites_: Optional[np.ndarray] = None
        self.val_nll_ = np.full(self.n_members, np.inf)
        return self

    def reset_params(self, rng) -> "ProbabilisticEnsemble":
        """Reinitialize all members and the optimizer; elites are cleared.

        Normalization statistics describe the data, not the network, and are
        kept until the next fit recomputes them.
        """
        check_fitted(self, "params_")
        stats = (self.in_mean_, self.in_std_, self.out_mean_, self.out_std_)
        self.initialize(self.n_features_in_, self.n_outputs_, rng)
        self.in_mean_, self.in_std_, self.out_mean_, self.out_std_ = stats
        return self

    @property
    def active_members(self) -> np.ndarray:
        """Elites after training; every member before the first fit or after a reset."""
        check_fitted(self, "params_")
        return np.arange(self.n_members) if self.elites_ is None else self.elites_

    # ------------------------------------------------------------ network

    def _heads(self, out):
        D = self.n_outputs_
        lo, hi = self.logvar_bounds
        return out[..., :D], soft_clamp(out[..., D:], lo, hi)

    def forward(self, Xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Standardized-space ``(mean, logvar)`` per member, shape ``(M, n, D)``."""
        return self._heads(mlp_forward(self.params_, Xs, self.activation))

    def _nll_and_grads(self, Xb, Yb):
        """Per-member mean Gaussian NLL on ``(M, B, .)`` batches and the summed gradient."""
        cache = MLPCache()
        out = mlp_forward(self.params_, Xb, self.activation, cache=cache)
        D = self.n_outputs_
        lo, hi = self.logvar_bounds
        raw = out[..., D:]
        k = _clamp_scale(lo, hi)
        upper = hi - np.logaddexp(0.0, hi - raw)
        logvar = lo + k * np.logaddexp(0.0, upper - lo)
        diff = Yb - out[..., :D]
        inv_var = np.exp(-logvar)
        sq = diff * diff * inv_var
        B = Xb.shape[1]
        nll = 0.5 * np.sum(sq + logvar + LOG_2PI, axis=(1, 2)) / B
        g_mean = -diff * inv_var / B
        g_logvar = 0.5 * (1.0 - sq) / B
        # chain through both softplus bounds
        g_raw = g_logvar * (k * expit(upper - lo) * expit(hi - raw))
        self._grads.flat[...] = 0.0
        mlp_backward(self.params_, cache, np.concatenate([g_mean, g_raw], axis=-1),
                     self.activation, grads=self._grads)
        return nll, self._grads

    def nll_tape(self, Xb, Yb):
        """Reference loss ``sum_m NLL_m`` and gradient through the recorded ops."""
        tape = Tape()
        out = forward_mlp(tape.watch(self.params_), Xb, self.activation)
        D = self.n_outputs_
        lo, hi = self.logvar_bounds
        mean = T.getitem(out, (Ellipsis, slice(0, D)))
        raw = T.getitem(out, (Ellipsis, slice(D, None)))
        upper = T.sub(hi, T.softplus(T.sub(hi, raw)))
        logvar = T.add(lo, T.mul(T.softplus(T.sub(upper, lo)), _clamp_scale(lo, hi)))
        # gaussian_nll averages over members too; rescale to a sum over members
        loss = T.mul(T.gaussian_nll(mean, logvar, Yb), float(Xb.shape[0]))
        return float(loss.value), backward(tape, loss)

    def member_nll(self, Xs, Ys) -> np.ndarray:
        """Mean NLL per member on standardized data shared by all members."""
        mean, logvar = self.forward(Xs)
        sq = (Ys - mean) ** 2 * np.exp(-logvar)
        return 0.5 * np.sum(sq + logvar + LOG_2PI, axis=(1, 2)) / Xs.shape[0]

    # ------------------------------------------------------------ sklearn surface

    def fit(self, X, Y, rng=None, n_steps: Optional[int] = None) -> "ProbabilisticEnsemble":
        """Train every member for ``n_steps`` (default ``train_steps``) Adam steps."""
        # non-finite losses are detected and reported per member
        with np.errstate(invalid="ignore", over="ignore"):
            self.report_ = self._fit(X, Y, rng, n_steps)
        return self

    def _fit(self, X, Y, rng, n_steps) -> EnsembleReport:
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
            raise ValueError(f"X and Y must be 2-D with equal rows, got {X.shape}, {Y.shape}")
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise ValueError("training data contains non-finite values")
        n = len(X)
        if n < self.min_samples:
            raise InsufficientDataError(f"need at least {self.min_samples} samples, got {n}")
        rng = as_rng(self.random_state if rng is None else rng)
        steps = self.train_steps if n_steps is None else int(n_steps)
        fresh = not (self.warm_start and hasattr(self, "params_")
                     and self.params_["W0"].shape[-2] == X.shape[1]
                     and self.n_outputs_ == Y.shape[1])
        if fresh:
            self.initialize(X.shape[1], Y.shape[1], rng)
        dt = self.params_.dtype

        self.in_mean_, self.in_std_ = _stats(X, dt)
        self.out_mean_, self.out_std_ = _stats(Y, dt)
        Xs = ((X - self.in_mean_) / self.in_std_).astype(dt)
        Ys = ((Y - self.out_mean_) / self.out_std_).astype(dt)

        perm = rng.permutation(n)
        n_hold = min(int(round(self.holdout_fraction * n)), n - 1)
        hold, train = perm[:n_hold], perm[n_hold:]
        if n_hold == 0:
            hold = train
        n_train = len(train)
        M = self.n_members
        boot = train[rng.integers(0, n_train, size=(M, n_train))]
        B = min(self.batch_size, n_train)

        logged, train_hist, val_hist = [], [], []
        for t in range(steps):
            rows = np.take_along_axis(boot, rng.integers(0, n_train, size=(M, B)), axis=1)
            nll, grads = self._nll_and_grads(Xs[rows], Ys[rows])
            bad = np.flatnonzero(~np.isfinite(nll))
            if bad.size:
                raise TrainingDivergedError(f"ensemble member {bad[0]}", f"training step {t}")
            adam_step(self.opt_, self.params_, grads)
            if t % self.log_every == 0 or t == steps - 1:
                logged.append(t)
                train_hist.append(nll)
                val_hist.append(self.member_nll(Xs[hold], Ys[hold]))
        if steps == 0:
            logged, train_hist = [0], [self.member_nll(Xs[train], Ys[train])]
            val_hist = [self.member_nll(Xs[hold], Ys[hold])]

        self.val_nll_ = np.asarray(val_hist[-1], dtype=float)
        if not np.isfinite(self.val_nll_).all():
            bad = int(np.flatnonzero(~np.isfinite(self.val_nll_))[0])
            raise TrainingDivergedError(f"ensemble member {bad}", "validation")
        self.elites_ = select_elites(self.val_nll_, self.n_elites)
        self.train_rows_ = train
        return EnsembleReport(np.asarray(logged), np.asarray(train_hist), np.asarray(val_hist),
                              self.elites_.copy(), float("nan"), n_train, n_hold)

    def predict(self, X) -> np.ndarray:
        """Mean of the active members' predicted means, in target units."""
        check_fitted(self, "params_")
        Xs = (np.asarray(X, dtype=float) - self.in_mean_) / self.in_std_
        mean, _ = self.forward(Xs.astype(self.params_.dtype))
        return self.out_mean_ + self.out_std_ * mean[self.active_members].mean(axis=0)

    def sample(self, X, rng) -> np.ndarray:
        """One draw per row from a uniformly chosen active member's Gaussian."""
        check_fitted(self, "params_")
        Xs = (np.asarray(X, dtype=float) - self.in_mean_) / self.in_std_
        active = self.active_members
        n = Xs.shape[0]
        pick = rng.integers(0, len(active), size=n)
        # only the active members are evaluated, and the heads only on the picked rows
        sub = {k: v[active] for k, v in self.params_.items()}
        out = mlp_forward(sub, Xs.astype(self.params_.dtype), self.activation)
        mu, lv = self._heads(out[pick, np.arange(n)])
        draw = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
        return self.out_mean_ + self.out_std_ * draw


def _stats(A: np.ndarray, dt) -> Tuple[np.ndarray, np.ndarray]:
    mean = A.mean(axis=0)
    std = A.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean.astype(dt), std.astype(dt)



# ---------------------------------------------------------------- models behind one surface


class LearnedModel:
    """Adapts an ensemble over ``obs+act -> (next_obs - obs)+reward`` to :class:`PredictiveModel`.

    Termination is not learned: the environment's analytic predicate is
    applied to the predicted next observation.
    """

    def __init__(self, ensemble: ProbabilisticEnsemble, env_id: str):
        self.ensemble = ensemble
        self.env = Env(env_id)

    @staticmethod
    def inputs(obs, act) -> np.ndarray:
        return np.concatenate([obs, act], axis=-1)

    @staticmethod
    def targets(obs, rew, next_obs) -> np.ndarray:
        return np.concatenate([next_obs - obs, np.asarray(rew)[:, None]], axis=-1)

    def _split(self, obs, out):
        out = np.asarray(out, dtype=float)
        return obs + out[:, :-1], out[:, -1]

    def step(self, obs, act, rng):
        next_obs, rew = self._split(obs, self.ensemble.sample(self.inputs(obs, act), rng))
        with np.errstate(invalid="ignore"):
            terminated = self.env.terminal(next_obs)
        return next_obs, rew, terminated

    def predict_mean(self, obs, act):
        return self._split(obs, self.ensemble.predict(self.inputs(obs, act)))


class PerfectModel:
    """Oracle model: reset the true environment to each state and step it.

    Bit-identical to ``reset_to_state`` followed by ``step`` on the same
    state and action; the random generator is accepted and ignored.
    """

    def __init__(self, env_id: str):
        self.env = Env(env_id)

    def physical(self, obs) -> np.ndarray:
        state = self.env.state_from_observation(obs)
        check_state(self.env.spec, state)
        return state

    def step(self, obs, act, rng=None):
        _, next_obs, rew, terminated, _ = step_batch(
            self.env.spec, self.env.variant, self.physical(obs),
            np.asarray(act, dtype=float) * self.env.action_scale, check=False)
        return next_obs, rew, terminated

    def predict_mean(self, obs, act):
        next_obs, rew, _ = self.step(obs, act)
        return next_obs, rew


def perfect_model(env_id: str) -> PerfectModel:
    return PerfectModel(env_id)


# ---------------------------------------------------------------- diagnostics


def percent_model_error(pred, truth, min_norm: float = 1e-8, return_excluded: bool = False):
    """Batch mean of per-sample ``100 * ||pred - truth|| / ||truth||``.

    Rows with ``||truth|| < min_norm`` are skipped; with ``return_excluded``
    the skipped count is returned alongside the percentage.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from target {truth.shape}")
    if len(truth) == 0:
        raise DegenerateBatchError("empty batch")
    norm = np.linalg.norm(truth, axis=1)
    keep = norm >= min_norm
    excluded = int((~keep).sum())
    if not keep.any():
        raise DegenerateBatchError(f"all {len(truth)} samples have target norm below {min_norm}")
    err = 100.0 * np.linalg.norm(pred[keep] - truth[keep], axis=1) / norm[keep]
    pct = float(err.mean())
    return (pct, excluded) if return_excluded else pct


def model_percent_error(model: PredictiveModel, obs, act, rew, next_obs, **kwargs):
    """Percent error of the model's point prediction of ``next_obs`` and ``reward``."""
    pred_obs, pred_rew = model.predict_mean(obs, act)
    pred = np.concatenate([pred_obs, np.asarray(pred_rew)[:, None]], axis=1)
    truth = np.concatenate([next_obs, np.asarray(rew)[:, None]], axis=1)
    return percent_model_error(pred, truth, **kwargs)


# ---------------------------------------------------------------- training and rollouts


def train_ensemble(model: LearnedModel, buffer: RingBuffer, steps: int, rng):
    """Fit the ensemble on every real transition; returns ``(model, report)``.

    The report's ``percent_error`` is measured on the training split.
    """
    idx = buffer.ordered_indices()
    obs, act = buffer.obs[idx], buffer.act[idx]
    rew, next_obs = buffer.rew[idx], buffer.next_obs[idx]
    ens = model.ensemble
    ens.fit(model.inputs(obs, act), model.targets(obs, rew, next_obs), rng=rng, n_steps=steps)
    sample = ens.train_rows_[: ens.error_sample]
    report = ens.report_
    report.percent_error = model_percent_error(model, obs[sample], act[sample], rew[sample],
                                               next_obs[sample])
    return model, report


def reset_model_params(model: LearnedModel, rng) -> LearnedModel:
    model.ensemble.reset_params(rng)
    return model


@dataclass
class RolloutBatch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    terminated: np.ndarray
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.rew)

    def transitions(self) -> List[Transition]:
        return [Transition(self.obs[i], self.act[i], float(self.rew[i]), self.next_obs[i],
                           bool(self.terminated[i]), False, "synthetic") for i in range(len(self))]

    def push_to(self, buffer: RingBuffer) -> None:
        if buffer.origin != "synthetic":
            raise ValueError("rollouts belong in a synthetic buffer")
        if len(self):
            buffer.push_batch(self.obs, self.act, self.rew, self.next_obs, self.terminated)


Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def generate_rollouts(model: PredictiveModel, buffer: RingBuffer, policy: Policy,
                      n_rollouts: int, horizon: int, rng) -> RolloutBatch:
    """Branch ``n_rollouts`` model rollouts of length ``horizon`` from real states.

    Start states are drawn uniformly from ``buffer``; actions come from
    ``policy(obs, rng)``. Rows whose predicted state or reward is not finite
    are dropped and counted; terminated rows end their chain.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    parts, dropped = [], 0
    s = buffer.obs[buffer.sample_indices(n_rollouts, rng)]
    for _ in range(horizon):
        if len(s) == 0:
            break
        a = policy(s, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            s2, r, term = model.step(s, a, rng)
        ok = np.isfinite(s2).all(axis=1) & np.isfinite(r)
        dropped += int((~ok).sum())
        parts.append((s[ok], a[ok], r[ok], s2[ok], term[ok]))
        s = s2[ok & ~term]
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return RolloutBatch(*cols, n_dropped=dropped)
