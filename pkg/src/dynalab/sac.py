"""Soft Actor-Critic with twin critics, Polyak targets and automatic temperature."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .diffmath import AdamState, ParamSet, Tape, adam_step, backward, forward_mlp, polyak_update
from .diffmath import tape as T
from .diffmath.fused import MLPCache, mlp_backward, mlp_forward
from .diffmath.nn import init_mlp, mlp_layout
from .diffmath.tape import LOG_2, LOG_2PI
from .envsuite import Env
from .replay import MixedBatch
from .validation import (TrainingDivergedError, as_rng, check_fitted, check_rows,
                         resolve_dtype)


@dataclass
class UpdateReport:
    critic_loss: float
    actor_loss: float
    temperature_loss: float
    temperature: float
    mean_q: float


class SACAgent(BaseEstimator):
    """Soft Actor-Critic agent.

    Parameters mirror the usual SAC hyperparameters. ``soft_update_rate`` is
    read as the retention coefficient of the target networks when
    ``soft_update_convention="retain"`` (target keeps 0.995 of itself per
    update) and as the mixing-in rate when ``"mix"``.

    Fitted attributes
    -----------------
    actor_, critic_, target_critic_, log_alpha_ : ParamSet
        The critic sets carry a leading axis of size 2, one slice per twin.
    n_updates_ : int
        Gradient updates performed since the last (re)initialization.
    """

    def __init__(self, hidden_sizes=(256, 256), gamma=0.99, lr=3e-4, adam_beta1=0.9,
                 adam_beta2=0.999, adam_eps=1.5e-4, initial_temperature=1.0,
                 target_entropy=None, soft_update_rate=0.995, soft_update_convention="retain",
                 layernorm=False, logstd_bounds=(-20.0, 2.0), dtype="float64",
                 random_state=None):
        self.hidden_sizes = hidden_sizes
        self.gamma = gamma
        self.lr = lr
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.initial_temperature = initial_temperature
        self.target_entropy = target_entropy
        self.soft_update_rate = soft_update_rate
        self.soft_update_convention = soft_update_convention
        self.layernorm = layernorm
        self.logstd_bounds = logstd_bounds
        self.dtype = dtype
        self.random_state = random_state

    # ------------------------------------------------------------ setup

    def initialize(self, obs_dim: int, act_dim: int, rng=None) -> "SACAgent":
        """Create fresh networks, targets, temperature and optimizer state."""
        rng = as_rng(self.random_state if rng is None else rng)
        dt = resolve_dtype(self.dtype)
        self.obs_dim_, self.act_dim_ = int(obs_dim), int(act_dim)
        hidden = list(self.hidden_sizes)
        actor_sizes = [obs_dim] + hidden + [2 * act_dim]
        critic_sizes = [obs_dim + act_dim] + hidden + [1]
        self.actor_ = init_mlp(ParamSet(mlp_layout(actor_sizes), dtype=dt), rng)
        self.critic_ = init_mlp(ParamSet(mlp_layout(critic_sizes, members=2,
                                                    layernorm=self.layernorm), dtype=dt), rng)
        self.target_critic_ = self.critic_.copy()
        self.log_alpha_ = ParamSet([("log_alpha", (1,))], dtype=dt)
        self.log_alpha_["log_alpha"] = math.log(self.initial_temperature)
        opt = dict(lr=self.lr, beta1=self.adam_beta1, beta2=self.adam_beta2, eps=self.adam_eps)
        self.actor_opt_ = AdamState.for_params(self.actor_, **opt)
        self.critic_opt_ = AdamState.for_params(self.critic_, **opt)
        self.alpha_opt_ = AdamState.for_params(self.log_alpha_, **opt)
        # noise for updates comes from a stream owned by the agent
        self.rng_ = np.random.default_rng(rng.integers(0, 2 ** 63))
        self._critic_grads_buf = self.critic_.zeros_like()
        self._actor_grads_buf = self.actor_.zeros_like()
        self._alpha_grads_buf = self.log_alpha_.zeros_like()
        self.n_updates_ = 0
        return self

    def reset_agent(self, rng) -> "SACAgent":
        """Reinitialize actor, critics, targets, temperature and all optimizer state."""
        check_fitted(self, "actor_")
        return self.initialize(self.obs_dim_, self.act_dim_, rng)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_alpha_["log_alpha"][0]))

    @property
    def entropy_target(self) -> float:
        return -float(self.act_dim_) if self.target_entropy is None else float(self.target_entropy)

    def critic(self, i: int) -> dict:
        """Arrays of twin ``i`` as views into the stacked critic set."""
        return {k: v[i] for k, v in self.critic_.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for ps in (self.actor_, self.critic_, self.target_critic_, self.log_alpha_):
            h.update(ps.digest().encode())
        for st in (self.actor_opt_, self.critic_opt_, self.alpha_opt_):
            h.update(st.m.tobytes() + st.v.tobytes() + str(st.step).encode())
        return h.hexdigest()

    # ------------------------------------------------------------ policy

    def _policy_head(self, params, obs):
        out = forward_mlp(params, obs, "relu")
        mean = T.getitem(out, (Ellipsis, slice(0, self.act_dim_)))
        raw = T.getitem(out, (Ellipsis, slice(self.act_dim_, None)))
        lo, hi = self.logstd_bounds
        # smooth map of the raw head onto [lo, hi]
        logstd = T.add(lo + 0.5 * (hi - lo), T.mul(T.tanh(raw), 0.5 * (hi - lo)))
        return mean, logstd

    def _sample(self, params, obs, noise):
        mean, logstd = self._policy_head(params, obs)
        return T.squashed_gaussian_sample(mean, logstd, noise)

    def _sample_fast(self, params, obs, noise, cache=None):
        """Untaped twin of :meth:`_sample`; also returns the head intermediates."""
        A = self.act_dim_
        lo, hi = self.logstd_bounds
        half = 0.5 * (hi - lo)
        out = mlp_forward(params, obs, "relu", cache=cache)
        mean, raw = out[:, :A], out[:, A:]
        t_raw = np.tanh(raw)
        logstd = (lo + half) + half * t_raw
        std = np.exp(logstd)
        u = mean + std * noise
        action = np.tanh(u)
        lim = 1.0 - np.finfo(action.dtype).epsneg
        np.clip(action, -lim, lim, out=action)
        corr = 2.0 * (LOG_2 - u - np.logaddexp(0.0, -2.0 * u))
        logp = np.sum(-0.5 * noise * noise - 0.5 * LOG_2PI - logstd - corr, axis=-1)
        return action, logp, (t_raw, std, u)

    def _q(self, params, obs, act):
        return forward_mlp(params, T.concat([obs, act], axis=-1), "relu", self.layernorm)

    def act_batch(self, obs: np.ndarray, mode: str = "stochastic", rng=None) -> np.ndarray:
        """Unvalidated batched action selection in ``(-1, 1)``; the hot path."""
        obs = obs.astype(self.actor_.dtype, copy=False)
        if mode == "deterministic":
            return np.tanh(mlp_forward(self.actor_, obs, "relu")[:, :self.act_dim_])
        if mode != "stochastic":
            raise ValueError(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
        noise = as_rng(rng).standard_normal((obs.shape[0], self.act_dim_))
        action, _, _ = self._sample_fast(self.actor_, obs, noise.astype(self.actor_.dtype))
        return action

    def act(self, observation, mode: str = "stochastic", rng=None) -> np.ndarray:
        check_fitted(self, "actor_")
        obs = check_rows(observation, self.obs_dim_, "observation", self.actor_.dtype)
        out = self.act_batch(obs, mode, rng)
        return out[0] if np.ndim(observation) == 1 else out

    def predict(self, X) -> np.ndarray:
        """Deterministic actions ``tanh(mean)`` for each observation row."""
        return self.act(X, "deterministic")

    def q_values(self, obs, act) -> np.ndarray:
        """Twin critic values, shape ``(2, n)``."""
        return self._q(self.critic_, np.asarray(obs, self.critic_.dtype),
                       np.asarray(act, self.critic_.dtype))[..., 0]

    # ------------------------------------------------------------ learning

    def td_target(self, batch: MixedBatch, noise: np.ndarray) -> np.ndarray:
        """``r + gamma * (1 - terminated) * (min target Q - alpha * log pi)`` at ``s'``.

        Truncation does not stop bootstrapping.
        """
        dt = self.actor_.dtype
        next_obs = batch.next_obs.astype(dt, copy=False)
        next_act, next_logp, _ = self._sample_fast(self.actor_, next_obs, noise)
        q_next = mlp_forward(self.target_critic_, np.concatenate([next_obs, next_act], axis=-1),
                             "relu", self.layernorm)[..., 0]
        soft = np.minimum(q_next[0], q_next[1]) - self.temperature * next_logp
        return batch.rew + self.gamma * (1.0 - batch.terminated) * soft

    # Gradients of the three losses. ``*_grads`` are the hot path; the
    # ``*_grads_tape`` twins evaluate the same losses through the recorded
    # ops and serve as the reference in tests.

    def critic_grads(self, obs, act, y):
        """Loss ``sum_twins mean((Q - y)^2)``, its gradient and the twin values."""
        cache = MLPCache()
        q = mlp_forward(self.critic_, np.concatenate([obs, act], axis=-1), "relu",
                        self.layernorm, cache=cache)
        diff = q - y[None, :, None]
        n = diff.shape[1]
        loss = float(np.sum(diff * diff)) / n
        if not np.isfinite(loss):
            raise TrainingDivergedError("critic")
        grads = self._critic_grads_buf
        grads.flat[...] = 0.0
        mlp_backward(self.critic_, cache, diff * (2.0 / n), "relu", self.layernorm, grads=grads)
        return loss, grads, q

    def critic_grads_tape(self, obs, act, y):
        tape = Tape()
        q = self._q(tape.watch(self.critic_), obs, act)
        loss = T.mul(T.sum(T.square(T.sub(q, y[None, :, None]))), 1.0 / obs.shape[0])
        return float(loss.value), backward(tape, loss), q.value

    def actor_grads(self, obs, noise):
        """Actor and temperature losses with their gradients.

        Returns ``(actor_loss, temperature_loss, actor_grads, alpha_grads)``.
        The critics enter as constants.
        """
        n = obs.shape[0]
        lo, hi = self.logstd_bounds
        half = 0.5 * (hi - lo)
        acache = MLPCache()
        action, logp, (t_raw, std, u) = self._sample_fast(self.actor_, obs, noise, acache)

        ccache = MLPCache()
        q = mlp_forward(self.critic_, np.concatenate([obs, action], axis=-1), "relu",
                        self.layernorm, cache=ccache)[..., 0]
        pick0 = q[0] <= q[1]
        q_min = np.where(pick0, q[0], q[1])
        alpha = self.temperature
        actor_loss = float(np.mean(alpha * logp - q_min))
        gap = logp + self.entropy_target
        temp_loss = float(np.mean(-alpha * gap))
        if not np.isfinite(actor_loss):
            raise TrainingDivergedError("actor")
        if not np.isfinite(temp_loss):
            raise TrainingDivergedError("temperature")

        # dL/dQ_min = -1/n routed to the selected twin, then to the action input
        gq = np.zeros((2, n, 1), dtype=q.dtype)
        gq[0, pick0, 0] = -1.0 / n
        gq[1, ~pick0, 0] = -1.0 / n
        g_in = mlp_backward(self.critic_, ccache, gq, "relu", self.layernorm, need_input=True)
        g_act = g_in[:, obs.shape[1]:]
        g_logp = alpha / n
        # d logp / du = -d corr / du = 2 tanh(u)
        g_u = g_act * (1.0 - action * action) + g_logp * 2.0 * np.tanh(u)
        g_logstd = g_u * std * noise - g_logp
        g_out = np.concatenate([g_u, g_logstd * half * (1.0 - t_raw * t_raw)], axis=-1)
        grads = self._actor_grads_buf
        grads.flat[...] = 0.0
        mlp_backward(self.actor_, acache, g_out, "relu", grads=grads)
        g_alpha = self._alpha_grads_buf
        g_alpha.flat[...] = -alpha * float(np.mean(gap))
        return actor_loss, temp_loss, grads, g_alpha

    def actor_grads_tape(self, obs, noise):
        tape = Tape()
        actor_leaves = tape.watch(self.actor_)
        alpha_leaf = tape.watch(self.log_alpha_)["log_alpha"]
        new_act, logp = self._sample(actor_leaves, obs, noise)
        q_pi = self._q(self.critic_, obs, new_act)
        q_min = T.minimum(T.getitem(q_pi, 0), T.getitem(q_pi, 1))
        alpha = self.temperature
        actor_loss = T.mean(T.sub(T.mul(logp, alpha), T.getitem(q_min, (Ellipsis, 0))))
        gap = logp.value + self.entropy_target
        temp_loss = T.mean(T.mul(T.exp(alpha_leaf), -gap))
        g_actor, g_alpha = backward(tape, T.add(actor_loss, temp_loss))
        return float(actor_loss.value), float(temp_loss.value), g_actor, g_alpha

    def partial_fit(self, batch: MixedBatch, rng=None) -> UpdateReport:
        """One gradient step on critics, actor and temperature, then a Polyak update."""
        check_fitted(self, "actor_")
        # non-finite losses are detected explicitly below
        with np.errstate(invalid="ignore", over="ignore"):
            return self._update(batch, rng)

    def _update(self, batch: MixedBatch, rng) -> UpdateReport:
        rng = self.rng_ if rng is None else rng
        dt = self.actor_.dtype
        n = len(batch)
        obs, act = batch.obs.astype(dt, copy=False), batch.act.astype(dt, copy=False)
        noise_next = rng.standard_normal((n, self.act_dim_)).astype(dt)
        noise_now = rng.standard_normal((n, self.act_dim_)).astype(dt)

        y = self.td_target(batch, noise_next).astype(dt, copy=False)
        critic_loss, g_critic, q = self.critic_grads(obs, act, y)
        adam_step(self.critic_opt_, self.critic_, g_critic)

        actor_loss, temp_loss, g_actor, g_alpha = self.actor_grads(obs, noise_now)
        adam_step(self.actor_opt_, self.actor_, g_actor)
        adam_step(self.alpha_opt_, self.log_alpha_, g_alpha)

        polyak_update(self.target_critic_, self.critic_, self._retain())
        self.n_updates_ += 1
        return UpdateReport(critic_loss, actor_loss, temp_loss, self.temperature,
                            float(q.mean()))

    def _retain(self) -> float:
        if self.soft_update_convention == "retain":
            return self.soft_update_rate
        if self.soft_update_convention == "mix":
            return 1.0 - self.soft_update_rate
        raise ValueError("soft_update_convention must be 'retain' or 'mix'")

    update = partial_fit


def evaluate(agent: SACAgent, env_id: str, episodes: int, seed) -> Tuple[float, float]:
    """Mean and std of undiscounted return over deterministic-policy episodes.

    ``agent`` only needs ``act_batch(obs, "deterministic")`` returning actions
    in ``[-1, 1]``; they are scaled to the environment's action bounds.
    """
    env = Env(env_id)
    seeds = np.random.default_rng(seed).integers(0, 2 ** 31, size=episodes)
    scale = env.action_scale
    returns = []
    for s in seeds:
        obs = env.reset(int(s))
        total, done = 0.0, False
        while not done:
            a = agent.act_batch(obs[None], "deterministic")[0]
            obs, r, term, trunc = env.step(a * scale)
            total += r
            done = term or trunc
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def random_policy_return(env_id: str, episodes: int, seed) -> Tuple[float, float]:
    """Return statistics of a uniform random policy, the baseline for learning checks."""
    env = Env(env_id)
    rng = np.random.default_rng(seed)
    returns = []
    for s in rng.integers(0, 2 ** 31, size=episodes):
        env.reset(int(s))
        total, done = 0.0, False
        while not done:
            _, r, term, trunc = env.step(rng.uniform(-1, 1, env.act_dim) * env.action_scale)
            total += r
            done = term or trunc
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))
