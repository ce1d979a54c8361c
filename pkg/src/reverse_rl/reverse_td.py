"""Reverse TD, Reverse TD(lambda) and Off-policy Reverse TD with linear features.

The single-step updates are small numba functions shared by the public
step API and by the compiled run loop, so a long run performs exactly the
same floating-point operations as stepping through the stream by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import RankDeficientFeatures
from .mdp import FiniteMdp, Policy, Transition, sample_trajectory
from .oracle import density_ratio, is_ratio, reverse_gvf


@dataclass
class ReverseReturnTracker:
    """Constant-memory accumulator of the reverse return ``G_t = R_t + gamma(S_{t-1}) G_{t-1}``.

    ``prev_discount`` holds ``gamma(S_{t-1})`` for the next update when the
    tracker is driven through :meth:`step`.
    """

    g_bar: float = 0.0
    prev_discount: float = 0.0

    def reset(self) -> None:
        self.g_bar = 0.0
        self.prev_discount = 0.0

    def step(self, reward: float, discount_of_current: float) -> float:
        tracker_update(self, reward, self.prev_discount)
        self.prev_discount = discount_of_current
        return self.g_bar


def tracker_update(tracker: ReverseReturnTracker, reward: float,
                   discount_of_prev: float) -> ReverseReturnTracker:
    tracker.g_bar = reward + discount_of_prev * tracker.g_bar
    return tracker


class LinearValueModel:
    """Linear estimate ``x(s)^T w`` of the reverse GVF; ``features`` has one row per state."""

    def __init__(self, features: np.ndarray, weights: np.ndarray | None = None):
        X = np.ascontiguousarray(features, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] > X.shape[0] or np.linalg.matrix_rank(X) < X.shape[1]:
            raise RankDeficientFeatures(f"features of shape {X.shape} are not full column rank")
        self.features = X
        if weights is None:
            self.weights = np.zeros(X.shape[1])
        else:
            self.weights = np.array(weights, dtype=np.float64)

    @classmethod
    def tabular(cls, n_states: int) -> LinearValueModel:
        return cls(np.eye(n_states))

    def estimate(self, s: int) -> float:
        return float(self.features[s] @ self.weights)

    def values(self) -> np.ndarray:
        return self.features @ self.weights


@dataclass(frozen=True)
class StepSchedule:
    """Constant ``alpha`` or Robbins-Monro ``a / (1 + t / b)``."""

    kind: str = "constant"
    alpha: float = 1e-2
    a: float = 0.5
    b: float = 1e3

    def __post_init__(self):
        if self.kind == "constant":
            if not self.alpha > 0:
                raise ValueError("constant step size must be positive")
        elif self.kind == "robbins_monro":
            if not (self.a > 0 and self.b > 0):
                raise ValueError("Robbins-Monro constants must be positive")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, alpha: float) -> StepSchedule:
        return cls("constant", alpha=alpha)

    @classmethod
    def robbins_monro(cls, a: float = 0.5, b: float = 1e3) -> StepSchedule:
        return cls("robbins_monro", a=a, b=b)

    def __call__(self, t: int) -> float:
        return _step_size(self._code, self.alpha, self.a, self.b, t)

    @property
    def _code(self) -> int:
        return 0 if self.kind == "constant" else 1


@njit(cache=True)
def _step_size(code, alpha, a, b, t):
    if code == 0:
        return alpha
    return a / (1.0 + t / b)


@njit(cache=True)
def _dot(x, w):
    acc = 0.0
    for k in range(x.shape[0]):
        acc += x[k] * w[k]
    return acc


@njit(cache=True)
def _reverse_td_update(w, x_prev, x_t, reward, gamma_prev, alpha):
    delta = reward + gamma_prev * _dot(x_prev, w) - _dot(x_t, w)
    for k in range(w.shape[0]):
        w[k] += alpha * delta * x_t[k]
    return delta


@njit(cache=True)
def _lambda_target(w, x_prev, reward, gamma_prev, g_prev, lam):
    return reward + gamma_prev * ((1.0 - lam) * _dot(x_prev, w) + lam * g_prev)


@njit(cache=True)
def _lambda_update(w, x_prev, x_t, reward, gamma_prev, g_prev, lam, alpha, weight):
    # weight = tau(S_{t-1}) rho(S_{t-1}, A_{t-1}); 1 on-policy
    delta = _lambda_target(w, x_prev, reward, gamma_prev, g_prev, lam) - _dot(x_t, w)
    scale = alpha * weight * delta
    for k in range(w.shape[0]):
        w[k] += scale * x_t[k]
    return delta


def reverse_td_step(model: LinearValueModel, alpha: float, transition: Transition,
                    gamma_prev: float) -> float:
    """In-place Reverse TD update; returns the TD error."""
    X = model.features
    return _reverse_td_update(model.weights, X[transition.prev_state], X[transition.next_state],
                              transition.reward, gamma_prev, alpha)


def reverse_td_lambda_step(model: LinearValueModel, alpha: float, transition: Transition,
                           gamma_prev: float, g_bar_prev: float, lam: float) -> float:
    """In-place Reverse TD(lambda) update.

    The target mixes the bootstrapped ``x_{t-1}^T w`` and the observed
    reverse return ``g_bar_prev`` (``G_{t-1}``) with weights ``1 - lam`` and
    ``lam``. Returns the TD error.
    """
    X = model.features
    return _lambda_update(model.weights, X[transition.prev_state], X[transition.next_state],
                          transition.reward, gamma_prev, g_bar_prev, lam, alpha, 1.0)


def lambda_target(model: LinearValueModel, transition: Transition, gamma_prev: float,
                  g_bar_prev: float, lam: float) -> float:
    """The bootstrapped target that :func:`reverse_td_lambda_step` regresses ``x_t^T w`` onto."""
    return _lambda_target(model.weights, model.features[transition.prev_state], transition.reward,
                          gamma_prev, g_bar_prev, lam)


def off_policy_reverse_td_step(model: LinearValueModel, alpha: float, transition: Transition,
                               gamma_prev: float, tau_prev: float, rho_prev: float) -> float:
    """In-place Off-policy Reverse TD update weighted by ``tau(S_{t-1}) rho(S_{t-1}, A_{t-1})``."""
    X = model.features
    return _lambda_update(model.weights, X[transition.prev_state], X[transition.next_state],
                          transition.reward, gamma_prev, 0.0, 0.0, alpha, tau_prev * rho_prev)


@dataclass
class LearnerConfig:
    lam: float = 0.0
    schedule: StepSchedule = field(default_factory=StepSchedule.robbins_monro)
    mode: str = "on_policy"
    tau: np.ndarray | None = None
    rho: np.ndarray | None = None
    total_steps: int = 1_000_000
    seed: int = 0
    eval_every: int = 1000
    mve_normalized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mode not in ("on_policy", "off_policy"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "off_policy":
            if self.tau is None or self.rho is None:
                raise ValueError("off-policy mode needs tau and rho")
            if np.any(np.asarray(self.tau) <= 0) or not np.all(np.isfinite(self.rho)):
                raise ValueError("tau must be strictly positive and rho finite")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")


@dataclass(frozen=True, eq=False)
class LearningCurve:
    steps: np.ndarray
    mve: np.ndarray
    weights: np.ndarray


@njit(cache=True)
def _run(X, gamma, states, actions, rewards, tau, rho, lam, code, alpha, a, b, w, v_true,
         eval_every, mve_scale, curve_steps, curve_mve):
    curve_steps[0] = 0
    curve_mve[0] = _mve(X, w, v_true) * mve_scale
    n_eval = 1
    g = 0.0
    T = rewards.shape[0]
    for t in range(1, T + 1):
        s_prev = states[t - 1]
        s = states[t]
        alpha_t = _step_size(code, alpha, a, b, t - 1)
        weight = tau[s_prev] * rho[s_prev, actions[t - 1]]
        _lambda_update(w, X[s_prev], X[s], rewards[t - 1], gamma[s_prev], g, lam, alpha_t,
                       weight)
        g = rewards[t - 1] + gamma[s_prev] * g
        if t % eval_every == 0 or t == T:
            curve_steps[n_eval] = t
            curve_mve[n_eval] = _mve(X, w, v_true) * mve_scale
            n_eval += 1
    return n_eval


@njit(cache=True)
def _mve(X, w, v_true):
    acc = 0.0
    for s in range(X.shape[0]):
        e = _dot(X[s], w) - v_true[s]
        acc += e * e
    return acc


def run_on_trajectory(features: np.ndarray, discount: np.ndarray, trajectory, config: LearnerConfig,
                      v_true: np.ndarray) -> LearningCurve:
    """Run the configured learner over a pre-sampled trajectory."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    n_states = X.shape[0]
    if config.mode == "off_policy":
        tau = np.asarray(config.tau, dtype=np.float64)
        rho = np.ascontiguousarray(config.rho, dtype=np.float64)
    else:
        tau = np.ones(n_states)
        rho = np.ones((n_states, int(trajectory.actions.max(initial=0)) + 1))
    T = len(trajectory)
    n_max = T // config.eval_every + 2
    curve_steps = np.empty(n_max, dtype=np.int64)
    curve_mve = np.empty(n_max)
    w = np.zeros(X.shape[1])
    sched = config.schedule
    scale = 1.0 / n_states if config.mve_normalized else 1.0
    n = _run(X, np.asarray(discount, dtype=np.float64), trajectory.states, trajectory.actions,
             trajectory.rewards, tau, rho, float(config.lam), sched._code, sched.alpha, sched.a,
             sched.b, w, np.asarray(v_true, dtype=np.float64), config.eval_every, scale,
             curve_steps, curve_mve)
    return LearningCurve(curve_steps[:n].copy(), curve_mve[:n].copy(), w)


def run_learner(mdp: FiniteMdp, target: Policy, config: LearnerConfig,
                behavior: Policy | None = None, features: np.ndarray | None = None,
                v_true: np.ndarray | None = None) -> LearningCurve:
    """Sample ``config.total_steps`` transitions and learn the reverse GVF of ``target``.

    On-policy runs follow ``target``; off-policy runs follow ``behavior``.
    The MVE ``||Xw - v_bar||^2`` is recorded at step 0, every
    ``eval_every`` steps and at the final step. ``v_true`` defaults to the
    analytic reverse GVF of ``target``.
    """
    features = np.eye(mdp.n_states) if features is None else features
    if v_true is None:
        v_true = reverse_gvf(mdp, target)
    follow = target
    if config.mode == "off_policy":
        if behavior is None:
            raise ValueError("off-policy learning needs a behavior policy")
        follow = behavior
    rng = np.random.default_rng(config.seed)
    trajectory = sample_trajectory(mdp, follow, config.total_steps, rng)
    return run_on_trajectory(features, mdp.discount, trajectory, config, v_true)


def off_policy_config(mdp: FiniteMdp, target: Policy, behavior: Policy, **kwargs) -> LearnerConfig:
    """LearnerConfig with the exact ``tau`` and ``rho`` of (target, behavior)."""
    return LearnerConfig(mode="off_policy", tau=density_ratio(mdp, target, behavior),
                         rho=is_ratio(mdp, target, behavior), **kwargs)
