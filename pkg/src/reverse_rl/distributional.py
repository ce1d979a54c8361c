"""Quantile-regression Distributional Reverse TD on a lookup table.

Each state carries ``N`` quantile estimates at levels ``(2i - 1) / 2N``.
A transition (s, a, r, s') moves ``q_i(s')`` towards the bootstrapped
targets ``r + gamma(s) q_j(s; target)`` under the quantile Huber loss.
Learned quantiles are turned into a density by a Gaussian mixture for
interval-probability and anomaly queries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import ndtr

from .mdp import Transition

DEFAULT_QUANTILES = 20
DEFAULT_SYNC_PERIOD = 100


def quantile_levels(n: int) -> np.ndarray:
    """Midpoint levels ``((i - 1)/n + i/n) / 2`` for i = 1..n."""
    i = np.arange(1, n + 1)
    return ((i - 1) / n + i / n) / 2


@njit(cache=True)
def huber(x, kappa):
    ax = abs(x)
    if ax <= kappa:
        return 0.5 * x * x
    return kappa * (ax - 0.5 * kappa)


@njit(cache=True)
def quantile_huber(x, tau, kappa):
    weight = abs(tau - (1.0 if x < 0 else 0.0))
    return weight * huber(x, kappa)


@njit(cache=True)
def _quantile_huber_grad(u, tau, kappa):
    # d/du of |tau - 1{u<0}| H_kappa(u)
    weight = abs(tau - (1.0 if u < 0 else 0.0))
    if abs(u) <= kappa:
        return weight * u
    return weight * (kappa if u > 0 else -kappa)


@njit(cache=True)
def _quantile_update(theta, theta_bar, s_prev, s_next, reward, gamma_prev, alpha, weight,
                     levels, kappa):
    n = levels.shape[0]
    scale = alpha * weight / n
    for i in range(n):
        q = theta[s_next, i]
        grad = 0.0
        for j in range(n):
            u = reward + gamma_prev * theta_bar[s_prev, j] - q
            grad += _quantile_huber_grad(u, levels[i], kappa)
        theta[s_next, i] = q + scale * grad


@dataclass(eq=False)
class QuantileModel:
    """Lookup table of quantiles ``q_i(s)`` with a periodically synced target copy."""

    quantiles: np.ndarray
    kappa: float = 1.0
    sync_period: int = DEFAULT_SYNC_PERIOD
    target: np.ndarray = field(default=None)
    levels: np.ndarray = field(init=False)
    n_updates: int = 0

    def __post_init__(self):
        self.quantiles = np.ascontiguousarray(self.quantiles, dtype=np.float64)
        if self.quantiles.ndim != 2 or self.quantiles.shape[1] < 1:
            raise ValueError("quantile table must have shape (n_states, N) with N >= 1")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        if self.target is None:
            self.target = self.quantiles.copy()
        else:
            self.target = np.ascontiguousarray(self.target, dtype=np.float64)
        self.levels = quantile_levels(self.quantiles.shape[1])

    @classmethod
    def zeros(cls, n_states: int, n_quantiles: int = DEFAULT_QUANTILES, kappa: float = 1.0,
              sync_period: int = DEFAULT_SYNC_PERIOD) -> QuantileModel:
        return cls(np.zeros((n_states, n_quantiles)), kappa, sync_period)

    @property
    def n_states(self) -> int:
        return self.quantiles.shape[0]

    @property
    def n_quantiles(self) -> int:
        return self.quantiles.shape[1]

    def means(self) -> np.ndarray:
        return self.quantiles.mean(axis=1)

    def copy(self) -> QuantileModel:
        return QuantileModel(self.quantiles.copy(), self.kappa, self.sync_period,
                             self.target.copy(), self.n_updates)

    def save_csv(self, path: str | Path) -> None:
        """Write rows ``state, i, tau_i, q`` (i is 1-based)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "i", "tau_i", "q"])
            for s in range(self.n_states):
                for i in range(self.n_quantiles):
                    writer.writerow([s, i + 1, f"{self.levels[i]:.17g}",
                                     f"{self.quantiles[s, i]:.17g}"])

    @classmethod
    def load_csv(cls, path: str | Path, kappa: float = 1.0,
                 sync_period: int = DEFAULT_SYNC_PERIOD) -> QuantileModel:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n_states = 1 + max(int(r["state"]) for r in rows)
        n = max(int(r["i"]) for r in rows)
        table = np.full((n_states, n), np.nan)
        for r in rows:
            table[int(r["state"]), int(r["i"]) - 1] = float(r["q"])
        if np.isnan(table).any():
            raise ValueError(f"{path}: quantile table is incomplete")
        return cls(table, kappa, sync_period)


def quantile_update_step(model: QuantileModel, transition: Transition, gamma_prev: float,
                         alpha: float, weight: float = 1.0) -> QuantileModel:
    """One SGD step on ``weight * L(theta)`` for the transition; updates row ``s'`` in place.

    Each ``q_i(s')`` moves by ``alpha * weight / N`` times the sum over j
    of the quantile-Huber derivative at
    ``u_ij = r + gamma(s) q_j(s; target) - q_i(s')``. The target table is
    left alone; see :func:`sync_target`.
    """
    _quantile_update(model.quantiles, model.target, transition.prev_state, transition.next_state,
                     transition.reward, gamma_prev, alpha, weight, model.levels, model.kappa)
    model.n_updates += 1
    return model


def sync_target(model: QuantileModel) -> QuantileModel:
    model.target[...] = model.quantiles
    return model


@njit(cache=True)
def _train(theta, theta_bar, states, actions, rewards, gamma, rho, levels, kappa, alpha,
           sync_period, n_updates, eval_every, v_true, curve_steps, curve_mve):
    n_eval = 0
    T = rewards.shape[0]
    for t in range(1, T + 1):
        s_prev = states[t - 1]
        _quantile_update(theta, theta_bar, s_prev, states[t], rewards[t - 1], gamma[s_prev],
                         alpha, rho[s_prev, actions[t - 1]], levels, kappa)
        n_updates += 1
        if n_updates % sync_period == 0:
            theta_bar[:, :] = theta
        if t % eval_every == 0 or t == T:
            acc = 0.0
            for s in range(theta.shape[0]):
                e = np.mean(theta[s]) - v_true[s]
                acc += e * e
            curve_steps[n_eval] = t
            curve_mve[n_eval] = acc
            n_eval += 1
    return n_eval


def train_quantiles(model: QuantileModel, trajectory, discount: np.ndarray, alpha: float,
                    rho: np.ndarray | None = None, v_true: np.ndarray | None = None,
                    eval_every: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Run quantile updates over a trajectory, syncing the target every ``sync_period`` updates.

    ``rho[s, a]`` weights each transition by its leading (state, action).
    Returns ``(steps, mve)`` where MVE is the squared error of the
    per-state mean of the quantiles against ``v_true`` (zeros if omitted).
    """
    n_states = model.n_states
    if rho is None:
        rho = np.ones((n_states, int(trajectory.actions.max(initial=0)) + 1))
    if v_true is None:
        v_true = np.zeros(n_states)
    T = len(trajectory)
    mve0 = float(np.sum((model.means() - v_true) ** 2))
    n_max = T // eval_every + 2
    steps = np.empty(n_max, dtype=np.int64)
    mve = np.empty(n_max)
    n = _train(model.quantiles, model.target, trajectory.states, trajectory.actions,
               trajectory.rewards, np.asarray(discount, dtype=np.float64),
               np.ascontiguousarray(rho, dtype=np.float64), model.levels, model.kappa, alpha,
               model.sync_period, model.n_updates, eval_every,
               np.asarray(v_true, dtype=np.float64), steps, mve)
    model.n_updates += T
    return np.concatenate(([0], steps[:n])), np.concatenate(([mve0], mve[:n]))


# ---------------------------------------------------------------------------
# imputation and probability queries


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Uniform mixture of normals with a shared standard deviation."""

    means: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))

    def mean(self) -> float:
        return float(self.means.mean())

    def cdf(self, x: float) -> float:
        return float(np.mean(ndtr((x - self.means) / self.sigma)))

    def pdf(self, x):
        z = (np.asarray(x, dtype=np.float64)[..., None] - self.means) / self.sigma
        return np.mean(np.exp(-0.5 * z * z), axis=-1) / (self.sigma * math.sqrt(2 * math.pi))


def impute(model: QuantileModel, s: int, sigma: float = 1.0) -> GaussianMixture:
    return GaussianMixture(model.quantiles[s].copy(), sigma)


def interval_probability(mixture: GaussianMixture, lo: float, hi: float) -> float:
    """Mass the mixture places on ``[lo, hi]``."""
    if lo > hi:
        raise ValueError("interval must satisfy lo <= hi")
    if lo == hi:
        return 0.0
    m, sig = mixture.means, mixture.sigma
    hi_z = (hi - m) / sig
    lo_z = (lo - m) / sig
    # take upper-tail differences when both ends sit above the means to keep precision
    upper = ndtr(-lo_z) - ndtr(-hi_z)
    lower = ndtr(hi_z) - ndtr(lo_z)
    p = np.where(lo_z > 0, upper, lower)
    return float(min(1.0, max(0.0, p.mean())))


def anomaly_probability(model: QuantileModel, s: int, g_bar: float, delta: float = 1.0,
                        sigma: float = 1.0) -> float:
    """``1 - eta_hat^s([g_bar - delta, g_bar + delta])`` under the Gaussian imputation."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return 1.0 - interval_probability(impute(model, s, sigma), g_bar - delta, g_bar + delta)
