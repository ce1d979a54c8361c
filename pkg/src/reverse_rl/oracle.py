"""Ground truth for every learnable quantity.

Closed-form forward and reverse GVFs, the linear fixed point of Reverse TD,
density and importance ratios, the time-reversed kernel p(s_prev, r | s),
and the distributional reverse Bellman operator iterated on discrete
supports. Monte-Carlo estimators provide the independent second route.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .errors import (AssumptionViolated, CoverageViolation, RankDeficientFeatures,
                     SingularSystem, SupportExplosion)
from .mdp import (FiniteMdp, Policy, _draw, check_assumption1, iter_trajectory, reward_sa_vector,
                  reward_vector, spectral_radius, state_action_matrix,
                  stationary_distribution, transition_matrix)

MERGE_TOL = 1e-9
MIN_MASS = 1e-12


# ---------------------------------------------------------------------------
# value functions


def forward_gvf(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """``v_pi = (I - P_pi Gamma)^-1 r_pi``."""
    P = transition_matrix(mdp, policy)
    M = np.eye(mdp.n_states) - P * mdp.discount[None, :]
    if np.linalg.cond(M) > 1e12:
        raise SingularSystem("I - P_pi Gamma is singular")
    return np.linalg.solve(M, reward_vector(mdp, policy))


def _require_assumption1(mdp, policy):
    failures = check_assumption1(mdp, policy)
    if failures:
        raise AssumptionViolated(", ".join(failures))


def reverse_gvf(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """Closed form ``D^-1 (I - P^T Gamma)^-1 P~^T D~ r`` of the reverse GVF."""
    _require_assumption1(mdp, policy)
    d = stationary_distribution(transition_matrix(mdp, policy))
    P = transition_matrix(mdp, policy)
    M = np.eye(mdp.n_states) - P.T * mdp.discount[None, :]
    return np.linalg.solve(M, _inflow_reward(mdp, policy, d)) / d


def _inflow_reward(mdp, policy, d):
    # P~^T D~ r: expected reward flowing into each state under d_pi
    d_sa = (d[:, None] * policy.probs).reshape(-1)
    return state_action_matrix(mdp).T @ (d_sa * reward_sa_vector(mdp))


def reverse_bellman(mdp: FiniteMdp, policy: Policy, y: np.ndarray) -> np.ndarray:
    """Apply the reverse Bellman operator ``D^-1 P~^T D~ r + D^-1 P^T Gamma D y``."""
    P = transition_matrix(mdp, policy)
    d = stationary_distribution(P)
    return (_inflow_reward(mdp, policy, d) + P.T @ (mdp.discount * d * y)) / d


@dataclass(frozen=True, eq=False)
class LinearFixedPoint:
    weights: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sym_eigenvalues: np.ndarray


def linear_fixed_point(mdp: FiniteMdp, policy: Policy, features: np.ndarray) -> LinearFixedPoint:
    """Limit ``-A^-1 b`` of Reverse TD with features ``X`` (rows x(s)).

    ``A = X^T (P^T Gamma - I) D X`` and ``b = X^T P~^T D~ r``. The
    eigenvalues of the symmetric part of ``A`` are returned alongside; they
    are all negative under the convergence conditions.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != mdp.n_states:
        raise ValueError(f"features must have shape ({mdp.n_states}, K), got {X.shape}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientFeatures(f"feature matrix of shape {X.shape} is not full column rank")
    _require_assumption1(mdp, policy)
    P = transition_matrix(mdp, policy)
    d = stationary_distribution(P)
    A = X.T @ (P.T * mdp.discount[None, :] - np.eye(mdp.n_states)) @ (d[:, None] * X)
    b = X.T @ _inflow_reward(mdp, policy, d)
    w = -np.linalg.solve(A, b)
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    return LinearFixedPoint(w, A, b, eig)


def expected_update(mdp: FiniteMdp, target: Policy, features: np.ndarray, w: np.ndarray,
                    behavior: Policy | None = None) -> np.ndarray:
    """Expected Reverse TD update direction at ``w``, by enumerating transitions.

    Sums ``tau(s) rho(s, a) (r(s, a) + gamma(s) x(s)^T w - x(s')^T w) x(s')``
    over the stationary transition distribution ``d_mu(s) mu(a|s) p(s'|s, a)``
    of the behavior policy (the target itself when ``behavior`` is None).
    """
    X = np.asarray(features, dtype=np.float64)
    behavior = target if behavior is None else behavior
    d_mu = stationary_distribution(transition_matrix(mdp, behavior))
    tau = density_ratio(mdp, target, behavior)
    rho = is_ratio(mdp, target, behavior)
    r = mdp.mean_rewards()
    total = np.zeros(X.shape[1])
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            for s2 in range(mdp.n_states):
                prob = d_mu[s] * behavior.probs[s, a] * mdp.transition[s, a, s2]
                if prob == 0.0:
                    continue
                delta = r[s, a] + mdp.discount[s] * X[s] @ w - X[s2] @ w
                total += prob * tau[s] * rho[s, a] * delta * X[s2]
    return total


def density_ratio(mdp: FiniteMdp, pi: Policy, mu: Policy) -> np.ndarray:
    """``tau(s) = d_pi(s) / d_mu(s)``."""
    is_ratio(mdp, pi, mu)  # coverage check
    d_pi = stationary_distribution(transition_matrix(mdp, pi))
    d_mu = stationary_distribution(transition_matrix(mdp, mu))
    if np.any(d_mu <= 0):
        raise AssumptionViolated("behavior chain has zero stationary mass at some state")
    return d_pi / d_mu


def is_ratio(mdp: FiniteMdp, pi: Policy, mu: Policy) -> np.ndarray:
    """``rho(s, a) = pi(a|s) / mu(a|s)``, zero where both are zero."""
    uncovered = (pi.probs > 0) & (mu.probs <= 0)
    if np.any(uncovered):
        s, a = np.argwhere(uncovered)[0]
        raise CoverageViolation(f"pi({a}|{s}) > 0 but mu({a}|{s}) = 0")
    return np.divide(pi.probs, mu.probs, out=np.zeros_like(pi.probs), where=mu.probs > 0)


@dataclass(frozen=True)
class OracleReport:
    forward_values: np.ndarray
    reverse_values: np.ndarray
    d_pi: np.ndarray
    spectral_radius_reverse: float
    method: str = "matrix_solve"

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("forward_values", "reverse_values", "d_pi"):
            doc[key] = [float(v) for v in doc[key]]
        doc["spectral_radius_reverse"] = float(doc["spectral_radius_reverse"])
        return doc


def oracle_report(mdp: FiniteMdp, policy: Policy, method: str = "matrix_solve",
                  mc_steps: int = 10_000_000, mc_episodes: int = 100_000,
                  seed: int = 0) -> OracleReport:
    P = transition_matrix(mdp, policy)
    radius = spectral_radius(P.T * mdp.discount[None, :])
    d = stationary_distribution(P)
    if method == "matrix_solve":
        forward = forward_gvf(mdp, policy)
        reverse = reverse_gvf(mdp, policy)
    elif method == "monte_carlo":
        rng = np.random.default_rng(seed)
        forward = mc_forward_gvf(mdp, policy, mc_episodes, rng).mean
        reverse = mc_reverse_gvf(mdp, policy, mc_steps, rng).mean
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    return OracleReport(forward, reverse, d, radius, method)


# ---------------------------------------------------------------------------
# Monte-Carlo estimators


@dataclass(frozen=True, eq=False)
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_batches: int


@njit(cache=True)
def _reverse_return_batches(states, rewards, gamma, g, batch, sums, counts):
    for t in range(rewards.shape[0]):
        g = rewards[t] + gamma[states[t]] * g
        s = states[t + 1]
        sums[batch, s] += g
        counts[batch, s] += 1
    return g


def mc_reverse_gvf(mdp: FiniteMdp, policy: Policy, n_steps: int, rng: np.random.Generator,
                   n_batches: int = 200, burn_in: int = 10_000) -> MonteCarloEstimate:
    """Estimate ``lim E[G_t | S_t = s]`` from one long trajectory.

    The reverse return is accumulated along a single trajectory of
    ``burn_in + n_steps`` transitions. The last ``n_steps`` are split into
    ``n_batches`` contiguous segments, and per-state conditional means are
    taken within each segment. Standard errors come from the spread of
    those segment means.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches for a standard error")
    n = mdp.n_states
    batch_len = n_steps // n_batches
    sums = np.zeros((n_batches + 1, n))
    counts = np.zeros((n_batches + 1, n), dtype=np.int64)
    g = 0.0
    # slot n_batches collects the burn-in and is discarded
    lengths = [burn_in] + [batch_len] * n_batches
    slots = [n_batches] + list(range(n_batches))
    start = None
    for length, slot in zip(lengths, slots):
        if length == 0:
            continue
        for piece in iter_trajectory(mdp, policy, length, rng, start_state=start):
            g = _reverse_return_batches(piece.states, piece.rewards, mdp.discount, g, slot,
                                        sums, counts)
            start = int(piece.states[-1])
    sums, counts = sums[:n_batches], counts[:n_batches]
    with np.errstate(invalid="ignore", divide="ignore"):
        batch_means = sums / counts
    mean = np.nanmean(batch_means, axis=0)
    valid = np.sum(counts > 0, axis=0)
    stderr = np.nanstd(batch_means, axis=0, ddof=1) / np.sqrt(valid)
    return MonteCarloEstimate(mean, stderr, n_batches)


@njit(cache=True)
def _forward_episodes(policy_cdf, transition_cdf, reward_cdf, reward_values, gamma, start,
                      n_episodes, rng, out):
    for e in range(n_episodes):
        s = start
        g = 0.0
        while True:
            a = _draw(policy_cdf[s], rng.random())
            s_next = _draw(transition_cdf[s, a], rng.random())
            k = _draw(reward_cdf[s, a], rng.random())
            g += reward_values[s, a, k]
            s = s_next
            # continue past s with probability gamma(s)
            if rng.random() >= gamma[s]:
                break
        out[e] = g


def mc_forward_gvf(mdp: FiniteMdp, policy: Policy, n_episodes: int,
                   rng: np.random.Generator) -> MonteCarloEstimate:
    """Episodic Monte-Carlo estimate of ``v_pi``, ``n_episodes`` rollouts per start state.

    ``1 - gamma(s)`` is treated as the probability of terminating on
    entering ``s``, which makes the episode return an unbiased sample of
    ``G_t``.
    """
    n = mdp.n_states
    mean = np.empty(n)
    stderr = np.empty(n)
    out = np.empty(n_episodes)
    for s in range(n):
        _forward_episodes(policy._cdf, mdp._transition_cdf, mdp._reward_cdf, mdp.reward_values,
                          mdp.discount, s, n_episodes, rng, out)
        mean[s] = out.mean()
        stderr[s] = out.std(ddof=1) / np.sqrt(n_episodes)
    return MonteCarloEstimate(mean, stderr, n_episodes)


# ---------------------------------------------------------------------------
# time-reversed kernel


@dataclass(frozen=True, eq=False)
class BackwardKernel:
    """``p(s_prev, r | s)`` as parallel arrays per current state ``s``."""

    pred: tuple[np.ndarray, ...]
    reward: tuple[np.ndarray, ...]
    prob: tuple[np.ndarray, ...]

    def predecessor_probs(self, n_states: int) -> np.ndarray:
        """``p(s_prev | s)`` as an (S, S) matrix indexed [s, s_prev]."""
        out = np.zeros((len(self.pred), n_states))
        for s, (pred, prob) in enumerate(zip(self.pred, self.prob)):
            np.add.at(out[s], pred, prob)
        return out


def backward_kernel(mdp: FiniteMdp, policy: Policy) -> BackwardKernel:
    _require_assumption1(mdp, policy)
    d = stationary_distribution(transition_matrix(mdp, policy))
    preds, rewards, probs = [], [], []
    for s in range(mdp.n_states):
        table: dict[tuple[int, float], float] = {}
        for sp in range(mdp.n_states):
            for a in range(mdp.n_actions):
                flow = d[sp] * policy.probs[sp, a] * mdp.transition[sp, a, s]
                if flow == 0.0:
                    continue
                for v, p in mdp.outcomes(sp, a):
                    key = (sp, v)
                    table[key] = table.get(key, 0.0) + flow * p
        keys = sorted(table)
        prob = np.array([table[k] for k in keys]) / d[s]
        preds.append(np.array([k[0] for k in keys], dtype=np.int64))
        rewards.append(np.array([k[1] for k in keys]))
        probs.append(prob)
    return BackwardKernel(tuple(preds), tuple(rewards), tuple(probs))


def predecessor_discount_matrix(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """``Y[s, s_prev] = p(s_prev | s) gamma(s_prev)``, i.e. ``D^-1 P^T Gamma D``."""
    P = transition_matrix(mdp, policy)
    d = stationary_distribution(P)
    return (P.T * (d * mdp.discount)[None, :]) / d[:, None]


# ---------------------------------------------------------------------------
# discrete distributions and the Cramér distance


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finitely supported distribution with strictly increasing atom values."""

    values: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if values.shape != masses.shape or values.ndim != 1 or len(values) == 0:
            raise ValueError("values and masses must be non-empty 1-D arrays of equal length")
        if np.any(np.diff(values) <= 0):
            raise ValueError("atom values must be strictly increasing")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-10:
            raise ValueError(f"masses must be nonnegative and sum to 1 (sum={masses.sum():.17g})")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def from_atoms(cls, values, masses, merge_tol: float = 0.0,
                   min_mass: float = 0.0) -> DiscreteDistribution:
        """Sort, merge atoms closer than ``merge_tol``, drop light atoms, renormalize.

        Merged atoms take the mass-weighted mean of their values. Chains of
        gaps each within ``merge_tol`` collapse into one atom.
        """
        values = np.asarray(values, dtype=np.float64)
        masses = np.asarray(masses, dtype=np.float64)
        order = np.argsort(values, kind="stable")
        values, masses = values[order], masses[order]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(values) > merge_tol) + 1))
        m = np.add.reduceat(masses, starts)
        mv = np.add.reduceat(masses * values, starts)
        with np.errstate(invalid="ignore", divide="ignore"):
            v = np.where(m > 0, mv / m, values[starts])
        keep = m > min_mass
        if not np.any(keep):
            keep = m == m.max()
        v, m = v[keep], m[keep]
        # weighted means of merged groups can only tie when merge_tol is 0
        return cls(v, m / m.sum())

    @classmethod
    def point_mass(cls, value: float = 0.0) -> DiscreteDistribution:
        return cls(np.array([float(value)]), np.array([1.0]))

    def __len__(self) -> int:
        return len(self.values)

    def mean(self) -> float:
        return float(self.masses @ self.values)

    def variance(self) -> float:
        return float(self.masses @ (self.values - self.mean()) ** 2)

    def cdf(self, x) -> np.ndarray:
        cum = np.concatenate(([0.0], np.cumsum(self.masses)))
        return cum[np.searchsorted(self.values, x, side="right")]

    def quantile(self, level) -> np.ndarray:
        """Left-continuous inverse ``inf{x : F(x) >= level}``."""
        cum = np.cumsum(self.masses)
        idx = np.searchsorted(cum, np.asarray(level) - 1e-12, side="left")
        return self.values[np.minimum(idx, len(self.values) - 1)]


def cramer_distance(a: DiscreteDistribution, b: DiscreteDistribution) -> float:
    """``(int (F_a - F_b)^2 dx)^(1/2)`` computed exactly on the merged support."""
    xs = np.union1d(a.values, b.values)
    if len(xs) < 2:
        return 0.0
    diff = a.cdf(xs[:-1]) - b.cdf(xs[:-1])
    return float(np.sqrt(np.sum(diff * diff * np.diff(xs))))


def sup_cramer(etas1: Sequence[DiscreteDistribution], etas2: Sequence[DiscreteDistribution],
               weights: np.ndarray | None = None) -> float:
    """``max_s l2(eta1^s, eta2^s) / sqrt(w_s)``; unweighted when ``weights`` is None."""
    dist = np.array([cramer_distance(p, q) for p, q in zip(etas1, etas2)])
    if weights is not None:
        dist = dist / np.sqrt(weights)
    return float(dist.max())


def contraction_weights(mdp: FiniteMdp, policy: Policy) -> tuple[np.ndarray, float]:
    """Weights ``w > 0`` and modulus ``k0 < 1`` of ``Y = D^-1 P^T Gamma D`` in the w-max norm.

    ``w = (I - Y)^-1 1`` gives ``(Y w)_s / w_s = 1 - 1/w_s < 1`` for the
    nonnegative matrix ``Y`` whenever its spectral radius is below one.
    """
    Y = predecessor_discount_matrix(mdp, policy)
    w = np.linalg.solve(np.eye(mdp.n_states) - Y, np.ones(mdp.n_states))
    k0 = float(np.max((Y @ w) / w))
    return w, k0


def distributional_operator(kernel: BackwardKernel, discount: np.ndarray,
                            etas: Sequence[DiscreteDistribution], merge_tol: float = MERGE_TOL,
                            min_mass: float = MIN_MASS) -> list[DiscreteDistribution]:
    """One application of the distributional reverse Bellman operator.

    ``(T eta)^s`` mixes the push-forwards ``x -> r + gamma(s_prev) x`` of
    ``eta^{s_prev}`` with weights ``p(s_prev, r | s)``. Pass
    ``merge_tol=min_mass=0`` for the exact operator (only coincident atoms
    are merged).
    """
    out = []
    for s in range(len(kernel.pred)):
        vals, masses = [], []
        for sp, r, p in zip(kernel.pred[s], kernel.reward[s], kernel.prob[s]):
            eta = etas[sp]
            vals.append(r + discount[sp] * eta.values)
            masses.append(p * eta.masses)
        out.append(DiscreteDistribution.from_atoms(np.concatenate(vals), np.concatenate(masses),
                                                   merge_tol, min_mass))
    return out


def distributional_fixed_point(mdp: FiniteMdp, policy: Policy, tolerance: float = 1e-8,
                               max_atoms: int = 1_000_000, max_iter: int = 100_000,
                               merge_tol: float = MERGE_TOL,
                               min_mass: float = MIN_MASS) -> list[DiscreteDistribution]:
    """Iterate the distributional operator from point masses at 0.

    Stops when the largest per-state Cramér distance between successive
    iterates is at most ``tolerance``. Raises :class:`SupportExplosion`
    when the total number of atoms exceeds ``max_atoms``.
    """
    kernel = backward_kernel(mdp, policy)
    etas = [DiscreteDistribution.point_mass(0.0) for _ in range(mdp.n_states)]
    for _ in range(max_iter):
        nxt = distributional_operator(kernel, mdp.discount, etas, merge_tol, min_mass)
        atoms = sum(len(e) for e in nxt)
        if atoms > max_atoms:
            raise SupportExplosion(f"{atoms} atoms exceed the cap of {max_atoms}")
        if sup_cramer(nxt, etas) <= tolerance:
            return nxt
        etas = nxt
    raise SupportExplosion(f"no convergence to {tolerance} within {max_iter} iterations")
