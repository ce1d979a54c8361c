"""Finite MDPs: representation, validation, sampling and chain matrices.

States and actions are integer indices. Rewards are finite discrete
distributions per (state, action) pair, stored as padded arrays
``reward_values[s, a, k]`` / ``reward_probs[s, a, k]`` so that the numba
samplers can consume them directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg
from numba import njit
from scipy.sparse.csgraph import connected_components

from .errors import NotErgodic

ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """A finite MDP with a per-state discount function.

    Attributes
    ----------
    transition : (S, A, S) ndarray
        ``transition[s, a, s']`` is ``p(s'|s, a)``.
    reward_values, reward_probs : (S, A, M) ndarray
        Outcome lists for the reward of each (s, a), padded with zero mass.
    discount : (S,) ndarray
        ``gamma(s)``.
    initial_dist : (S,) ndarray
    """

    transition: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    discount: np.ndarray
    initial_dist: np.ndarray
    state_names: tuple[str, ...] = ()
    action_names: tuple[str, ...] = ()
    # inverse-CDF tables used by the samplers
    _transition_cdf: np.ndarray = field(init=False, repr=False)
    _reward_cdf: np.ndarray = field(init=False, repr=False)
    _initial_cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        transition = np.array(self.transition, dtype=np.float64)
        values = np.array(self.reward_values, dtype=np.float64)
        probs = np.array(self.reward_probs, dtype=np.float64)
        discount = np.array(self.discount, dtype=np.float64)
        mu0 = np.array(self.initial_dist, dtype=np.float64)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {transition.shape}")
        n_states, n_actions, _ = transition.shape
        if values.shape != probs.shape or values.shape[:2] != (n_states, n_actions):
            raise ValueError("reward_values / reward_probs must have shape (S, A, M)")
        if discount.shape != (n_states,) or mu0.shape != (n_states,):
            raise ValueError("discount and initial_dist must have shape (S,)")
        for name, arr in [("transition", transition), ("reward_values", values),
                          ("reward_probs", probs), ("discount", discount),
                          ("initial_dist", mu0)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"s{i}" for i in range(n_states)))
        if not self.action_names:
            object.__setattr__(self, "action_names", tuple(f"a{i}" for i in range(n_actions)))
        object.__setattr__(self, "_transition_cdf", _cdf_table(transition))
        object.__setattr__(self, "_reward_cdf", _cdf_table(probs))
        object.__setattr__(self, "_initial_cdf", _cdf_table(mu0))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @classmethod
    def from_outcomes(cls, transition, rewards, discount, initial_dist=None, **names) -> FiniteMdp:
        """Build from nested ``rewards[s][a] = [(value, prob), ...]`` lists."""
        transition = np.asarray(transition, dtype=np.float64)
        n_states, n_actions, _ = transition.shape
        width = max(len(rewards[s][a]) for s in range(n_states) for a in range(n_actions))
        values = np.zeros((n_states, n_actions, width))
        probs = np.zeros((n_states, n_actions, width))
        for s in range(n_states):
            for a in range(n_actions):
                for k, (v, p) in enumerate(rewards[s][a]):
                    values[s, a, k] = v
                    probs[s, a, k] = p
        if initial_dist is None:
            initial_dist = np.full(n_states, 1.0 / n_states)
        return cls(transition, values, probs, np.asarray(discount, dtype=np.float64),
                   np.asarray(initial_dist, dtype=np.float64), **names)

    def outcomes(self, s: int, a: int) -> list[tuple[float, float]]:
        """Reward outcomes ``(value, prob)`` of (s, a) with positive mass."""
        return [(float(v), float(p)) for v, p in
                zip(self.reward_values[s, a], self.reward_probs[s, a]) if p > 0]

    def mean_rewards(self) -> np.ndarray:
        """``r(s, a)``, the expected reward of each state-action pair."""
        return np.einsum("sak,sak->sa", self.reward_values, self.reward_probs)

    def with_discount(self, discount) -> FiniteMdp:
        return FiniteMdp(self.transition, self.reward_values, self.reward_probs,
                         np.asarray(discount, dtype=np.float64), self.initial_dist,
                         self.state_names, self.action_names)

    def with_rewards(self, reward_values, reward_probs) -> FiniteMdp:
        return FiniteMdp(self.transition, reward_values, reward_probs, self.discount,
                         self.initial_dist, self.state_names, self.action_names)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "state_names": list(self.state_names),
            "action_names": list(self.action_names),
            "transition": self.transition.tolist(),
            "reward_model": [[[list(o) for o in self.outcomes(s, a)]
                              for a in range(self.n_actions)]
                             for s in range(self.n_states)],
            "discount": self.discount.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FiniteMdp:
        names = {}
        if doc.get("state_names"):
            names["state_names"] = tuple(doc["state_names"])
        if doc.get("action_names"):
            names["action_names"] = tuple(doc["action_names"])
        return cls.from_outcomes(doc["transition"], doc["reward_model"], doc["discount"],
                                 doc.get("initial_dist"), **names)


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic action table ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {probs.shape}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_cdf", _cdf_table(probs))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> Policy:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def action_bias(cls, n_states: int, n_actions: int, action: int, prob: float) -> Policy:
        """Take ``action`` with probability ``prob`` everywhere, the rest uniformly."""
        if n_actions == 1:
            return cls(np.ones((n_states, 1)))
        table = np.full((n_states, n_actions), (1.0 - prob) / (n_actions - 1))
        table[:, action] = prob
        return cls(table)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class Transition:
    prev_state: int
    action: int
    reward: float
    next_state: int
    time_index: int = 0


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``states[t]`` is S_t for t = 0..T; ``actions[t]`` is A_t and ``rewards[t]`` is R_{t+1}."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def transitions(self) -> Iterator[Transition]:
        for t in range(len(self.actions)):
            yield Transition(int(self.states[t]), int(self.actions[t]), float(self.rewards[t]),
                             int(self.states[t + 1]), t)


def _cdf_table(probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    total = cdf[..., -1:]
    cdf = np.divide(cdf, total, out=np.ones_like(cdf), where=total > 0)
    # x/x == 1 exactly, but pin the last entry anyway so a draw never runs off the end
    cdf[..., -1] = 1.0
    cdf.setflags(write=False)
    return cdf


# ---------------------------------------------------------------------------
# validation


def validate(mdp: FiniteMdp, policy: Policy | None = None) -> list[str]:
    """Return the violated invariants of ``mdp`` (and ``policy``); empty when valid."""
    errors = []
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            row = mdp.transition[s, a]
            if np.any(row < 0):
                errors.append(f"transition p(.|s={s},a={a}) has negative entries")
            total = row.sum()
            if abs(total - 1.0) > ROW_TOL:
                errors.append(f"transition p(.|s={s},a={a}): row sum {total:.12g} ≠ 1")
            probs = mdp.reward_probs[s, a]
            if np.any(probs < 0):
                errors.append(f"reward outcomes of (s={s},a={a}) have negative mass")
            if abs(probs.sum() - 1.0) > ROW_TOL:
                errors.append(f"reward outcomes of (s={s},a={a}): sum {probs.sum():.12g} ≠ 1")
    if not np.all(np.isfinite(mdp.reward_values)):
        errors.append("reward values must be finite")
    for s, g in enumerate(mdp.discount):
        if not 0.0 <= g <= 1.0:
            errors.append(f"discount out of [0,1] at state {s}: {g:g}")
    if np.any(mdp.initial_dist < 0) or abs(mdp.initial_dist.sum() - 1.0) > ROW_TOL:
        errors.append(f"initial distribution sum {mdp.initial_dist.sum():.12g} ≠ 1")
    if policy is not None:
        if policy.probs.shape != (mdp.n_states, mdp.n_actions):
            errors.append(f"policy shape {policy.probs.shape} does not match the MDP")
        else:
            if np.any(policy.probs < 0):
                errors.append("policy has negative entries")
            for s, total in enumerate(policy.probs.sum(axis=1)):
                if abs(total - 1.0) > ROW_TOL:
                    errors.append(f"policy row s={s}: row sum {total:.12g} ≠ 1")
    return errors


# ---------------------------------------------------------------------------
# presets


MICRODRONE_STATES = ("L1", "L2", "L3", "L4")
MICRODRONE_ACTIONS = ("a1", "a2")


def build_microdrone(ideal_rewards: bool = False, fail_prob: float = 0.01) -> tuple[FiniteMdp, Policy]:
    """The four-location microdrone on a circle with a charger at L4.

    Action a1 moves clockwise (L1->L2->L3->L4->L1) and consumes 2 units,
    a2 moves counterclockwise and consumes 1. Each move fails with
    ``fail_prob``, leaving the drone in place. By default a failed move
    costs nothing, which is modelled as a reward outcome of 0 drawn with
    ``fail_prob`` independently of the transition; ``ideal_rewards`` gives
    the deterministic 2/1 reward instead.
    """
    n = len(MICRODRONE_STATES)
    transition = np.zeros((n, 2, n))
    for s in range(n):
        transition[s, 0, (s + 1) % n] += 1.0 - fail_prob
        transition[s, 1, (s - 1) % n] += 1.0 - fail_prob
        transition[s, :, s] += fail_prob
    rewards = []
    for _ in range(n):
        if ideal_rewards:
            rewards.append([[(2.0, 1.0)], [(1.0, 1.0)]])
        else:
            rewards.append([[(2.0, 1.0 - fail_prob), (0.0, fail_prob)],
                            [(1.0, 1.0 - fail_prob), (0.0, fail_prob)]])
    mdp = FiniteMdp.from_outcomes(transition, rewards, [1.0, 1.0, 1.0, 0.0],
                                  state_names=MICRODRONE_STATES,
                                  action_names=MICRODRONE_ACTIONS)
    return mdp, Policy.uniform(n, 2)


def build_random_mdp(seed: int, n_states: int, n_actions: int, reward_outcomes: int = 2,
                     lattice: bool = False) -> tuple[FiniteMdp, Policy]:
    """Random ergodic MDP and policy for property tests.

    All transition probabilities are strictly positive. Discounts are 1 with
    probability 0.3 and uniform on [0, 1) otherwise, with state 0 forced below
    one. ``lattice=True`` restricts discounts to {0, 1} (state 0 gets 0) and
    rewards to small integers, which keeps distributional supports finite.
    """
    if n_states < 2 or n_actions < 1:
        raise ValueError("degenerate chain: need n_states >= 2 and n_actions >= 1")
    if reward_outcomes < 1:
        raise ValueError("reward_outcomes must be >= 1")
    rng = np.random.default_rng(seed)
    transition = rng.gamma(1.0, size=(n_states, n_actions, n_states)) + 1e-3
    transition /= transition.sum(axis=-1, keepdims=True)
    probs = rng.gamma(1.0, size=(n_states, n_actions, reward_outcomes)) + 1e-3
    probs /= probs.sum(axis=-1, keepdims=True)
    if lattice:
        values = rng.integers(-2, 4, size=probs.shape).astype(np.float64)
        discount = (rng.random(n_states) < 0.7).astype(np.float64)
        discount[0] = 0.0
    else:
        values = rng.normal(size=probs.shape)
        discount = np.where(rng.random(n_states) < 0.3, 1.0, rng.random(n_states))
        discount[0] = min(discount[0], 0.9)
    policy = rng.gamma(1.0, size=(n_states, n_actions)) + 1e-2
    policy /= policy.sum(axis=1, keepdims=True)
    mu0 = np.full(n_states, 1.0 / n_states)
    return FiniteMdp(transition, values, probs, discount, mu0), Policy(policy)


# ---------------------------------------------------------------------------
# sampling


@njit(cache=True)
def _draw(cdf, u):
    # first index with cdf > u, i.e. searchsorted(cdf, u, side="right"), clamped
    n = cdf.shape[0]
    i = 0
    while i < n - 1 and cdf[i] <= u:
        i += 1
    return i


@njit(cache=True)
def _simulate(policy_cdf, transition_cdf, reward_cdf, reward_values, s0, uniforms,
              states, actions, rewards):
    s = s0
    states[0] = s
    for t in range(uniforms.shape[0]):
        a = _draw(policy_cdf[s], uniforms[t, 0])
        s_next = _draw(transition_cdf[s, a], uniforms[t, 1])
        k = _draw(reward_cdf[s, a], uniforms[t, 2])
        actions[t] = a
        rewards[t] = reward_values[s, a, k]
        states[t + 1] = s_next
        s = s_next


def sample_initial_state(mdp: FiniteMdp, rng: np.random.Generator) -> int:
    return int(_draw(mdp._initial_cdf, rng.random()))


def sample_step(mdp: FiniteMdp, policy: Policy, state: int, rng: np.random.Generator,
                time_index: int = 0) -> Transition:
    """Sample one transition from ``state``; consumes exactly three uniforms."""
    u = rng.random(3)
    a = _draw(policy._cdf[state], u[0])
    s_next = _draw(mdp._transition_cdf[state, a], u[1])
    k = _draw(mdp._reward_cdf[state, a], u[2])
    return Transition(int(state), int(a), float(mdp.reward_values[state, a, k]), int(s_next),
                      time_index)


def iter_trajectory(mdp: FiniteMdp, policy: Policy, n_steps: int, rng: np.random.Generator,
                    start_state: int | None = None, chunk: int = 1_000_000) -> Iterator[Trajectory]:
    """Yield consecutive pieces of one trajectory, each at most ``chunk`` steps long.

    Piece k+1 starts at the last state of piece k. The random stream is the
    same as calling :func:`sample_step` ``n_steps`` times.
    """
    s = sample_initial_state(mdp, rng) if start_state is None else int(start_state)
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        uniforms = rng.random((m, 3))
        states = np.empty(m + 1, dtype=np.int64)
        actions = np.empty(m, dtype=np.int64)
        rewards = np.empty(m, dtype=np.float64)
        _simulate(policy._cdf, mdp._transition_cdf, mdp._reward_cdf, mdp.reward_values, s,
                  uniforms, states, actions, rewards)
        yield Trajectory(states, actions, rewards)
        s = int(states[-1])
        done += m


def sample_trajectory(mdp: FiniteMdp, policy: Policy, n_steps: int, rng: np.random.Generator,
                      start_state: int | None = None) -> Trajectory:
    if n_steps == 0:
        s = sample_initial_state(mdp, rng) if start_state is None else int(start_state)
        return Trajectory(np.array([s], dtype=np.int64), np.empty(0, dtype=np.int64),
                          np.empty(0))
    pieces = list(iter_trajectory(mdp, policy, n_steps, rng, start_state))
    if len(pieces) == 1:
        return pieces[0]
    states = np.concatenate([pieces[0].states] + [p.states[1:] for p in pieces[1:]])
    return Trajectory(states, np.concatenate([p.actions for p in pieces]),
                      np.concatenate([p.rewards for p in pieces]))


# ---------------------------------------------------------------------------
# chain matrices


def transition_matrix(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """``P_pi[s, s'] = sum_a pi(a|s) p(s'|s, a)``."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def state_action_matrix(mdp: FiniteMdp) -> np.ndarray:
    """``P~[(s, a), s'] = p(s'|s, a)`` with rows ordered s-major."""
    return mdp.transition.reshape(mdp.n_states * mdp.n_actions, mdp.n_states)


def reward_sa_vector(mdp: FiniteMdp) -> np.ndarray:
    return mdp.mean_rewards().reshape(-1)


def reward_vector(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    return np.einsum("sa,sa->s", policy.probs, mdp.mean_rewards())


def _closed_classes(P: np.ndarray) -> list[np.ndarray]:
    n_comp, labels = connected_components(P > 0, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        if not np.any(P[np.ix_(members, ~members)] > 0):
            closed.append(np.flatnonzero(members))
    return closed


def is_irreducible(P: np.ndarray) -> bool:
    n_comp, _ = connected_components(P > 0, directed=True, connection="strong")
    return n_comp == 1


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix.

    Solves ``(P^T - I) d = 0`` with the last equation replaced by
    ``sum(d) = 1`` using LU with partial pivoting. Raises
    :class:`NotErgodic` when the chain has more than one closed class, in
    which case the stationary distribution is not unique.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    if len(_closed_classes(P)) != 1:
        raise NotErgodic("chain has more than one closed communicating class")
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    with np.errstate(divide="raise", invalid="raise", over="raise"):
        try:
            lu = scipy.linalg.lu_factor(A, check_finite=True)
            d = scipy.linalg.lu_solve(lu, b)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            d = None
    if d is None or not np.all(np.isfinite(d)):
        d = stationary_distribution_power(P)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    return d


def stationary_distribution_power(P: np.ndarray, tol: float = 1e-12,
                                  max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration from the uniform distribution; the independent cross-check."""
    n = P.shape[0]
    d = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = d @ P
        if np.max(np.abs(nxt - d)) <= tol:
            return nxt / nxt.sum()
        d = nxt
    raise NotErgodic(f"power iteration did not converge within {max_iter} iterations")


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def check_assumption1(mdp: FiniteMdp, policy: Policy, cond_limit: float = 1e12) -> list[str]:
    """Check that the chain is ergodic and ``I - P_pi^T Gamma`` is invertible.

    Returns the list of failed conditions (``"not ergodic"``,
    ``"singular (I − P_πᵀΓ)"``); empty when the assumption holds.
    Periodic but irreducible chains pass the ergodicity check because their
    stationary distribution is unique and strictly positive.
    """
    P = transition_matrix(mdp, policy)
    failures = []
    if not is_irreducible(P):
        failures.append("not ergodic")
    M = np.eye(mdp.n_states) - P.T * mdp.discount[None, :]
    if np.linalg.cond(M) > cond_limit or spectral_radius(P.T * mdp.discount[None, :]) >= 1.0 - 1e-12:
        failures.append("singular (I − P_πᵀΓ)")
    return failures


# ---------------------------------------------------------------------------
# JSON documents


def save_mdp(path: str | Path, mdp: FiniteMdp, policy: Policy | None = None) -> None:
    doc = mdp.to_dict()
    if policy is not None:
        doc["policy"] = policy.probs.tolist()
    Path(path).write_text(json.dumps(doc, indent=2))


def load_mdp(path: str | Path) -> tuple[FiniteMdp, Policy]:
    """Load an MDP document; the policy defaults to uniform when absent."""
    doc = json.loads(Path(path).read_text())
    mdp = FiniteMdp.from_dict(doc)
    if "policy" in doc:
        policy = Policy(doc["policy"])
    else:
        policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    return mdp, policy


def policy_from_rows(rows: Sequence[Sequence[float]]) -> Policy:
    return Policy(np.asarray(rows, dtype=np.float64))
