"""Two-phase anomaly detection with Reverse GVFs.

Phase 1 learns per-state quantiles of the reverse return off-policy.
Phase 2 streams the target policy, keeps the reverse return on the fly and
reports ``1 - eta_hat^{S_t}([G_t - delta, G_t + delta])`` each step, with a
reward or policy anomaly switched on at ``onset_step``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .distributional import QuantileModel, anomaly_probability, train_quantiles
from .mdp import FiniteMdp, Policy, Transition, sample_initial_state, sample_step, sample_trajectory
from .oracle import is_ratio, reverse_gvf
from .reverse_td import ReverseReturnTracker


@dataclass(frozen=True, eq=False)
class AnomalySpec:
    """``kind`` is ``"none"``, ``"reward"`` (add ``delta`` w.p. ``prob``) or ``"policy"``."""

    kind: str = "none"
    delta: float = 0.0
    prob: float = 0.0
    replacement: Policy | None = None
    onset_step: int = 0
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("none", "reward", "policy"):
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("anomaly probability must lie in [0, 1]")
        if self.kind == "policy" and self.replacement is None:
            raise ValueError("a policy anomaly needs a replacement policy")
        if self.onset_step < 0:
            raise ValueError("onset_step must be nonnegative")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())

    def _default_label(self) -> str:
        if self.kind == "reward":
            return f"reward:{self.delta:+g}:{self.prob:g}"
        if self.kind == "policy":
            return "policy"
        return "none"

    def active(self, step: int) -> bool:
        return self.kind != "none" and step >= self.onset_step


def parse_spec(text: str, n_states: int, n_actions: int, onset_step: int = 0) -> AnomalySpec:
    """Parse ``none``, ``reward:<delta>:<prob>`` or ``policy:<prob of a1>``.

    >>> parse_spec("reward:+2:0.5", 4, 2).delta
    2.0
    """
    parts = text.strip().split(":")
    kind = parts[0].lower()
    if kind == "none" and len(parts) == 1:
        return AnomalySpec("none", onset_step=onset_step, label="none")
    if kind == "reward" and len(parts) == 3:
        return AnomalySpec("reward", float(parts[1]), float(parts[2]), onset_step=onset_step,
                           label=text.strip())
    if kind == "policy" and len(parts) == 2:
        replacement = Policy.action_bias(n_states, n_actions, 0, float(parts[1]))
        return AnomalySpec("policy", replacement=replacement, onset_step=onset_step,
                           label=text.strip())
    raise ValueError(f"cannot parse anomaly spec {text!r}; expected none, reward:D:P or policy:P")


def acting_policy(spec: AnomalySpec, policy: Policy, step: int) -> Policy:
    """The policy that actually picks the action at ``step``."""
    if spec.kind == "policy" and spec.active(step):
        return spec.replacement
    return policy


def inject(transition: Transition, spec: AnomalySpec, step: int,
           rng: np.random.Generator) -> Transition:
    """Apply a reward anomaly to ``transition``; identity otherwise.

    One uniform is drawn for every active reward-anomaly step.
    """
    if spec.kind != "reward" or not spec.active(step):
        return transition
    if rng.random() < spec.prob:
        return replace(transition, reward=transition.reward + spec.delta)
    return transition


class StreamingDetector:
    """Constant-memory detector: one reverse-return tracker and one quantile model.

    ``discount``, ``delta`` and ``sigma`` are fixed configuration. Nothing
    about past steps is retained beyond the tracker's running value.
    """

    __slots__ = ("tracker", "model", "discount", "delta", "sigma")

    def __init__(self, model: QuantileModel, discount, delta: float = 1.0, sigma: float = 1.0):
        self.tracker = ReverseReturnTracker()
        self.model = model
        self.discount = tuple(float(g) for g in discount)
        self.delta = delta
        self.sigma = sigma

    def observe(self, reward: float, state: int) -> float:
        """Feed ``R_t`` and ``S_t``; return the anomaly probability at step t."""
        g = self.tracker.step(reward, self.discount[state])
        return anomaly_probability(self.model, state, g, self.delta, self.sigma)


@dataclass(frozen=True, eq=False)
class DetectionTrace:
    """Per-step records; entry k describes step ``steps[k]`` (1-based)."""

    steps: np.ndarray
    states: np.ndarray
    g_bar: np.ndarray
    anomaly_prob: np.ndarray
    rewards: np.ndarray
    actions: np.ndarray
    prev_states: np.ndarray

    def pre_post_means(self, onset_step: int) -> tuple[float, float]:
        # transition with time index t produces step t + 1
        post = self.steps > onset_step
        return float(self.anomaly_prob[~post].mean()), float(self.anomaly_prob[post].mean())


@dataclass(frozen=True)
class Phase1Config:
    n_quantiles: int = 20
    kappa: float = 1.0
    alpha: float = 5e-3
    sync_period: int = 100
    eval_every: int = 1000


def run_phase1(mdp: FiniteMdp, mu: Policy, pi: Policy, steps: int,
               config: Phase1Config = Phase1Config(),
               seed: int | np.random.SeedSequence = 0) -> tuple[QuantileModel, tuple[np.ndarray, np.ndarray]]:
    """Train the quantile table off-policy from ``steps`` transitions of ``mu``.

    Updates are weighted by ``rho(s, a) = pi(a|s) / mu(a|s)``. Returns the
    model and the curve ``(steps, mve)`` of the mean-of-quantiles error
    against the reverse GVF of ``pi``.
    """
    rho = is_ratio(mdp, pi, mu)
    v_true = reverse_gvf(mdp, pi)
    model = QuantileModel.zeros(mdp.n_states, config.n_quantiles, config.kappa,
                                config.sync_period)
    rng = np.random.default_rng(seed)
    trajectory = sample_trajectory(mdp, mu, steps, rng)
    curve = train_quantiles(model, trajectory, mdp.discount, config.alpha, rho, v_true,
                            config.eval_every)
    return model, curve


def run_phase2(mdp: FiniteMdp, pi: Policy, model: QuantileModel, spec: AnomalySpec, steps: int,
               delta: float = 1.0, sigma: float = 1.0,
               seed: int | np.random.SeedSequence = 0) -> DetectionTrace:
    """Stream ``pi`` for ``steps`` transitions and score every step.

    The spec's anomaly applies to every transition with time index at or
    after ``spec.onset_step``. The detector only ever sees the reward and
    the new state; recording is done here.
    """
    rng = np.random.default_rng(seed)
    detector = StreamingDetector(model, mdp.discount, delta, sigma)
    out_steps = np.arange(1, steps + 1)
    states = np.empty(steps, dtype=np.int64)
    prev_states = np.empty(steps, dtype=np.int64)
    actions = np.empty(steps, dtype=np.int64)
    rewards = np.empty(steps)
    g_bar = np.empty(steps)
    probs = np.empty(steps)
    s = sample_initial_state(mdp, rng)
    for t in range(steps):
        tr = sample_step(mdp, acting_policy(spec, pi, t), s, rng, time_index=t)
        tr = inject(tr, spec, t, rng)
        probs[t] = detector.observe(tr.reward, tr.next_state)
        g_bar[t] = detector.tracker.g_bar
        states[t], prev_states[t], actions[t], rewards[t] = (tr.next_state, tr.prev_state,
                                                             tr.action, tr.reward)
        s = tr.next_state
    return DetectionTrace(out_steps, states, g_bar, probs, rewards, actions, prev_states)
