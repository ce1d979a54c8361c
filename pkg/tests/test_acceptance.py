"""Acceptance suite: one test per criterion, each reporting a single pass/fail line."""

import time

import mpmath
import numpy as np
import pytest

from reverse_rl.distributional import (
    GaussianMixture,
    QuantileModel,
    anomaly_probability,
    interval_probability,
    quantile_huber,
    quantile_update_step,
)
from reverse_rl.harness import ExperimentConfig, run_detect, run_lambda_sweep
from reverse_rl.mdp import Policy, Transition, build_microdrone, build_random_mdp, sample_trajectory
from reverse_rl.oracle import (
    DiscreteDistribution,
    backward_kernel,
    cramer_distance,
    distributional_operator,
    linear_fixed_point,
    mc_reverse_gvf,
    reverse_bellman,
    reverse_gvf,
    sup_cramer,
)
from reverse_rl.reverse_td import (
    LearnerConfig,
    LinearValueModel,
    ReverseReturnTracker,
    lambda_target,
    off_policy_config,
    off_policy_reverse_td_step,
    reverse_td_lambda_step,
    reverse_td_step,
    run_learner,
    tracker_update,
)

pytestmark = pytest.mark.acceptance
N_SEEDS = 30


def _random_instance(rng, seed, lattice=False):
    return build_random_mdp(seed, int(rng.integers(2, 11)), int(rng.integers(1, 5)), lattice=lattice)


def _full_rank_features(rng, n_states):
    while True:
        X = rng.normal(size=(n_states, int(rng.integers(1, n_states + 1))))
        if np.linalg.matrix_rank(X) == X.shape[1]:
            return X


def _random_distribution(rng):
    values = np.unique(np.round(rng.normal(scale=3.0, size=int(rng.integers(1, 6))), 6))
    return DiscreteDistribution(values, rng.dirichlet(np.ones(len(values))))


# -- 1: closed-form reverse GVF ----------------------------------------------------------------


def test_reverse_gvf_oracle_consistency(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    instances = [build_microdrone()] + [_random_instance(rng, 5000 + i) for i in range(50)]
    worst_residual, z_scores = 0.0, []
    for i, (mdp, policy) in enumerate(instances):
        v_bar = reverse_gvf(mdp, policy)
        worst_residual = max(worst_residual, float(np.max(np.abs(reverse_bellman(mdp, policy, v_bar)
                                                                  - v_bar))))
        est = mc_reverse_gvf(mdp, policy, 10**7, np.random.default_rng(i))
        z_scores.extend((est.mean - v_bar) / est.stderr)
    elapsed = time.perf_counter() - start
    worst_z = float(np.max(np.abs(z_scores)))
    ok = worst_residual <= 1e-9 and worst_z <= 3.0 and elapsed <= 120
    acceptance_report(1, "closed-form reverse GVF solves its Bellman equation and matches Monte Carlo",
                      ok, f"max residual {worst_residual:.2e}, max |z| {worst_z:.2f} over "
                      f"{len(z_scores)} states, z spread {np.std(z_scores):.2f}, {elapsed:.0f}s")


# -- 2: tabular and linear convergence ----------------------------------------------------------


def test_robbins_monro_reverse_td_converges(acceptance_report):
    start = time.perf_counter()
    mdp, policy = build_microdrone()
    finals = [run_learner(mdp, policy, LearnerConfig(total_steps=10**6, seed=s)).mve[-1]
              for s in range(N_SEEDS)]
    X = np.random.default_rng(7).normal(size=(4, 2))
    w_star = linear_fixed_point(mdp, policy, X).weights
    gaps = [np.max(np.abs(run_learner(mdp, policy, LearnerConfig(total_steps=10**6, seed=s),
                                      features=X).weights - w_star))
            for s in range(N_SEEDS)]
    elapsed = time.perf_counter() - start
    ok = np.median(finals) <= 1e-2 and np.median(gaps) <= 0.05 and elapsed <= 300
    acceptance_report(2, "Robbins-Monro Reverse TD reaches the reverse GVF and the linear fixed point",
                      ok, f"median tabular MVE {np.median(finals):.2e}, median linear gap "
                      f"{np.median(gaps):.3f}, {elapsed:.0f}s")


# -- 3: off-policy ----------------------------------------------------------------------------


def test_off_policy_reaches_the_on_policy_fixed_point(acceptance_report):
    start = time.perf_counter()
    mdp, _ = build_microdrone()
    pi = Policy.action_bias(4, 2, 0, 0.1)
    mu = Policy.action_bias(4, 2, 0, 0.5)
    v_bar = reverse_gvf(mdp, pi)
    gaps_exact, gaps_learned = [], []
    for s in range(N_SEEDS):
        off = run_learner(mdp, pi, off_policy_config(mdp, pi, mu, total_steps=2 * 10**6, seed=s),
                          behavior=mu)
        on = run_learner(mdp, pi, LearnerConfig(total_steps=2 * 10**6, seed=10_000 + s))
        gaps_exact.append(np.max(np.abs(off.weights - v_bar)))
        gaps_learned.append(np.max(np.abs(off.weights - on.weights)))
    elapsed = time.perf_counter() - start
    ok = np.median(gaps_exact) <= 0.05 and np.median(gaps_learned) <= 0.05 and elapsed <= 300
    acceptance_report(3, "off-policy Reverse TD converges to the on-policy fixed point", ok,
                      f"median gap to analytic {np.median(gaps_exact):.3f}, to on-policy run "
                      f"{np.median(gaps_learned):.3f}, {elapsed:.0f}s")


# -- 4: negative definiteness -------------------------------------------------------------------


def test_a_matrix_is_negative_definite(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = -np.inf
    for i in range(200):
        mdp, policy = _random_instance(rng, 20_000 + i)
        assert np.any(mdp.discount < 1)
        fp = linear_fixed_point(mdp, policy, _full_rank_features(rng, mdp.n_states))
        worst = max(worst, float(np.max(np.linalg.eigvalsh((fp.A + fp.A.T) / 2))))
    elapsed = time.perf_counter() - start
    acceptance_report(4, "symmetric part of A is negative definite", worst < 0 and elapsed <= 60,
                      f"largest eigenvalue over 200 instances {worst:.3e}, {elapsed:.1f}s")


# -- 5: distributional contraction ---------------------------------------------------------------


def test_distributional_operator_contracts(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_excess = -np.inf
    for i in range(100):
        mdp, policy = _random_instance(rng, 30_000 + i)
        kernel = backward_kernel(mdp, policy)
        eta1 = [_random_distribution(rng) for _ in range(mdp.n_states)]
        eta2 = [_random_distribution(rng) for _ in range(mdp.n_states)]
        t1 = distributional_operator(kernel, mdp.discount, eta1, 0.0, 0.0)
        t2 = distributional_operator(kernel, mdp.discount, eta2, 0.0, 0.0)
        before = np.array([cramer_distance(a, b) ** 2 for a, b in zip(eta1, eta2)])
        bound = kernel.predecessor_probs(mdp.n_states) @ (mdp.discount * before)
        after = np.array([cramer_distance(a, b) ** 2 for a, b in zip(t1, t2)])
        worst_excess = max(worst_excess, float(np.max(after - bound)))

    iterations = []
    for i in range(20):
        mdp, policy = _random_instance(rng, 40_000 + i, lattice=True)
        kernel = backward_kernel(mdp, policy)
        etas = [DiscreteDistribution.point_mass(0.0) for _ in range(mdp.n_states)]
        for k in range(1, 5001):
            nxt = distributional_operator(kernel, mdp.discount, etas)
            gap = sup_cramer(nxt, etas)
            etas = nxt
            if gap <= 1e-8:
                break
        iterations.append(k if gap <= 1e-8 else None)
    elapsed = time.perf_counter() - start
    converged = all(k is not None for k in iterations)
    ok = worst_excess <= 1e-10 and converged and elapsed <= 120
    acceptance_report(5, "distributional operator contracts and its iterates converge", ok,
                      f"max per-state excess {worst_excess:.2e}, iterations to 1e-8 "
                      f"{max(k or 0 for k in iterations)} max over 20 lattice instances, "
                      f"{elapsed:.0f}s")


# -- 6: lambda sweep ----------------------------------------------------------------------------


def _decreasing_within_noise(mean, se):
    """Every rise between evaluation points stays within 3 standard errors of the difference."""
    rises = np.diff(mean)
    band = 3 * np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    return bool(np.all(rises <= band) and mean[-1] < 0.1 * mean[0])


def test_smaller_lambda_learns_best(acceptance_report):
    start = time.perf_counter()
    output = run_lambda_sweep(ExperimentConfig(experiment="lambda_sweep",
                                               seeds=list(range(N_SEEDS))))
    tuned = output.extras["tuned.json"]
    monotone, best = True, {}
    for criterion, choice in tuned.items():
        finals = {}
        for lam_text, alpha in choice.items():
            agg = output.bundle.aggregate((float(lam_text), alpha))
            monotone &= _decreasing_within_noise(agg["mean"], agg["standard_error"])
            finals[float(lam_text)] = agg["mean"][-1]
        best[criterion] = min(finals, key=finals.get)
    elapsed = time.perf_counter() - start
    ok = monotone and all(lam <= 0.3 for lam in best.values()) and elapsed <= 600
    acceptance_report(6, "tuned lambda sweep decreases and favors small lambda", ok,
                      f"monotone {monotone}, best lambda by tuning {best}, {elapsed:.0f}s")


# -- 7: anomaly detection -----------------------------------------------------------------------


def test_anomalies_raise_the_detection_probability(acceptance_report):
    start = time.perf_counter()
    output = run_detect(ExperimentConfig(experiment="detect", seeds=list(range(N_SEEDS))))
    shifts = {label: s["median_shift"] for label, s in output.extras["summary.json"].items()}
    elapsed = time.perf_counter() - start
    ok = (shifts["reward:+2:0.5"] >= 0.2 and shifts["policy:0.9"] >= 0.2
          and abs(shifts["none"]) <= 0.05 and elapsed <= 600)
    acceptance_report(7, "reward and policy anomalies raise the anomaly probability", ok,
                      ", ".join(f"{k} shift {v:+.3f}" for k, v in shifts.items())
                      + f", {elapsed:.0f}s")


# -- 8: single-step examples against plain scripts ------------------------------------------------


def _script_linear_step(w, x_prev, x_t, reward, gamma, alpha, lam=0.0, g_prev=0.0, weight=1.0):
    prev = sum(a * b for a, b in zip(x_prev, w))
    cur = sum(a * b for a, b in zip(x_t, w))
    target = reward + gamma * ((1 - lam) * prev + lam * g_prev)
    return [wk + alpha * weight * (target - cur) * xk for wk, xk in zip(w, x_t)]


def _script_quantile_huber(u, tau, kappa):
    h = 0.5 * u * u if abs(u) <= kappa else kappa * (abs(u) - 0.5 * kappa)
    return abs(tau - (1.0 if u < 0 else 0.0)) * h


def _script_quantile_row(row, target_row, r, gamma, alpha, weight, kappa):
    n = len(row)
    out = []
    for i in range(n):
        tau = (2 * i + 1) / (2 * n)
        grad = 0.0
        for j in range(n):
            u = r + gamma * target_row[j] - row[i]
            grad += abs(tau - (1.0 if u < 0 else 0.0)) * max(-kappa, min(kappa, u))
        out.append(row[i] + alpha * weight * grad / n)
    return out


def _script_interval(means, sigma, lo, hi):
    mpmath.mp.dps = 40
    total = sum(mpmath.ncdf((hi - m) / mpmath.mpf(sigma)) - mpmath.ncdf((lo - m) / mpmath.mpf(sigma))
                for m in means)
    return float(total / len(means))


def test_single_steps_match_plain_scripts(acceptance_report):
    rng = np.random.default_rng(8)
    errors = {"reverse TD": 0.0, "TD(lambda)": 0.0, "off-policy": 0.0, "quantile-Huber": 0.0,
              "quantile step": 0.0, "interval": 0.0, "anomaly": 0.0}

    # hand examples first
    model = LinearValueModel(np.eye(2), np.zeros(2))
    reverse_td_step(model, 0.1, Transition(0, 0, 2.0, 1), 1.0)
    errors["reverse TD"] = float(np.max(np.abs(model.weights - [0.0, 0.2])))
    model = LinearValueModel(np.eye(2), np.zeros(2))
    reverse_td_lambda_step(model, 0.1, Transition(0, 0, 1.0, 1), 1.0, 4.0, 0.5)
    errors["TD(lambda)"] = float(np.max(np.abs(model.weights - [0.0, 0.3])))
    errors["quantile-Huber"] = abs(quantile_huber(-1.0, 0.25, 1.0) - 0.375)

    for _ in range(500):
        X = rng.normal(size=(3, 3))
        w = rng.normal(size=3)
        r, gamma, lam, g_prev = rng.normal() * 3, rng.uniform(), rng.uniform(), rng.normal() * 5
        alpha, weight = rng.uniform(1e-3, 1), rng.uniform(0, 3)
        tr = Transition(0, 0, r, 1)
        for name, step, expected in (
            ("reverse TD", lambda m: reverse_td_step(m, alpha, tr, gamma),
             _script_linear_step(w, X[0], X[1], r, gamma, alpha)),
            ("TD(lambda)", lambda m: reverse_td_lambda_step(m, alpha, tr, gamma, g_prev, lam),
             _script_linear_step(w, X[0], X[1], r, gamma, alpha, lam, g_prev)),
            ("off-policy", lambda m: off_policy_reverse_td_step(m, alpha, tr, gamma, 1.0, weight),
             _script_linear_step(w, X[0], X[1], r, gamma, alpha, weight=weight)),
        ):
            model = LinearValueModel(X, w.copy())
            step(model)
            errors[name] = max(errors[name], float(np.max(np.abs(model.weights - expected))))

        u, tau, kappa = rng.normal() * 4, rng.uniform(), rng.uniform(0.05, 5)
        errors["quantile-Huber"] = max(errors["quantile-Huber"],
                                       abs(quantile_huber(u, tau, kappa)
                                           - _script_quantile_huber(u, tau, kappa)))

        n = int(rng.integers(1, 9))
        theta, theta_bar = rng.normal(scale=3, size=(2, 2, n))
        qm = QuantileModel(theta.copy(), kappa=kappa, target=theta_bar.copy())
        quantile_update_step(qm, Transition(0, 0, r, 1), gamma, alpha, weight)
        expected = _script_quantile_row(theta[1].tolist(), theta_bar[0].tolist(), r, gamma, alpha,
                                        weight, kappa)
        errors["quantile step"] = max(errors["quantile step"],
                                      float(np.max(np.abs(qm.quantiles[1] - expected))))

        means = rng.normal(scale=4, size=n)
        sigma = rng.uniform(0.1, 3)
        lo = rng.normal() * 4
        hi = lo + rng.uniform(0, 6)
        errors["interval"] = max(errors["interval"],
                                 abs(interval_probability(GaussianMixture(means, sigma), lo, hi)
                                     - _script_interval(means, sigma, lo, hi)))
        g_bar, delta = rng.normal() * 4, rng.uniform(0, 3)
        got = anomaly_probability(QuantileModel(means[None, :].copy()), 0, g_bar, delta, sigma)
        errors["anomaly"] = max(errors["anomaly"],
                                abs(got - (1 - _script_interval(means, sigma, g_bar - delta,
                                                                g_bar + delta))))
    worst = max(errors.values())
    acceptance_report(8, "single-step updates and probabilities match plain scripts",
                      worst <= 1e-12,
                      ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))


# -- 9: lambda identities ------------------------------------------------------------------------


def test_lambda_identities(acceptance_report):
    mdp, policy = build_microdrone()
    traj = sample_trajectory(mdp, policy, 100_000, np.random.default_rng(9))
    X = np.random.default_rng(0).normal(size=(4, 2))
    plain, zero, one = LinearValueModel(X), LinearValueModel(X), LinearValueModel(X)
    tracker = ReverseReturnTracker()
    zero_ok = one_ok = True
    for t, tr in enumerate(traj.transitions()):
        gamma = mdp.discount[tr.prev_state]
        alpha = 0.5 / (1 + t / 1e3)
        d_plain = reverse_td_step(plain, alpha, tr, gamma)
        d_zero = reverse_td_lambda_step(zero, alpha, tr, gamma, tracker.g_bar, 0.0)
        zero_ok &= d_plain == d_zero and np.array_equal(plain.weights, zero.weights)
        target = lambda_target(one, tr, gamma, tracker.g_bar, 1.0)
        reverse_td_lambda_step(one, alpha, tr, gamma, tracker.g_bar, 1.0)
        tracker_update(tracker, tr.reward, gamma)
        one_ok &= target == tracker.g_bar
    acceptance_report(9, "lambda=0 is Reverse TD bitwise and lambda=1 targets the reverse return",
                      zero_ok and one_ok, f"lambda=0 bitwise {zero_ok}, lambda=1 exact {one_ok}, "
                      f"{len(traj)} steps")
