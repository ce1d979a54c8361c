"""Seeded experiment orchestration and CSV/JSON emission.

Every run draws its randomness from ``SeedSequence(master_seed,
spawn_key=(seed, stream))``, so runs are reproducible individually and
never share a stream. Outputs are written once, after all runs finish.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .anomaly import Phase1Config, parse_spec, run_phase1, run_phase2
from .distributional import QuantileModel
from .errors import IncompleteGrid
from .mdp import FiniteMdp, Policy, build_microdrone, load_mdp, sample_trajectory
from .oracle import density_ratio, distributional_fixed_point, is_ratio, oracle_report, reverse_gvf
from .reverse_td import LearnerConfig, StepSchedule, run_learner, run_on_trajectory

log = logging.getLogger(__name__)

EXPERIMENTS = ("oracle", "learn", "lambda_sweep", "dist_train", "detect")
SWEEP_LAMBDAS = (0.0, 0.3, 0.7, 0.9, 1.0)
SWEEP_ALPHAS = (1e-3, 5e-3, 1e-2, 5e-2)


def fmt(x) -> str:
    """Floats with 17 significant digits; everything else via ``str``."""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def derive_seed(master_seed: int, *key: int) -> int:
    """64-bit seed for the run identified by ``key`` (counter-based split of the master seed)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LearnParams:
    lam: float = 0.0
    schedule: str = "robbins_monro"
    alpha: float = 1e-2
    rm_a: float = 0.5
    rm_b: float = 1e3
    off_policy: bool = False
    target_a1: float | None = None
    behavior_a1: float | None = None
    total_steps: int = 1_000_000
    eval_every: int = 1000
    features: str = "tabular"


@dataclass
class SweepParams:
    lambdas: list[float] = field(default_factory=lambda: list(SWEEP_LAMBDAS))
    alphas: list[float] = field(default_factory=lambda: list(SWEEP_ALPHAS))
    total_steps: int = 100_000
    eval_every: int = 1000


@dataclass
class DistParams:
    steps: int = 200_000
    n_quantiles: int = 20
    kappa: float = 1.0
    alpha: float = 5e-3
    sync_period: int = 100
    eval_every: int = 1000
    target_a1: float = 0.1
    behavior_a1: float = 0.5


@dataclass
class DetectParams:
    specs: list[str] = field(default_factory=lambda: ["none", "reward:+2:0.5", "policy:0.9"])
    steps: int = 20_000
    onset: int | None = None
    delta: float = 1.0
    sigma: float = 1.0
    model_path: str | None = None


@dataclass
class ExperimentConfig:
    """Top-level experiment description; see the README for the JSON schema."""

    experiment: str = "oracle"
    preset: str | None = "microdrone"
    mdp_path: str | None = None
    seeds: list[int] = field(default_factory=lambda: list(range(30)))
    master_seed: int = 0
    ideal_rewards: bool = False
    mve_normalized: bool = False
    dist: bool = False
    oracle_method: str = "matrix_solve"
    learn: LearnParams = field(default_factory=LearnParams)
    sweep: SweepParams = field(default_factory=SweepParams)
    phase1: DistParams = field(default_factory=DistParams)
    detect: DetectParams = field(default_factory=DetectParams)

    def __post_init__(self):
        self.experiment = self.experiment.replace("-", "_")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.mdp_path is not None and not Path(self.mdp_path).exists():
            raise FileNotFoundError(self.mdp_path)
        if self.detect.model_path is not None and not Path(self.detect.model_path).exists():
            raise FileNotFoundError(self.detect.model_path)
        if self.mdp_path is None and self.preset != "microdrone":
            raise ValueError(f"unknown preset {self.preset!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        if "config" in doc and "version" in doc:  # a manifest
            doc = doc["config"]
        nested = {"learn": LearnParams, "sweep": SweepParams, "phase1": DistParams,
                  "detect": DetectParams}
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in names:
                raise ValueError(f"unknown config field {key!r}")
            if key in nested:
                value = _build(nested[key], value)
            kwargs[key] = value
        return cls(**kwargs)


def _build(kind, doc: dict):
    names = {f.name for f in fields(kind)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {kind.__name__} fields: {sorted(unknown)}")
    return kind(**doc)


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def resolve_mdp(config: ExperimentConfig) -> tuple[FiniteMdp, Policy]:
    if config.mdp_path is not None:
        return load_mdp(config.mdp_path)
    return build_microdrone(ideal_rewards=config.ideal_rewards)


def _policy(mdp: FiniteMdp, default: Policy, a1_prob: float | None) -> Policy:
    if a1_prob is None:
        return default
    return Policy.action_bias(mdp.n_states, mdp.n_actions, 0, a1_prob)


def _features(spec: str, n_states: int) -> np.ndarray:
    # "tabular" or "random:<K>:<seed>"
    if spec == "tabular":
        return np.eye(n_states)
    kind, k, seed = spec.split(":")
    if kind != "random":
        raise ValueError(f"unknown feature spec {spec!r}")
    return np.random.default_rng(int(seed)).normal(size=(n_states, int(k)))


# ---------------------------------------------------------------------------
# curve bundles


@dataclass
class CurveBundle:
    """Per-seed curves grouped by parameter tuple, with aggregate statistics over seeds."""

    param_names: tuple[str, ...]
    metric: str
    groups: dict = field(default_factory=dict)  # params -> (seeds, steps, values[seed, step])

    def add(self, params: tuple, seeds: Sequence[int], steps: np.ndarray, values: np.ndarray):
        self.groups[params] = (list(seeds), np.asarray(steps), np.asarray(values))

    def aggregate(self, params: tuple) -> dict[str, np.ndarray]:
        seeds, steps, values = self.groups[params]
        n = values.shape[0]
        stderr = (values.std(axis=0, ddof=1) / np.sqrt(n)) if n > 1 else np.full(len(steps), np.nan)
        return {"step": steps, "median": np.median(values, axis=0), "mean": values.mean(axis=0),
                "standard_error": stderr}

    def mean_curves(self) -> dict[tuple, tuple[np.ndarray, np.ndarray]]:
        return {p: (g[1], g[2].mean(axis=0)) for p, g in self.groups.items()}

    def write_aggregate(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([*self.param_names, "step", "median", "mean", "standard_error"])
            for params in self.groups:
                agg = self.aggregate(params)
                for k in range(len(agg["step"])):
                    writer.writerow([*map(fmt, params), agg["step"][k], fmt(agg["median"][k]),
                                     fmt(agg["mean"][k]), fmt(agg["standard_error"][k])])


def auc(steps: np.ndarray, values: np.ndarray) -> float:
    return float(np.trapezoid(values, steps))


def tune_step_size(curves: dict[tuple[float, float], tuple[np.ndarray, np.ndarray]],
                   criterion: str = "final_mve") -> dict[float, float]:
    """Best step size per lambda from ``{(lam, alpha): (steps, mean_mve)}``.

    ``criterion`` is ``"final_mve"`` (last point) or ``"auc"`` (trapezoidal
    area under the curve). Ties go to the smaller step size.
    """
    if criterion not in ("final_mve", "auc"):
        raise ValueError(f"unknown criterion {criterion!r}")
    alphas = sorted({a for _, a in curves})
    lambdas = sorted({lam for lam, _ in curves})
    missing = [(lam, a) for lam in lambdas for a in alphas if (lam, a) not in curves]
    if missing:
        raise IncompleteGrid(f"missing (lambda, alpha) cells: {missing}")
    best = {}
    for lam in lambdas:
        scores = []
        for a in alphas:
            steps, mve = curves[(lam, a)]
            scores.append(float(mve[-1]) if criterion == "final_mve" else auc(steps, mve))
        best[lam] = alphas[int(np.argmin(scores))]  # argmin keeps the first (smallest) on ties
    return best


# ---------------------------------------------------------------------------
# experiments


@dataclass
class RunOutput:
    """What an experiment produced; written to disk by :func:`write_outputs`."""

    results_header: list[str]
    results_rows: Iterable[list]
    bundle: CurveBundle | None
    runs: list[dict]
    extras: dict[str, object] = field(default_factory=dict)  # filename -> json doc / writer


def run_oracle(config: ExperimentConfig) -> RunOutput:
    mdp, policy = resolve_mdp(config)
    report = oracle_report(mdp, policy, config.oracle_method,
                           seed=derive_seed(config.master_seed, config.seeds[0]))
    rows = [[s, mdp.state_names[s], fmt(report.forward_values[s]), fmt(report.reverse_values[s]),
             fmt(report.d_pi[s])] for s in range(mdp.n_states)]
    # a single deterministic evaluation, so the aggregate is the per-state table itself
    extras: dict[str, object] = {"report.json": report.to_dict(),
                                 "aggregate.csv": (["state", "forward_value", "reverse_value",
                                                    "d_pi"], [r[:1] + r[2:] for r in rows])}
    if config.dist:
        etas = distributional_fixed_point(mdp, policy)
        dist_rows = [[s, fmt(v), fmt(m)] for s, eta in enumerate(etas)
                     for v, m in zip(eta.values, eta.masses)]
        extras["distributions.csv"] = (["state", "value", "mass"], dist_rows)
    return RunOutput(["state", "name", "forward_value", "reverse_value", "d_pi"], rows, None,
                     [], extras)


def _learner_setup(config: ExperimentConfig):
    mdp, default = resolve_mdp(config)
    p = config.learn
    target = _policy(mdp, default, p.target_a1)
    behavior = _policy(mdp, Policy.uniform(mdp.n_states, mdp.n_actions), p.behavior_a1)
    if p.schedule == "constant":
        schedule = StepSchedule.constant(p.alpha)
    else:
        schedule = StepSchedule.robbins_monro(p.rm_a, p.rm_b)
    extra = {}
    if p.off_policy:
        extra = {"mode": "off_policy", "tau": density_ratio(mdp, target, behavior),
                 "rho": is_ratio(mdp, target, behavior)}
    return mdp, target, behavior, schedule, extra


def run_learn(config: ExperimentConfig) -> RunOutput:
    mdp, target, behavior, schedule, extra = _learner_setup(config)
    p = config.learn
    X = _features(p.features, mdp.n_states)
    v_true = reverse_gvf(mdp, target)
    bundle = CurveBundle(("lambda", "alpha"), "mve")
    rows, runs, curves = [], [], []
    alpha_label = p.alpha if p.schedule == "constant" else "robbins_monro"
    for run_id, seed in enumerate(config.seeds):
        rng_seed = derive_seed(config.master_seed, seed)
        cfg = LearnerConfig(lam=p.lam, schedule=schedule, total_steps=p.total_steps,
                            seed=rng_seed, eval_every=p.eval_every,
                            mve_normalized=config.mve_normalized, **extra)
        curve = run_learner(mdp, target, cfg, behavior=behavior, features=X, v_true=v_true)
        curves.append(curve.mve)
        runs.append({"run_id": run_id, "seed": seed, "rng_seed": rng_seed,
                     "final_weights": curve.weights.tolist()})
        rows.extend([run_id, seed, fmt(p.lam), fmt(alpha_label), int(st), fmt(m)]
                    for st, m in zip(curve.steps, curve.mve))
    bundle.add((p.lam, alpha_label), config.seeds, curve.steps, np.array(curves))
    return RunOutput(["run_id", "seed", "lambda", "alpha", "step", "mve"], rows, bundle, runs)


def run_lambda_sweep(config: ExperimentConfig) -> RunOutput:
    """Constant-step Reverse TD(lambda) over the (lambda, alpha) grid, tabular features.

    Each seed samples one trajectory that every grid cell reuses.
    """
    mdp, target = resolve_mdp(config)
    target = _policy(mdp, target, config.learn.target_a1)
    p = config.sweep
    v_true = reverse_gvf(mdp, target)
    X = np.eye(mdp.n_states)
    per_cell: dict[tuple, list] = {(lam, a): [] for lam in p.lambdas for a in p.alphas}
    runs, steps = [], None
    for seed in config.seeds:
        rng_seed = derive_seed(config.master_seed, seed)
        trajectory = sample_trajectory(mdp, target, p.total_steps, np.random.default_rng(rng_seed))
        runs.append({"seed": seed, "rng_seed": rng_seed})
        for lam, a in per_cell:
            cfg = LearnerConfig(lam=lam, schedule=StepSchedule.constant(a),
                                total_steps=p.total_steps, seed=rng_seed, eval_every=p.eval_every,
                                mve_normalized=config.mve_normalized)
            curve = run_on_trajectory(X, mdp.discount, trajectory, cfg, v_true)
            per_cell[(lam, a)].append(curve.mve)
            steps = curve.steps
    bundle = CurveBundle(("lambda", "alpha"), "mve")
    rows = []
    run_id = 0
    for (lam, a), curves in per_cell.items():
        bundle.add((lam, a), config.seeds, steps, np.array(curves))
        for seed, mve in zip(config.seeds, curves):
            rows.extend([run_id, seed, fmt(lam), fmt(a), int(st), fmt(m)]
                        for st, m in zip(steps, mve))
            run_id += 1
    means = bundle.mean_curves()
    tuned = {c: {str(float(lam)): a for lam, a in tune_step_size(means, c).items()}
             for c in ("auc", "final_mve")}
    return RunOutput(["run_id", "seed", "lambda", "alpha", "step", "mve"], rows, bundle, runs,
                     {"tuned.json": tuned})


def _phase1_setup(config: ExperimentConfig):
    mdp, _ = resolve_mdp(config)
    p = config.phase1
    pi = Policy.action_bias(mdp.n_states, mdp.n_actions, 0, p.target_a1)
    mu = Policy.action_bias(mdp.n_states, mdp.n_actions, 0, p.behavior_a1)
    p1 = Phase1Config(p.n_quantiles, p.kappa, p.alpha, p.sync_period, p.eval_every)
    return mdp, pi, mu, p1


def run_dist_train(config: ExperimentConfig) -> RunOutput:
    mdp, pi, mu, p1 = _phase1_setup(config)
    bundle = CurveBundle(("n_quantiles",), "mve")
    rows, runs, curves, models = [], [], [], {}
    for run_id, seed in enumerate(config.seeds):
        rng_seed = derive_seed(config.master_seed, seed, 1)
        model, (steps, mve) = run_phase1(mdp, mu, pi, config.phase1.steps, p1, rng_seed)
        curves.append(mve)
        models[f"models/seed-{seed}.csv"] = model
        runs.append({"run_id": run_id, "seed": seed, "rng_seed": rng_seed})
        rows.extend([run_id, seed, int(st), fmt(m)] for st, m in zip(steps, mve))
    bundle.add((p1.n_quantiles,), config.seeds, steps, np.array(curves))
    return RunOutput(["run_id", "seed", "step", "mve"], rows, bundle, runs, models)


def run_detect(config: ExperimentConfig) -> RunOutput:
    """Phase 1 per seed (unless a model file is given), then phase 2 for every spec.

    All specs of one seed share the phase-2 random stream, so their
    pre-onset segments are identical.
    """
    mdp, pi, mu, p1 = _phase1_setup(config)
    d = config.detect
    onset = d.steps // 2 if d.onset is None else d.onset
    specs = [parse_spec(s, mdp.n_states, mdp.n_actions, onset) for s in d.specs]
    fixed_model = QuantileModel.load_csv(d.model_path) if d.model_path else None
    per_spec: dict[str, list] = {s.label: [] for s in specs}
    rows, runs = [], []
    shifts: dict[str, list] = {s.label: [] for s in specs}
    for seed in config.seeds:
        p1_seed = derive_seed(config.master_seed, seed, 1)
        p2_seed = derive_seed(config.master_seed, seed, 2)
        if fixed_model is None:
            model, _ = run_phase1(mdp, mu, pi, config.phase1.steps, p1, p1_seed)
        else:
            model = fixed_model
        runs.append({"seed": seed, "phase1_rng_seed": p1_seed, "phase2_rng_seed": p2_seed})
        for spec in specs:
            trace = run_phase2(mdp, pi, model.copy(), spec, d.steps, d.delta, d.sigma, p2_seed)
            per_spec[spec.label].append(trace.anomaly_prob)
            pre, post = trace.pre_post_means(onset)
            shifts[spec.label].append((pre, post))
            rows.extend([seed, spec.label, int(st), int(s), fmt(g), fmt(pr)] for st, s, g, pr in
                        zip(trace.steps, trace.states, trace.g_bar, trace.anomaly_prob))
    bundle = CurveBundle(("spec",), "anomaly_prob")
    for label, probs in per_spec.items():
        bundle.add((label,), config.seeds, np.arange(1, d.steps + 1), np.array(probs))
    summary = {label: {"onset": onset,
                       "median_pre": float(np.median([v[0] for v in vals])),
                       "median_post": float(np.median([v[1] for v in vals])),
                       "median_shift": float(np.median([v[1] - v[0] for v in vals]))}
               for label, vals in shifts.items()}
    return RunOutput(["seed", "spec", "step", "state", "g_bar", "anomaly_prob"], rows, bundle,
                     runs, {"summary.json": summary})


RUNNERS = {"oracle": run_oracle, "learn": run_learn, "lambda_sweep": run_lambda_sweep,
           "dist_train": run_dist_train, "detect": run_detect}


def _write_csv(path: Path, header: list[str], rows: Iterable[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_outputs(config: ExperimentConfig, output: RunOutput, outdir: str | Path) -> list[Path]:
    """Write results, aggregate, manifest and extras into ``outdir`` atomically-ish.

    Files are first written to a scratch directory next to ``outdir`` and
    moved into place only when every file succeeded.
    """
    outdir = Path(outdir)
    outdir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".reverse-rl-", dir=outdir.parent))
    try:
        _write_csv(scratch / "results.csv", output.results_header, output.results_rows)
        if output.bundle is not None:
            output.bundle.write_aggregate(scratch / "aggregate.csv")
        for name, payload in output.extras.items():
            target = scratch / name
            target.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(payload, QuantileModel):
                payload.save_csv(target)
            elif isinstance(payload, tuple):
                _write_csv(target, *payload)
            else:
                target.write_text(json.dumps(payload, indent=2))
        manifest = {"version": __version__, "experiment": config.experiment,
                    "config": config.to_dict(), "runs": output.runs}
        (scratch / "manifest.json").write_text(json.dumps(manifest, indent=2))
        outdir.mkdir(parents=True, exist_ok=True)
        written = []
        for item in sorted(scratch.rglob("*")):
            if item.is_file():
                dest = outdir / item.relative_to(scratch)
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(item), dest)
                written.append(dest)
        return written
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def run(config: ExperimentConfig, outdir: str | Path | None = None) -> RunOutput:
    """Execute the configured experiment and, when ``outdir`` is given, write its files."""
    log.info("running %s over %d seed(s)", config.experiment, len(config.seeds))
    output = RUNNERS[config.experiment](config)
    if outdir is not None:
        output.results_rows = list(output.results_rows)
        write_outputs(config, output, outdir)
    return output
