"""Canned experiments shared by the command line and the acceptance suite.

Each runner takes a resolved :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding plot-ready tables and named checks. Runners
never touch the file system; :mod:`kramerslab.cli` does the writing.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import cg as _cg
from . import estimate as _est
from . import galerkin as _gal
from . import integrate as _ig
from . import transform as _tr
from .errors import ConfigurationError
from .model import (
    FAMILIES,
    OBSERVABLES,
    ProblemSpec,
    default_problem,
    gibbs_average,
    noise_drift_identity_check,
    observable_values,
    MatrixField,
)

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_COMMON = {"experiment": None, "seed": 0, "problem": None}

DEFAULTS: dict[str, dict] = {
    "strong-rate": {"problem": "underdamped", "lambdas": [4.0, 8.0, 16.0, 32.0, 64.0], "n": 20000, "t": 1.0,
                    "dt": 2.0 ** -13, "n_snap": 32, "n_boot": 1000},
    "stationarity": {"problem": "all", "lambdas": [1.0], "n": 20000, "t": 1.0, "dt": 2.0 ** -8},
    "drift-ablation": {"problem": "overdamped", "n": 5000, "t": 200.0, "dt": 2.0 ** -10, "burn_in": 1.0,
                       "sample_every": 0.25},
    "mass-invariance": {"problem": "mass", "lambdas": [64.0], "n": 20000, "t": 1.0, "dt": 0.0,
                        "mass_a": [2.0, 1.0, -math.pi / 2], "mass_b": [3.0, 1.0, 0.0]},
    "cg-gap": {"eps": 0.3, "eps_sweep": [0.025, 0.05, 0.1, 0.2, 0.4], "z_grid": [-2.0, -1.5, -1.0, -0.5, 0.0,
                                                                                 0.5, 1.0, 1.5, 2.0],
               "beta": 1.0},
    "hypoco-sweep": {"problem": "both", "lambdas": list(_gal.DEFAULT_LAMBDAS), "K": 32, "n_hermite": 40,
                     "refine": 8},
    "transform-consistency": {"problem": "mass", "lambdas": [4.0], "n": 2000, "t": 1.0, "dt": 2.0 ** -6,
                              "levels": 4, "n_samples": 1000},
}
EXPERIMENTS = tuple(DEFAULTS)


@dataclass
class ExperimentConfig:
    """Resolved experiment parameters; ``values`` holds every key with its default filled in."""

    experiment: str
    values: dict

    @classmethod
    def build(cls, experiment: str, overrides: dict | None = None) -> "ExperimentConfig":
        if experiment not in DEFAULTS:
            raise ConfigurationError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        vals = copy.deepcopy({**_COMMON, **DEFAULTS[experiment]})
        vals["experiment"] = experiment
        for k, v in (overrides or {}).items():
            if k not in vals:
                raise ConfigurationError(f"unknown key {k!r} for experiment {experiment}")
            if k == "experiment" and v != experiment:
                raise ConfigurationError(f"config is for {v!r}, not {experiment!r}")
            vals[k] = v
        cfg = cls(experiment, vals)
        cfg._validate()
        return cfg

    def _validate(self):
        v = self.values
        if not isinstance(v["seed"], int) or not 0 <= v["seed"] < 2 ** 63:
            raise ConfigurationError("seed must be a non-negative integer")
        for key in ("n", "n_snap", "levels", "K", "n_hermite", "n_samples", "n_boot"):
            if key in v and (not isinstance(v[key], int) or v[key] < 1):
                raise ConfigurationError(f"{key} must be a positive integer")
        for key in ("t", "burn_in", "sample_every"):
            if key in v and not float(v[key]) > 0:
                raise ConfigurationError(f"{key} must be positive")
        if "lambdas" in v:
            lam = [float(x) for x in v["lambdas"]]
            if not lam or any(x <= 0 for x in lam):
                raise ConfigurationError("lambdas must be positive")
            v["lambdas"] = lam

    def __getitem__(self, key):
        return self.values[key]

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def problem(self, family: str | None = None) -> ProblemSpec:
        p = self.values.get("problem")
        if isinstance(p, dict):
            return ProblemSpec.from_dict(p)
        name = family or p
        if name not in FAMILIES:
            raise ConfigurationError(f"problem must be a family name or a table, got {p!r}")
        return default_problem(name)


@dataclass
class Check:
    """One acceptance assertion: ``passed`` is computed, never overridden."""

    name: str
    value: float
    target: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.6g} (target {self.target})"


@dataclass
class ExperimentResult:
    experiment: str
    header: list
    rows: list
    checks: list = field(default_factory=list)
    rate_header: list | None = None
    rate_rows: list | None = None
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


RATE_HEADER = ["quantity", "slope", "intercept", "residual_rms", "ci_halfwidth", "n_points"]


def _rate_row(name, fit: _est.RateFit):
    return [name, fit.slope, fit.intercept, fit.residual_rms, fit.confidence_halfwidth, len(fit.lambdas)]


# ---------------------------------------------------------------------------
# strong rate (criteria 1-3)
# ---------------------------------------------------------------------------


def run_strong_rate(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    prob = cfg.problem()
    lam = cfg["lambdas"]
    seed = cfg["seed"]
    init = _ig.sample_gibbs(prob, cfg["n"], seed).state
    runs = _ig.simulate_coupled(prob, lam, cfg["n"], cfg["t"], cfg["dt"], seed=seed, n_snap=cfg["n_snap"],
                                observables=("cos",), initial=init, threads=threads)
    rows = []
    sup2, sup1, w1, tav = [], [], [], []
    for r in runs:
        e2 = _est.strong_error_sup(r, 2.0, n_boot=cfg["n_boot"])
        e1 = _est.strong_error_sup(r, 1.0, n_boot=cfg["n_boot"])
        w = _est.marginal_distance(r, 1.0)
        ta = _est.traj_average_error(r, "cos", 1.0, 1.0, n_boot=cfg["n_boot"])
        sup2.append(e2), sup1.append(e1), w1.append(w), tav.append(ta)
        rows += _est.tidy_rows(r.lam, {"refine": r.refine, "n_diverged": r.n_diverged, "strong_sup_alpha2": e2,
                                       "strong_sup_alpha1": e1, "w1_final": w, "traj_average_cos": ta})

    def fit(vals):
        reps = None
        if all(v.replicates is not None for v in vals):
            reps = np.column_stack([v.replicates for v in vals])
        return _est.fit_rate(lam, [v.value for v in vals], reps)

    f2, f1, fta = fit(sup2), fit(sup1), fit(tav)
    fw = _est.fit_rate(lam, w1)
    rates = [_rate_row("strong_sup_alpha2", f2), _rate_row("strong_sup_alpha1", f1),
             _rate_row("w1_final", fw), _rate_row("traj_average_cos", fta)]
    checks = [
        Check("strong-rate slope of sup_t E|X^lam - X|^2", f2.slope, "-1.0 +/- 0.25", abs(f2.slope + 1.0) <= 0.25),
        Check("W1 marginal slope", fw.slope, "<= -0.4", fw.slope <= -0.4),
        Check("trajectory-average slope (cos, r=1)", fta.slope, "-0.5 +/- 0.2", abs(fta.slope + 0.5) <= 0.2),
    ]
    return ExperimentResult(cfg.experiment, list(_est.TIDY_HEADER), rows, checks, RATE_HEADER, rates,
                            {"runs": runs, "fits": {"sup2": f2, "sup1": f1, "w1": fw, "traj": fta}})


# ---------------------------------------------------------------------------
# stationarity (criterion 5)
# ---------------------------------------------------------------------------


def run_stationarity(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fams = FAMILIES if cfg["problem"] == "all" else (None,)
    rows, checks = [], []
    lam = cfg["lambdas"][0]
    for fam in fams:
        prob = cfg.problem(fam)
        st = _ig.sample_gibbs(prob, cfg["n"], cfg["seed"]).state
        n_steps = int(round(cfg["t"] / cfg["dt"]))
        res = _ig.evolve(prob, st, cfg["dt"], n_steps, lam=lam, seed=cfg["seed"] + 1, threads=threads)
        for name in OBSERVABLES:
            vals = observable_values(name, res.state.positions, prob.domain)
            exact = gibbs_average(prob.potential, prob.beta, name)
            se = float(vals.std(ddof=1) / math.sqrt(vals.size))
            z = (float(vals.mean()) - exact) / se
            rows.append([prob.family, name, float(vals.mean()), se, exact, z])
            checks.append(Check(f"stationarity {prob.family}/{name} |z|", abs(z), "<= 3", abs(z) <= 3.0))
    return ExperimentResult(cfg.experiment, ["family", "observable", "estimate", "std_error", "exact", "z"],
                            rows, checks)


# ---------------------------------------------------------------------------
# noise-induced drift ablation (criterion 4)
# ---------------------------------------------------------------------------


def ergodic_average(prob: ProblemSpec, name: str, n: int, T: float, dt: float, burn_in: float,
                    sample_every: float, seed: int, use_div: bool = True, threads: int = 1):
    """Per-trajectory time averages of an observable and their across-trajectory mean and error.

    Trajectories are independent, so the standard error of the mean of the
    per-trajectory averages is honest despite time correlation.
    """
    st = _ig.sample_gibbs(prob, n, seed).state
    seg = int(round(sample_every / dt))
    n_seg = int(round(T / sample_every))
    n_burn = int(round(burn_in / sample_every))
    acc = np.zeros(st.positions.shape[0])
    count = 0
    for k in range(n_seg):
        st = _ig.evolve(prob, st, dt, seg, seed=seed, stream=10_000 + k, use_div=use_div, threads=threads).state
        if k + 1 > n_burn:
            acc += observable_values(name, st.positions, prob.domain)
            count += 1
    avg = acc / count
    return float(avg.mean()), float(avg.std(ddof=1) / math.sqrt(avg.size))


def run_drift_ablation(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    prob = cfg.problem()
    if prob.family != "overdamped":
        fld, power = prob.limit_field
        if power != 1:
            raise ConfigurationError("drift ablation needs a problem whose limit field is D itself")
        prob = prob.with_family("overdamped", {"D": fld})
    exact = gibbs_average(prob.potential, prob.beta, "cos")
    rows, z = [], {}
    for label, use_div in (("with_div", True), ("without_div", False)):
        m, se = ergodic_average(prob, "cos", cfg["n"], cfg["t"], cfg["dt"], cfg["burn_in"], cfg["sample_every"],
                                cfg["seed"], use_div, threads)
        z[label] = (m - exact) / se
        rows.append([label, m, se, exact, z[label]])
    checks = [Check("drift ablation without div term |z|", abs(z["without_div"]), "> 5", abs(z["without_div"]) > 5),
              Check("drift ablation with div term |z|", abs(z["with_div"]), "<= 3", abs(z["with_div"]) <= 3)]
    return ExperimentResult(cfg.experiment, ["variant", "estimate", "std_error", "exact", "z"], rows, checks)


# ---------------------------------------------------------------------------
# mass independence (criterion 9)
# ---------------------------------------------------------------------------


def run_mass_invariance(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    prob = cfg.problem()
    fields = [MatrixField.diagonal(a, b, ph, 1, prob.domain.length) for a, b, ph in (cfg["mass_a"], cfg["mass_b"])]
    rows, checks = [], []
    for lam in cfg["lambdas"]:
        r = _tr.mass_independence(prob, fields[0], fields[1], lam=lam, N=cfg["n"], T=cfg["t"],
                                  dt=cfg["dt"] or None, seed=cfg["seed"], threads=threads)
        rows.append([lam, r.w1, r.floor, r.w1 / r.floor])
        checks.append(Check(f"mass independence W1/floor at lambda={lam:g}", r.w1 / r.floor, "<= 2",
                            r.w1 <= 2 * r.floor))
    return ExperimentResult(cfg.experiment, ["lambda", "w1", "floor", "ratio"], rows, checks)


# ---------------------------------------------------------------------------
# coarse-graining gap (criterion 10)
# ---------------------------------------------------------------------------


def run_cg_gap(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    z = cfg["z_grid"]
    beta = cfg["beta"]
    ref = _cg.reference_potential(beta)
    tables = [_cg.commutativity_gap(_cg.CollectiveVariable.linear(1.0, 0.0), ref, beta, z),
              _cg.commutativity_gap(_cg.CollectiveVariable.sine(cfg["eps"]), ref, beta, z),
              _cg.commutativity_gap(_cg.CollectiveVariable.product(cfg["eps"]), ref, beta, z)]
    rows = [r for t in tables for r in t.rows()]
    sweeps = [_cg.gap_sweep(f, cfg["eps_sweep"], ref, beta, z) for f in ("sine", "product")]
    rates = []
    for s in sweeps:
        fit = _est.fit_rate(s.eps, s.max_gap, min_points=4, min_span=10.0)
        rates.append(_rate_row(f"gap_vs_eps_{s.family}", fit))
    tol = _cg.QUAD_TOL
    checks = [
        Check("cg gap, linear xi", tables[0].max_gap, "<= 1e-10", tables[0].max_gap <= 1e-10),
        Check(f"cg gap, q1 + eps sin q2 at eps={cfg['eps']:g}", tables[1].max_gap, f"> {10 * tol:.0e}",
              tables[1].max_gap > 10 * tol),
        Check("cg gap-vs-eps slope, q1 + eps sin q2", sweeps[0].slope, "2 +/- 0.2", abs(sweeps[0].slope - 2) <= 0.2),
    ]
    return ExperimentResult(cfg.experiment, list(_cg.GapTable.HEADER), rows, checks, RATE_HEADER, rates,
                            {"sweeps": sweeps, "tables": tables})


# ---------------------------------------------------------------------------
# hypocoercivity sweep (criterion 6)
# ---------------------------------------------------------------------------


def run_hypoco_sweep(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    fams = ("underdamped", "cg") if cfg["problem"] == "both" else (None,)
    rows, rates, checks, tables = [], [], [], {}
    for fam in fams:
        prob = cfg.problem(fam)
        tab = _gal.hypocoercivity_sweep(prob, cfg["lambdas"], K=cfg["K"], n_hermite=cfg["n_hermite"],
                                        refine=cfg["refine"])
        tables[tab.kind] = tab
        fit_n = _est.fit_rate(tab.lambdas, tab.norm)
        fit_g = _est.fit_rate(tab.lambdas, tab.grad_p_norm)
        rows += [[tab.kind] + r for r in tab.rows()]
        rates += [_rate_row(f"{tab.kind}_norm", fit_n), _rate_row(f"{tab.kind}_grad_p_norm", fit_g)]
        checks += [
            Check(f"{tab.kind} generator: max/min of ||Phi||", tab.ratio, "<= 1.5", tab.ratio <= 1.5),
            Check(f"{tab.kind} generator: slope of log ||d_p Phi||", fit_g.slope, "-0.5 +/- 0.1",
                  abs(fit_g.slope + 0.5) <= 0.1),
            Check(f"{tab.kind} generator: rows stable under basis refinement", float(np.sum(tab.converged)),
                  f"== {tab.lambdas.size}", bool(np.all(tab.converged))),
        ]
    return ExperimentResult(cfg.experiment, ["generator"] + list(_gal.SWEEP_HEADER), rows, checks, RATE_HEADER,
                            rates, {"tables": tables})


# ---------------------------------------------------------------------------
# canonical transform (criterion 8)
# ---------------------------------------------------------------------------


def run_transform_consistency(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    prob = cfg.problem()
    gen = np.random.default_rng(cfg["seed"])
    ns = cfg["n_samples"]
    fact, xm = _tr.factorize_1d(prob.fields["M"])
    q1, p1 = gen.uniform(-2 * math.pi, 2 * math.pi, ns), gen.standard_normal(ns)
    fact2, xm2 = _tr.hessian_family()
    q2, p2 = gen.standard_normal((ns, 2)) * 2, gen.standard_normal((ns, 2))
    symp = max(_tr.check_symplectic(fact, xm, q1, p1), _tr.check_symplectic(fact2, xm2, q2, p2))
    sym = _tr.check_symmetry(fact2, xm2, q2, p2)
    res = _tr.transform_consistency(prob, cfg["n"], cfg["t"], cfg["dt"], cfg["levels"], cfg["lambdas"][0],
                                    cfg["seed"])
    rows = [[dt, d, (res.shrink[i] if i < res.shrink.size else "")] for i, (dt, d) in
            enumerate(zip(res.dts, res.sup_diff))]
    shrink = float(np.exp(np.mean(np.log(res.shrink))))
    checks = [
        Check("symplecticity residual", symp, "<= 1e-8", symp <= 1e-8),
        Check("symmetry residual of A^-1 grad_q v", sym, "<= 1e-8", sym <= 1e-8),
        Check("transform consistency shrink per dt halving", shrink, "sqrt(2) +/- 25%",
              abs(shrink / SQRT2 - 1) <= 0.25),
    ]
    return ExperimentResult(cfg.experiment, ["dt", "mean_sup_diff", "shrink"], rows, checks,
                            extra={"consistency": res})


# ---------------------------------------------------------------------------
# checks without a command-line experiment (criteria 7 and 11)
# ---------------------------------------------------------------------------


def identity_residuals(n_grid: int = 16) -> dict:
    """Max ``Π₀`` identity residual on an ``n_grid``-point grid for each built-in ``D``."""
    out = {}
    for fam in ("underdamped", "cg"):
        prob = default_problem(fam)
        fld, power = prob.limit_field
        if power != 1:
            fld = prob.fields["A"]
        q = np.linspace(0, prob.domain.length, n_grid, endpoint=False)[:, None]
        out[fam] = max(noise_drift_identity_check(fld, prob.gibbs, qi) for qi in q)
    return out


def tightness_moment(lam: float = 64.0, N: int = 2000, gamma: float = 4.0, dt: float = 2.0 ** -16,
                     save_every: int = 256, n_lags: int = 16, seed: int = 0, threads: int = 1):
    """Increment moments of the rescaled kinetic positions from a stationary start."""
    prob = default_problem("underdamped")
    st = _ig.sample_gibbs(prob, N, seed).state
    res = _ig.evolve(prob, st, dt, save_every * n_lags, lam=lam, seed=seed, save_every=save_every, lifted=True,
                     threads=threads)
    lags = tuple(2 ** k for k in range(int(math.log2(n_lags)) + 1))
    return _est.increment_moment(res.saves[:, :, 0], save_every * dt, gamma, lags)


RUNNERS: dict[str, Callable[[ExperimentConfig, int], ExperimentResult]] = {
    "strong-rate": run_strong_rate,
    "stationarity": run_stationarity,
    "drift-ablation": run_drift_ablation,
    "mass-invariance": run_mass_invariance,
    "cg-gap": run_cg_gap,
    "hypoco-sweep": run_hypoco_sweep,
    "transform-consistency": run_transform_consistency,
}


def run(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg, threads)
