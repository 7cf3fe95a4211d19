"""Estimators that turn paired simulations into rates.

All functions are pure over in-memory arrays. Bootstrap intervals resample
trajectories with a generator derived from a fixed sub-seed, so they are
reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .errors import AlignmentError, ConfigurationError, ValidationError
from .model import OBSERVABLE_LIPSCHITZ, OBSERVABLES
from .rng import bootstrap_rng

N_BOOT = 1000
BOOT_SEED = 0x0B007
CI_LEVEL = 0.95


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorEstimate:
    """Point estimate with a bootstrap percentile interval."""

    value: float
    ci_low: float
    ci_high: float
    n: int
    replicates: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of ``log error = intercept + slope * log λ``.

    Attributes
    ----------
    confidence_halfwidth : float
        Half the width of the 95% interval for the slope. From bootstrap
        replicates when they are supplied, otherwise from the OLS standard
        error with a Student-t quantile.
    """

    lambdas: list
    errors: list
    slope: float
    intercept: float
    residual_rms: float
    confidence_halfwidth: float

    def predict(self, lam):
        return np.exp(self.intercept) * np.asarray(lam, dtype=float) ** self.slope


@dataclass(frozen=True)
class IncrementMoment:
    """``E|X_{s+τ} − X_s|^γ`` against the lag ``τ`` and its log-log slope."""

    lags: np.ndarray
    moments: np.ndarray
    slope: float
    intercept: float
    gamma: float


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _paired(run_or_pair, period=None):
    """``(fine, coarse, period)`` from a coupled run or an explicit pair."""
    if hasattr(run_or_pair, "fine") and hasattr(run_or_pair, "coarse"):
        a, b = run_or_pair.fine, run_or_pair.coarse
        per = run_or_pair.period if period is None else period
    else:
        a, b = run_or_pair
        per = 0.0 if period is None else period
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise AlignmentError(f"paired arrays differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValidationError("paired arrays must have shape (N, n_times[, d])")
    return a, b, float(per)


def _wrap_diff(d, period):
    if period > 0:
        return d - period * np.round(d / period)
    return d


def _boot_means(e, n_boot, seed, batch=50):
    """Means of ``e`` (over axis 0) on ``n_boot`` trajectory resamples."""
    n = e.shape[0]
    gen = bootstrap_rng(seed, tag=1)
    out = np.empty((n_boot,) + e.shape[1:])
    for lo in range(0, n_boot, batch):
        m = min(batch, n_boot - lo)
        idx = gen.integers(0, n, size=(m, n))
        w = np.stack([np.bincount(row, minlength=n) for row in idx]) / n
        out[lo:lo + m] = w @ e
    return out


def _interval(values, level=CI_LEVEL):
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _check_alpha(alpha, hi=2.0):
    if not (0.0 < alpha <= hi):
        raise ValidationError(f"alpha must lie in (0, {hi}], got {alpha}")


# ---------------------------------------------------------------------------
# strong errors
# ---------------------------------------------------------------------------


def pathwise_errors(run_or_pair, alpha: float = 2.0, period=None) -> np.ndarray:
    """Per-trajectory ``|X^λ_t − X_t|^α`` on the snapshot grid, shape ``(N, n_times)``."""
    _check_alpha(alpha)
    a, b, per = _paired(run_or_pair, period)
    d = _wrap_diff(a - b, per)
    return np.sqrt(np.sum(d * d, axis=-1)) ** alpha


def strong_error_sup(run_or_pair, alpha: float = 2.0, *, period=None, n_boot: int = N_BOOT,
                     seed: int = BOOT_SEED) -> ErrorEstimate:
    """``max_t E|X^λ_t − X_t|^α`` over the saved snapshot times.

    The maximum over snapshots is a lower bound on the supremum over
    continuous time. The interval comes from resampling trajectories and
    recomputing the whole maximum on each resample.

    Parameters
    ----------
    run_or_pair : CoupledRun or (fine, coarse)
        Paired trajectories on a common grid, shape ``(N, n_times[, d])``.
    alpha : float
        Moment order in ``(0, 2]``.
    """
    e = pathwise_errors(run_or_pair, alpha, period)
    n = e.shape[0]
    value = float(e.mean(axis=0).max())
    if n_boot <= 0 or n < 2:
        return ErrorEstimate(value, value, value, n)
    reps = _boot_means(e, n_boot, seed).max(axis=1)
    lo, hi = _interval(reps)
    return ErrorEstimate(value, lo, hi, n, reps)


def traj_average_error(run, observable: str | int = "cos", eta: float = 1.0, r: float = 1.0, *,
                       n_boot: int = N_BOOT, seed: int = BOOT_SEED) -> ErrorEstimate:
    """``E|(1/T)∫φ(X^λ) − (1/T)∫φ(X)|^r`` from the run's trapezoid integrals.

    Parameters
    ----------
    run : CoupledRun
        Must have recorded ``observable``.
    eta : float
        Hölder exponent claimed for ``φ``; must not exceed the registered one
        (all built-in observables are Lipschitz, so ``eta <= 1``).
    r : float
        Moment order in ``(0, 2]``.
    """
    if not (0.0 < eta <= 1.0):
        raise ValidationError(f"Hölder exponent must lie in (0, 1], got {eta}")
    _check_alpha(r)
    names = list(run.observables)
    if isinstance(observable, str):
        if observable not in OBSERVABLES:
            raise ValidationError(f"unknown observable {observable!r}")
        if observable not in names:
            raise ValidationError(f"run did not record {observable!r}; has {names}")
        m = names.index(observable)
    else:
        m = int(observable)
    integ = np.asarray(run.integrals, dtype=float)[:, m, :] / run.horizon
    e = np.abs(integ[:, 0] - integ[:, 1]) ** r
    n = e.shape[0]
    value = float(e.mean())
    if n_boot <= 0 or n < 2:
        return ErrorEstimate(value, value, value, n)
    reps = _boot_means(e, n_boot, seed)
    lo, hi = _interval(reps)
    return ErrorEstimate(value, lo, hi, n, reps)


def observable_lipschitz(name: str, period: float = 2 * math.pi) -> float:
    """Lipschitz constant of a built-in observable."""
    return float(OBSERVABLE_LIPSCHITZ[name](period))


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


def fit_rate(lambdas: Sequence[float], errors: Sequence[float], replicates=None, *,
             level: float = CI_LEVEL, min_points: int = 4, min_span: float = 10.0) -> RateFit:
    """Fit the exponent of ``error ≈ C λ^slope``.

    Parameters
    ----------
    lambdas, errors : sequence of float
        At least ``min_points`` strictly increasing, positive ``λ`` spanning a
        factor ``min_span``; errors strictly positive.
    replicates : array, shape (n_boot, n_lambda), optional
        Bootstrap replicates of the errors (one column per ``λ``). When given,
        the slope interval is the percentile interval of the refitted slopes.
    """
    lam = np.asarray(lambdas, dtype=float)
    err = np.asarray(errors, dtype=float)
    if lam.ndim != 1 or lam.shape != err.shape:
        raise ValidationError("lambdas and errors must be 1-D of equal length")
    if lam.size < min_points:
        raise ConfigurationError(f"need at least {min_points} lambda values, got {lam.size}")
    if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
        raise ValidationError("lambdas must be positive and strictly increasing")
    if lam[-1] / lam[0] < min_span * (1 - 1e-12):
        raise ConfigurationError(f"lambda grid spans less than a factor {min_span}")
    if not np.all(np.isfinite(err)) or np.any(err <= 0):
        raise ValidationError("errors must be finite and strictly positive")
    x, y = np.log(lam), np.log(err)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if replicates is not None:
        reps = np.asarray(replicates, dtype=float)
        if reps.ndim != 2 or reps.shape[1] != lam.size:
            raise AlignmentError("replicates must have shape (n_boot, n_lambda)")
        good = np.all(reps > 0, axis=1)
        slopes = np.linalg.lstsq(X, np.log(reps[good]).T, rcond=None)[0][1]
        lo, hi = _interval(slopes, level)
        half = 0.5 * (hi - lo)
    else:
        from scipy.stats import t as student_t

        dof = lam.size - 2
        sxx = np.sum((x - x.mean()) ** 2)
        se = math.sqrt(np.sum(resid ** 2) / dof / sxx) if dof > 0 else math.inf
        half = float(student_t.ppf(0.5 + level / 2, dof) * se)
    return RateFit(lam.tolist(), err.tolist(), float(coef[1]), float(coef[0]), rms, half)


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------


def _quantile_cost(a, b, alpha):
    """``∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)|^α du`` for two sorted samples of any sizes."""
    na, nb = a.size, b.size
    cuts = np.union1d(np.arange(1, na) / na, np.arange(1, nb) / nb)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mid = 0.5 * (edges[1:] + edges[:-1])
    ia = np.minimum((mid * na).astype(np.int64), na - 1)
    ib = np.minimum((mid * nb).astype(np.int64), nb - 1)
    return float(np.sum(np.diff(edges) * np.abs(a[ia] - b[ib]) ** alpha))


@njit(cache=True)
def _cyclic_costs(a, b, alpha, period):
    """Mean circle cost of pairing ``a[i]`` with ``b[(i + k) % n]``, for every shift ``k``."""
    n = a.shape[0]
    out = np.empty(n)
    for k in range(n):
        s = 0.0
        for i in range(n):
            j = i + k
            if j >= n:
                j -= n
            d = a[i] - b[j]
            d -= period * np.floor(d / period + 0.5)
            s += abs(d) ** alpha
        out[k] = s / n
    return out


def _finalize(cost, alpha):
    return cost if alpha <= 1.0 else cost ** (1.0 / alpha)


def wasserstein_alpha_1d(a, b, alpha: float = 1.0, *, period: float = 0.0, seed: int = BOOT_SEED) -> float:
    """Empirical ``W_α`` between two one-dimensional samples.

    For ``α <= 1`` the value is the transport cost ``min E|X − Y|^α`` (a
    metric for concave costs); for ``α > 1`` it is ``(min E|X − Y|^α)^{1/α}``.

    On the line the monotone (sorted) coupling is used. It is optimal for
    ``α >= 1``; for ``α < 1`` it is an upper bound on the optimal cost. Samples
    of different sizes are compared through their quantile functions, which is
    exact. On a circle of length ``period`` the cost is minimized over cyclic
    shifts of the sorted coupling with circle distances; unequal samples are
    first subsampled to the smaller size with a fixed seed.
    """
    _check_alpha(alpha)
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("empty sample")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("samples must be finite")
    if period <= 0:
        return _finalize(_quantile_cost(np.sort(a), np.sort(b), alpha), alpha)
    if a.size != b.size:
        gen = bootstrap_rng(seed, tag=2)
        n = min(a.size, b.size)
        a = a if a.size == n else gen.choice(a, n, replace=False)
        b = b if b.size == n else gen.choice(b, n, replace=False)
    a = np.sort(np.mod(a, period))
    b = np.sort(np.mod(b, period))
    return _finalize(float(_cyclic_costs(a, b, float(alpha), float(period)).min()), alpha)


def circle_w1_cdf(a, b, period: float) -> float:
    """``W₁`` on a circle from ``∫|F_a − F_b − c|`` with ``c`` the weighted median.

    Independent of the shift search, used as a cross-check.
    """
    a = np.sort(np.mod(np.asarray(a, dtype=float).ravel(), period))
    b = np.sort(np.mod(np.asarray(b, dtype=float).ravel(), period))
    grid = np.unique(np.concatenate([[0.0], a, b, [period]]))
    left = grid[:-1]
    Fa = np.searchsorted(a, left, side="right") / a.size
    Fb = np.searchsorted(b, left, side="right") / b.size
    g = Fa - Fb
    w = np.diff(grid)
    order = np.argsort(g)
    cw = np.cumsum(w[order])
    c = g[order][np.searchsorted(cw, 0.5 * cw[-1])]
    return float(np.sum(w * np.abs(g - c)))


def sliced_wasserstein(a, b, alpha: float = 1.0, *, n_proj: int = 64, seed: int = BOOT_SEED) -> float:
    """Sliced ``W_α`` for ``d > 1``: average of 1-D costs over random directions.

    An approximation, not the multidimensional transport distance.
    """
    _check_alpha(alpha)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise AlignmentError("samples live in different dimensions")
    gen = bootstrap_rng(seed, tag=3)
    dirs = gen.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cost = np.mean([_quantile_cost(np.sort(a @ u), np.sort(b @ u), alpha) for u in dirs])
    return _finalize(float(cost), alpha)


def marginal_distance(run, alpha: float = 1.0, index: int = -1) -> float:
    """``W_α`` between the fine and coarse marginals at one snapshot of a run."""
    a, b, per = _paired(run)
    if a.shape[2] == 1:
        return wasserstein_alpha_1d(a[:, index, 0], b[:, index, 0], alpha, period=per)
    return sliced_wasserstein(a[:, index], b[:, index], alpha)


def split_sample_floor(x, alpha: float = 1.0, *, period: float = 0.0, seed: int = BOOT_SEED) -> float:
    """Distance between two random halves of one sample, rescaled to full size.

    Measures the Monte Carlo resolution of an empirical distance at sample
    size ``N``: the half-vs-half distance is scaled by ``1/√2`` because each
    half has ``N/2`` points and the fluctuation scales like ``N^{-1/2}``.
    """
    x = np.asarray(x, dtype=float).ravel()
    gen = bootstrap_rng(seed, tag=4)
    perm = gen.permutation(x.size)
    h = x.size // 2
    return wasserstein_alpha_1d(x[perm[:h]], x[perm[h:2 * h]], alpha, period=period) / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# tightness
# ---------------------------------------------------------------------------


def increment_moment(paths, dt: float, gamma: float = 4.0, lags: Sequence[int] = (1, 2, 4, 8, 16), *,
                     period: float = 0.0) -> IncrementMoment:
    """Increment moments ``E|X_{s+τ} − X_s|^γ`` over all start times ``s``.

    Parameters
    ----------
    paths : array, shape (N, n_times[, d])
        Stationary paths sampled every ``dt``. Positions should be lifted;
        with ``period > 0`` increments use the minimal image instead.
    lags : sequence of int
        Lags in units of ``dt``; at least four.
    """
    lags = np.asarray(sorted(set(int(k) for k in lags)), dtype=np.int64)
    if lags.size < 4:
        raise ConfigurationError(f"need at least 4 lags, got {lags.size}")
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    x = np.asarray(paths, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    if lags[0] < 1 or lags[-1] >= x.shape[1]:
        raise ConfigurationError("lags must lie in [1, n_times)")
    mom = np.empty(lags.size)
    for i, k in enumerate(lags):
        d = _wrap_diff(x[:, k:] - x[:, :-k], period)
        mom[i] = np.mean(np.sqrt(np.sum(d * d, axis=-1)) ** gamma)
    tau = lags * float(dt)
    if np.all(mom > 0):
        slope, icpt = np.polyfit(np.log(tau), np.log(mom), 1)
    else:
        slope = icpt = math.nan
    return IncrementMoment(tau, mom, float(slope), float(icpt), float(gamma))


# ---------------------------------------------------------------------------
# tidy output
# ---------------------------------------------------------------------------

TIDY_HEADER = ["lambda", "statistic", "value", "ci_low", "ci_high", "n"]


def tidy_rows(lam: float, stats: dict) -> list[list]:
    """One row per ``(λ, statistic)``; values may be floats or ErrorEstimates."""
    rows = []
    for name, v in stats.items():
        if isinstance(v, ErrorEstimate):
            rows.append([lam, name, v.value, v.ci_low, v.ci_high, v.n])
        else:
            rows.append([lam, name, float(v), "", "", ""])
    return rows
