"""Time steppers for the four dynamics families and the coupled-noise driver.

Kinetic families are written with three speed factors ``(a, f, s)``::

    dq = a ∇_p H dt
    dp = -a ∇_q H dt - f Γ(q) ∇_p H dt + s Γ(q)^{1/2} dW

with ``Γ = D⁻¹`` (underdamped), ``Id`` (coarse-grained, where ``∇_p H`` is
replaced by ``A(z) v`` for the position update) or ``Σ`` (mass). The
time-rescaled form uses ``a = λ, f = λ², s = λ sqrt(2/β)``; the physical form
uses ``a = 1, f = λ, s = sqrt(2λ/β)``.

Family codes: 0 overdamped, 1 underdamped, 2 coarse-grained, 3 mass.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from . import rng as _rng
from .errors import ConfigurationError, DivergedError, UnsupportedError, ValidationError
from .model import (
    OBSERVABLES,
    MatrixField,
    ProblemSpec,
    div_from_derivative,
    field1,
    field_eval,
    kin_grad,
    kin_grad1,
    kin_value,
    min_image,
    observable,
    pot_grad,
    pot_grad1,
    pot_value,
    spd_sqrt,
)

FAMILY_CODE = {"overdamped": 0, "underdamped": 1, "cg": 2, "mass": 3}
DIVERGENCE_THRESHOLD = 1e8
DIVERGED_BUDGET = 1e-3
STABILITY_CAP = 0.5
REFERENCE_DT = 1.0 / 16.0
# d = 1 runs use the scalar kernels; the general ones remain the reference
USE_SCALAR_KERNELS = True
_EMPTY_FIELD = np.array([0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------


@dataclass
class EnsembleState:
    """Positions (and momenta) of ``N`` trajectories.

    On the torus ``positions`` are reduced to ``[0, L)``; kernels internally
    evolve lifted coordinates.
    """

    positions: np.ndarray
    momenta: np.ndarray | None = None
    t: float = 0.0
    lam: float | None = None
    traj_ids: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(np.atleast_2d(np.asarray(self.positions, dtype=float)))
        if self.momenta is not None:
            self.momenta = np.ascontiguousarray(np.atleast_2d(np.asarray(self.momenta, dtype=float)))
            if self.momenta.shape != self.positions.shape:
                raise ValidationError("positions and momenta must have the same shape")
        if self.traj_ids is None:
            self.traj_ids = np.arange(self.positions.shape[0], dtype=np.int64)
        if not np.all(np.isfinite(self.positions)) or (
            self.momenta is not None and not np.all(np.isfinite(self.momenta))
        ):
            raise DivergedError("non-finite state")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def copy(self) -> "EnsembleState":
        return EnsembleState(self.positions.copy(), None if self.momenta is None else self.momenta.copy(),
                             self.t, self.lam, self.traj_ids.copy())


# ---------------------------------------------------------------------------
# compiled single-trajectory steps
# ---------------------------------------------------------------------------
# workspace: M2 (10, d, d), T3 (2, d, d, d), V1 (8, d)


@njit(cache=True, nogil=True)
def _od_step(x, dw, dt, beta, pk, fp, power, use_div, M2, T3, V1, out):
    d = x.shape[0]
    gV = V1[0]
    div = V1[1]
    pot_grad(pk, x, gV)
    field_eval(fp, x, power, M2[0], M2[1], M2[2], M2[3], T3[0])
    div_from_derivative(T3[0], div)
    c = math.sqrt(2.0 / beta)
    for i in range(d):
        s = 0.0
        nz = 0.0
        for j in range(d):
            s -= M2[0, i, j] * gV[j]
            nz += M2[2, i, j] * dw[j]
        if use_div:
            s += div[i] / beta
        out[i] = x[i] + s * dt + c * nz


@njit(cache=True, nogil=True)
def _mass_force(q, p, beta, pk, fpM, M2, T3, V1, force, vel):
    """``force = ∇_q H_M``, ``vel = M⁻¹ p``."""
    d = q.shape[0]
    field_eval(fpM, q, 1, M2[4], M2[5], M2[6], M2[7], T3[1])
    pot_grad(pk, q, force)
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += M2[5, i, j] * p[j]
        vel[i] = s
    for k in range(d):
        quad = 0.0
        tr = 0.0
        for i in range(d):
            for j in range(d):
                quad += vel[i] * T3[1, k, i, j] * vel[j]
                tr += M2[5, i, j] * T3[1, k, j, i]
        force[k] += -0.5 * quad + 0.5 * tr / beta


@njit(cache=True, nogil=True)
def _kin_step(fam, x, p, dw, h, a, f, s, beta, pk, kp, fpA, fpB, M2, T3, V1, xo, po):
    d = x.shape[0]
    gV = V1[0]
    gU = V1[1]
    tmp = V1[2]
    if fam == 1:
        pot_grad(pk, x, gV)
        kin_grad(kp, p, gU)
        field_eval(fpA, x, 1, M2[0], M2[1], M2[2], M2[3], T3[0])
        for i in range(d):
            fr = 0.0
            nz = 0.0
            for j in range(d):
                fr += M2[1, i, j] * gU[j]
                nz += M2[3, i, j] * dw[j]
            xo[i] = x[i] + h * a * gU[i]
            po[i] = p[i] - h * a * gV[i] - h * f * fr + s * nz
    elif fam == 2:
        pot_grad(pk, x, gV)
        field_eval(fpA, x, 1, M2[0], M2[1], M2[2], M2[3], T3[0])
        div_from_derivative(T3[0], tmp)
        for i in range(d):
            av = 0.0
            ag = 0.0
            for j in range(d):
                av += M2[0, i, j] * p[j]
                ag += M2[0, i, j] * gV[j]
            xo[i] = x[i] + h * a * av
            po[i] = p[i] + h * a * (-ag + tmp[i] / beta) - h * f * p[i] + s * dw[i]
    else:
        vel = V1[3]
        _mass_force(x, p, beta, pk, fpA, M2, T3, V1, gV, vel)
        field_eval(fpB, x, 1, M2[0], M2[1], M2[2], M2[3], T3[0])
        for i in range(d):
            fr = 0.0
            nz = 0.0
            for j in range(d):
                fr += M2[0, i, j] * vel[j]
                nz += M2[2, i, j] * dw[j]
            xo[i] = x[i] + h * a * vel[i]
            po[i] = p[i] - h * a * gV[i] - h * f * fr + s * nz


@njit(cache=True, nogil=True)
def _mass_symplectic_step(x, p, dw, h, a, f, s, beta, pk, fpM, fpS, M2, T3, V1, xo, po):
    """Symplectic Euler for the Hamiltonian part (implicit in p), explicit O-U terms."""
    d = x.shape[0]
    force = V1[0]
    vel = V1[3]
    pn = V1[4]
    for i in range(d):
        pn[i] = p[i]
    for _ in range(100):
        _mass_force(x, pn, beta, pk, fpM, M2, T3, V1, force, vel)
        err = 0.0
        for i in range(d):
            new = p[i] - h * a * force[i]
            err = max(err, abs(new - pn[i]))
            pn[i] = new
        if err < 1e-15:
            break
    _mass_force(x, pn, beta, pk, fpM, M2, T3, V1, force, vel)
    field_eval(fpS, x, 1, M2[0], M2[1], M2[2], M2[3], T3[0])
    for i in range(d):
        fr = 0.0
        nz = 0.0
        for j in range(d):
            fr += M2[0, i, j] * vel[j]
            nz += M2[2, i, j] * dw[j]
        xo[i] = x[i] + h * a * vel[i]
        po[i] = pn[i] - h * f * fr + s * nz


@njit(cache=True, nogil=True)
def _bad(v, thresh):
    for i in range(v.shape[0]):
        if not (abs(v[i]) <= thresh):
            return True
    return False


@njit(cache=True, nogil=True)
def noise_block(step, traj, r, d, sqh, k0, k1, buf, fine, coarse):
    """Fine increments ``fine[j, c]`` of one coarse step and their ordered sum."""
    nblk = (r * d + 3) // 4
    for b in range(nblk):
        _rng.normal4(step, b, traj, _rng.TAG_BROWNIAN, k0, k1, buf, 4 * b)
    for c in range(d):
        coarse[c] = 0.0
    for j in range(r):
        for c in range(d):
            w = sqh * buf[j * d + c]
            fine[j, c] = w
            coarse[c] += w


# ---------------------------------------------------------------------------
# compiled ensemble kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _coupled_chunk(fam, X0, P0, traj, k0, k1, n_coarse, r, delta, a, f, s, beta,
                   pk, kp, fpA, fpB, fpO, powO, use_div, snap_every, obs, period, obs_period, thresh,
                   snap_f, snap_c, sup_err, integ, diverged, p_final):
    n, d = X0.shape
    h = delta / r
    sqh = math.sqrt(h)
    buf = np.empty(4 * ((r * d + 3) // 4))
    fine = np.empty((r, d))
    dWc = np.empty(d)
    M2 = np.empty((10, d, d))
    T3 = np.empty((2, d, d, d))
    V1 = np.empty((8, d))
    x = np.empty(d)
    p = np.empty(d)
    X = np.empty(d)
    xn = np.empty(d)
    pn = np.empty(d)
    Xn = np.empty(d)
    nobs = obs.shape[0]
    for i in range(n):
        x[:] = X0[i]
        X[:] = X0[i]
        p[:] = P0[i]
        snap_f[i, 0] = x
        snap_c[i, 0] = X
        sup = 0.0
        for m in range(nobs):
            integ[i, m, 0] = 0.5 * delta * observable(obs[m], x, obs_period, period > 0.0)
            integ[i, m, 1] = 0.5 * delta * observable(obs[m], X, obs_period, period > 0.0)
        dead = False
        for k in range(n_coarse):
            noise_block(k, traj[i], r, d, sqh, k0, k1, buf, fine, dWc)
            for j in range(r):
                _kin_step(fam, x, p, fine[j], h, a, f, s, beta, pk, kp, fpA, fpB, M2, T3, V1, xn, pn)
                x[:] = xn
                p[:] = pn
            _od_step(X, dWc, delta, beta, pk, fpO, powO, use_div, M2, T3, V1, Xn)
            X[:] = Xn
            if _bad(x, thresh) or _bad(p, thresh) or _bad(X, thresh):
                dead = True
                break
            e2 = 0.0
            for c in range(d):
                dc = min_image(x[c] - X[c], period)
                e2 += dc * dc
            if e2 > sup:
                sup = e2
            wt = 0.5 * delta if k == n_coarse - 1 else delta
            for m in range(nobs):
                integ[i, m, 0] += wt * observable(obs[m], x, obs_period, period > 0.0)
                integ[i, m, 1] += wt * observable(obs[m], X, obs_period, period > 0.0)
            if (k + 1) % snap_every == 0:
                snap_f[i, (k + 1) // snap_every] = x
                snap_c[i, (k + 1) // snap_every] = X
        if dead:
            diverged[i] = True
            snap_f[i] = np.nan
            snap_c[i] = np.nan
            sup_err[i] = np.nan
            integ[i] = np.nan
            p_final[i] = np.nan
        else:
            diverged[i] = False
            sup_err[i] = math.sqrt(sup)
            p_final[i] = p


@njit(cache=True, nogil=True)
def _evolve_chunk(fam, X0, P0, traj, k0, k1, n_steps, r, h, a, f, s, beta,
                  pk, kp, fpA, fpB, powO, use_div, symplectic, save_every, thresh,
                  saves, Xf, Pf, diverged):
    n, d = X0.shape
    sqh = math.sqrt(h)
    buf = np.empty(4 * ((r * d + 3) // 4))
    fine = np.empty((r, d))
    dWc = np.empty(d)
    M2 = np.empty((10, d, d))
    T3 = np.empty((2, d, d, d))
    V1 = np.empty((8, d))
    x = np.empty(d)
    p = np.empty(d)
    xn = np.empty(d)
    pn = np.empty(d)
    for i in range(n):
        x[:] = X0[i]
        p[:] = P0[i]
        if save_every > 0:
            saves[i, 0] = x
        dead = False
        for k in range(n_steps // r):
            noise_block(k, traj[i], r, d, sqh, k0, k1, buf, fine, dWc)
            for j in range(r):
                if fam == 0:
                    _od_step(x, fine[j], h, beta, pk, fpA, powO, use_div, M2, T3, V1, xn)
                elif symplectic:
                    _mass_symplectic_step(x, p, fine[j], h, a, f, s, beta, pk, fpA, fpB, M2, T3, V1, xn, pn)
                else:
                    _kin_step(fam, x, p, fine[j], h, a, f, s, beta, pk, kp, fpA, fpB, M2, T3, V1, xn, pn)
                x[:] = xn
                if fam != 0:
                    p[:] = pn
                if _bad(x, thresh) or _bad(p, thresh):
                    dead = True
                    break
                step = k * r + j + 1
                if save_every > 0 and step % save_every == 0:
                    saves[i, step // save_every] = x
            if dead:
                break
        diverged[i] = dead
        Xf[i] = x
        Pf[i] = p
        if dead:
            Xf[i] = np.nan
            Pf[i] = np.nan
            if save_every > 0:
                saves[i] = np.nan


# ---------------------------------------------------------------------------
# scalar kernels for d = 1 (same arithmetic as the general steps)
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True, inline="always")
def _od_step1(x, dw, dt, beta, pk, fp, power, use_div):
    g, dg = field1(fp, x, power)
    drift = -g * pot_grad1(pk, x)
    if use_div:
        drift += dg / beta
    return x + drift * dt + math.sqrt(2.0 / beta) * math.sqrt(g) * dw


@njit(cache=True, nogil=True, inline="always")
def _kin_step1(fam, x, p, dw, h, a, f, s, beta, pk, kp, fpA, fpB):
    if fam == 1:
        g = field1(fpA, x, 1)[0]
        u = kin_grad1(kp, p)
        return x + h * a * u, p - h * a * pot_grad1(pk, x) - h * f * u / g + s * dw / math.sqrt(g)
    if fam == 2:
        g, dg = field1(fpA, x, 1)
        return (x + h * a * g * p,
                p + h * a * (-g * pot_grad1(pk, x) + dg / beta) - h * f * p + s * dw)
    m, dm = field1(fpA, x, 1)
    sg = field1(fpB, x, 1)[0]
    vel = p / m
    force = pot_grad1(pk, x) - 0.5 * vel * vel * dm + 0.5 * dm / (m * beta)
    return x + h * a * vel, p - h * a * force - h * f * sg * vel + s * math.sqrt(sg) * dw


@njit(cache=True, nogil=True)
def _coupled_chunk1(fam, X0, P0, traj, k0, k1, n_coarse, r, delta, a, f, s, beta,
                    pk, kp, fpA, fpB, fpO, powO, use_div, snap_every, obs, period, obs_period, thresh,
                    snap_f, snap_c, sup_err, integ, diverged, p_final):
    n = X0.shape[0]
    h = delta / r
    sqh = math.sqrt(h)
    buf = np.empty(4)
    q1 = np.empty(1)
    nobs = obs.shape[0]
    torus = period > 0.0
    for i in range(n):
        x = X0[i, 0]
        X = x
        p = P0[i, 0]
        snap_f[i, 0, 0] = x
        snap_c[i, 0, 0] = X
        sup = 0.0
        for m in range(nobs):
            q1[0] = x
            integ[i, m, 0] = 0.5 * delta * observable(obs[m], q1, obs_period, torus)
            integ[i, m, 1] = integ[i, m, 0]
        dead = False
        for k in range(n_coarse):
            dWc = 0.0
            for j in range(r):
                if j % 4 == 0:
                    _rng.normal4(k, j // 4, traj[i], _rng.TAG_BROWNIAN, k0, k1, buf, 0)
                w = sqh * buf[j % 4]
                dWc += w
                x, p = _kin_step1(fam, x, p, w, h, a, f, s, beta, pk, kp, fpA, fpB)
            X = _od_step1(X, dWc, delta, beta, pk, fpO, powO, use_div)
            if not (abs(x) <= thresh and abs(p) <= thresh and abs(X) <= thresh):
                dead = True
                break
            dc = min_image(x - X, period)
            if dc * dc > sup:
                sup = dc * dc
            wt = 0.5 * delta if k == n_coarse - 1 else delta
            for m in range(nobs):
                q1[0] = x
                integ[i, m, 0] += wt * observable(obs[m], q1, obs_period, torus)
                q1[0] = X
                integ[i, m, 1] += wt * observable(obs[m], q1, obs_period, torus)
            if (k + 1) % snap_every == 0:
                snap_f[i, (k + 1) // snap_every, 0] = x
                snap_c[i, (k + 1) // snap_every, 0] = X
        if dead:
            diverged[i] = True
            snap_f[i] = np.nan
            snap_c[i] = np.nan
            sup_err[i] = np.nan
            integ[i] = np.nan
            p_final[i] = np.nan
        else:
            diverged[i] = False
            sup_err[i] = math.sqrt(sup)
            p_final[i, 0] = p


@njit(cache=True, nogil=True)
def _evolve_chunk1(fam, X0, P0, traj, k0, k1, n_steps, r, h, a, f, s, beta,
                   pk, kp, fpA, fpB, powO, use_div, save_every, thresh,
                   saves, Xf, Pf, diverged):
    n = X0.shape[0]
    sqh = math.sqrt(h)
    buf = np.empty(4)
    for i in range(n):
        x = X0[i, 0]
        p = P0[i, 0]
        if save_every > 0:
            saves[i, 0, 0] = x
        dead = False
        for k in range(n_steps // r):
            for j in range(r):
                if j % 4 == 0:
                    _rng.normal4(k, j // 4, traj[i], _rng.TAG_BROWNIAN, k0, k1, buf, 0)
                w = sqh * buf[j % 4]
                if fam == 0:
                    x = _od_step1(x, w, h, beta, pk, fpA, powO, use_div)
                else:
                    x, p = _kin_step1(fam, x, p, w, h, a, f, s, beta, pk, kp, fpA, fpB)
                if not (abs(x) <= thresh and abs(p) <= thresh):
                    dead = True
                    break
                step = k * r + j + 1
                if save_every > 0 and step % save_every == 0:
                    saves[i, step // save_every, 0] = x
            if dead:
                break
        diverged[i] = dead
        Xf[i, 0] = x
        Pf[i, 0] = p
        if dead:
            Xf[i] = np.nan
            Pf[i] = np.nan
            if save_every > 0:
                saves[i] = np.nan


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------


def speed_factors(lam: float, beta: float, rescaled: bool = True) -> tuple[float, float, float]:
    if lam < 0:
        raise ConfigurationError("friction must be nonnegative")
    if rescaled:
        return lam, lam * lam, lam * math.sqrt(2.0 / beta)
    return 1.0, lam, math.sqrt(2.0 * lam / beta)


def _packs(problem: ProblemSpec):
    fam = FAMILY_CODE[problem.family]
    F = problem.fields
    if fam in (0, 1):
        fpA, fpB = F["D"].pack, _EMPTY_FIELD
    elif fam == 2:
        fpA, fpB = F["A"].pack, _EMPTY_FIELD
    else:
        fpA, fpB = F["M"].pack, F["Sigma"].pack
    return fam, problem.potential.pack, problem.kinetic.pack, fpA, fpB


def friction_bound(problem: ProblemSpec) -> float:
    """Largest eigenvalue of the friction matrix over the domain."""
    if problem.family in ("overdamped", "underdamped"):
        lo, hi = problem.fields["D"].spectrum_bounds(-1)
        Minv = problem.kinetic.mass_inv
        return hi * (1.0 if Minv is None else float(np.linalg.norm(Minv, 2)))
    if problem.family == "cg":
        return 1.0
    return problem.fields["Sigma"].spectrum_bounds()[1] * problem.fields["M"].spectrum_bounds(-1)[1]


def check_stability(problem: ProblemSpec, h: float, f: float) -> None:
    if problem.family != "overdamped" and h * f * friction_bound(problem) > STABILITY_CAP:
        raise ConfigurationError(
            f"step {h:.3g} exceeds the stability cap: h * friction = {h * f * friction_bound(problem):.3g}"
            f" > {STABILITY_CAP}")


def refine_factor(lam: float, coarse_dt: float, ref_dt: float = REFERENCE_DT) -> int:
    """Default fine-step count ``r = ceil(4 λ² δ / δ₀)``."""
    return max(1, int(math.ceil(4.0 * lam * lam * coarse_dt / ref_dt - 1e-9)))


def _chunks(n: int, threads: int):
    threads = max(1, int(threads))
    size = max(1, -(-n // (4 * threads)))
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


def _parallel(fn, n: int, threads: int):
    spans = _chunks(n, threads)
    if threads <= 1 or len(spans) == 1:
        for lo, hi in spans:
            fn(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        for fut in [ex.submit(fn, lo, hi) for lo, hi in spans]:
            fut.result()


# ---------------------------------------------------------------------------
# single-step API
# ---------------------------------------------------------------------------


def _workspace(d):
    return np.empty((10, d, d)), np.empty((2, d, d, d)), np.empty((8, d))


def _finish(state, problem, pos, mom, dt, lam, step_index=-1):
    bad = ~np.isfinite(pos).all(axis=1) | (np.abs(pos) > DIVERGENCE_THRESHOLD).any(axis=1)
    if mom is not None:
        bad |= ~np.isfinite(mom).all(axis=1) | (np.abs(mom) > DIVERGENCE_THRESHOLD).any(axis=1)
    if bad.any():
        raise DivergedError(f"{int(bad.sum())} trajectories diverged", step=step_index, count=int(bad.sum()))
    return EnsembleState(problem.domain.wrap(pos), mom, state.t + dt, lam, state.traj_ids)


def _as_increments(dW, n, d):
    dW = np.asarray(dW, dtype=float)
    return np.ascontiguousarray(np.broadcast_to(dW.reshape(-1, d) if dW.size == n * d else dW.reshape(1, d), (n, d)))


def step_overdamped_em(state: EnsembleState, problem: ProblemSpec, dW, dt: float, *, use_div: bool = True,
                       step_index: int = -1) -> EnsembleState:
    """Euler–Maruyama step of ``dX = −[D∇V − (1/β) div D] dt + sqrt(2/β) D^{1/2} dW``.

    The diffusion ``D`` is the family's overdamped limit (``D``, ``A²`` or ``Σ⁻¹``).
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    fld, power = problem.limit_field
    n, d = state.positions.shape
    dW = _as_increments(dW, n, d)
    out = np.empty((n, d))
    M2, T3, V1 = _workspace(d)
    for i in range(n):
        _od_step(state.positions[i], dW[i], dt, problem.beta, problem.potential.pack, fld.pack, power, use_div,
                 M2, T3, V1, out[i])
    return _finish(state, problem, out, None, dt, None, step_index)


def _kinetic_step(state, problem, dW, dt, lam, rescaled, symplectic=False, step_index=-1):
    if state.momenta is None:
        raise ValidationError("kinetic step needs momenta")
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    a, f, s = speed_factors(lam, problem.beta, rescaled)
    check_stability(problem, dt, f)
    fam, pk, kp, fpA, fpB = _packs(problem)
    n, d = state.positions.shape
    dW = _as_increments(dW, n, d)
    xo, po = np.empty((n, d)), np.empty((n, d))
    M2, T3, V1 = _workspace(d)
    for i in range(n):
        if symplectic:
            _mass_symplectic_step(state.positions[i], state.momenta[i], dW[i], dt, a, f, s, problem.beta, pk, fpA,
                                  fpB, M2, T3, V1, xo[i], po[i])
        else:
            _kin_step(fam, state.positions[i], state.momenta[i], dW[i], dt, a, f, s, problem.beta, pk, kp, fpA, fpB,
                      M2, T3, V1, xo[i], po[i])
    return _finish(state, problem, xo, po, dt, lam, step_index)


def step_underdamped_rescaled_em(state, problem, dW, dt, lam, *, rescaled=True, step_index=-1):
    """EM step of ``dX = λ∇U(P)dt, dP = −λ∇V dt − λ² D⁻¹∇U dt + λ sqrt(2/β) D^{-1/2} dW``."""
    if problem.family != "underdamped":
        raise ValidationError("problem family must be underdamped")
    return _kinetic_step(state, problem, dW, dt, lam, rescaled, step_index=step_index)


def step_cg_kinetic_em(state, problem, dW, dt, lam, *, rescaled=True, step_index=-1):
    """EM step of ``dz = A v dt, dv = (−A∇V + (1/β) div A) dt − λ v dt + sqrt(2λ/β) dW``."""
    if problem.family != "cg":
        raise ValidationError("problem family must be cg")
    return _kinetic_step(state, problem, dW, dt, lam, rescaled, step_index=step_index)


def step_mass_langevin_em(state, problem, dW, dt, lam, *, rescaled=True, symplectic=False, step_index=-1):
    """EM (or symplectic-Euler) step of the position-dependent mass dynamics.

    ``H_M = ½ pᵀ M⁻¹(q) p + V(q) + (1/2β) log det M(q)``, friction ``λ Σ ∇_p H_M``,
    noise ``sqrt(2λ/β) Σ^{1/2}``.
    """
    if problem.family != "mass":
        raise ValidationError("problem family must be mass")
    return _kinetic_step(state, problem, dW, dt, lam, rescaled, symplectic, step_index)


def mass_hamiltonian(problem: ProblemSpec, q, p) -> np.ndarray:
    """``H_M(q, p)`` for a batch of states."""
    q = np.atleast_2d(q)
    p = np.atleast_2d(p)
    M = problem.fields["M"]
    Minv = M.evaluate(q)["inv"]
    kin = 0.5 * np.einsum("ni,nij,nj->n", p, Minv, p)
    return kin + problem.potential.value(q) + 0.5 * M.logdet(q) / problem.beta


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledNoise:
    """Brownian increments of the reference path ``W`` on a two-level grid.

    Fine increments (step ``h = δ/r``) are generated; each coarse increment is
    the left-to-right sum of its ``r`` fine increments.
    """

    master_seed: int
    coarse_dt: float
    refine_factor: int
    horizon: float
    dim: int
    trajectory_id: int = 0

    @property
    def n_coarse(self) -> int:
        return int(round(self.horizon / self.coarse_dt))

    def increments(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """``(fine (r, d), coarse (d,))`` increments of coarse step ``step``."""
        r, d = self.refine_factor, self.dim
        k0, k1 = _rng.split_seed(self.master_seed)
        buf = np.empty(4 * ((r * d + 3) // 4))
        fine, coarse = np.empty((r, d)), np.empty(d)
        noise_block(step, self.trajectory_id, r, d, math.sqrt(self.coarse_dt / r), k0, k1, buf, fine, coarse)
        return fine, coarse


# ---------------------------------------------------------------------------
# Gibbs sampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _reject_chunk(kind, pk, beta, lb, period, chol, traj, k0, k1, max_attempts, out, attempts):
    n, d = out.shape
    nb = (d + 3) // 4
    prop = np.empty(4 * nb)
    u = np.empty(4)
    q = np.empty(d)
    z = np.empty(d)
    for i in range(n):
        attempts[i] = -1
        for k in range(max_attempts):
            for b in range(nb):
                if kind == 0:
                    _rng.uniform4(k, b, traj[i], _rng.TAG_POSITION, k0, k1, prop, 4 * b)
                else:
                    _rng.normal4(k, b, traj[i], _rng.TAG_POSITION, k0, k1, prop, 4 * b)
            if kind == 0:
                for c in range(d):
                    q[c] = prop[c] * period
                logacc = -beta * (pot_value(pk, q) - lb)
            else:
                for c in range(d):
                    s = 0.0
                    for j in range(d):
                        s += chol[c, j] * prop[j]
                    q[c] = s
                # Gaussian part is proposed exactly; accept on the bounded remainder
                quad = 0.0
                for c in range(d):
                    z[c] = prop[c]
                    quad += z[c] * z[c]
                logacc = -beta * (pot_value(pk, q) - 0.5 * quad / beta - lb)
            _rng.uniform4(k, 0, traj[i], _rng.TAG_ACCEPT, k0, k1, u, 0)
            if math.log(u[0]) < logacc:
                attempts[i] = k + 1
                out[i] = q
                break


@dataclass
class GibbsSample:
    state: EnsembleState
    method: str
    acceptance: float | None = None
    diagnostics: dict = field(default_factory=dict)


def sample_gibbs(problem: ProblemSpec, N: int, seed: int, *, burn_in_time: float = 20.0,
                 burn_in_dt: float = 1e-3, max_attempts: int = 100000, threads: int = 1) -> GibbsSample:
    """i.i.d. (or burn-in approximate) samples from ``μ`` (``μ_M`` for the mass family).

    Positions: exact Gaussian for quadratic V on ``R^d``; rejection from the
    uniform law on the torus or from the Gaussian part on ``R^d`` when the rest
    is bounded; otherwise an overdamped burn-in. Momenta: exact Gaussian.
    """
    V = problem.potential
    dom = problem.domain
    beta = problem.beta
    d = dom.dim
    N = int(N)
    traj = np.arange(N, dtype=np.int64)
    k0, k1 = _rng.split_seed(seed)
    q = np.empty((N, d))
    acc = None
    diagnostics: dict = {}
    bounded_rest = V.dw_scale == 0
    if V.is_gaussian:
        method = "exact-gaussian"
        cov = np.linalg.inv(beta * V.K)
        q = _rng.normals(seed, traj, [0], d, _rng.TAG_POSITION)[:, 0, :] @ spd_sqrt(cov).T
    elif dom.is_torus or (bounded_rest and V.confining):
        method = "rejection-uniform" if dom.is_torus else "rejection-gaussian"
        kind = 0 if dom.is_torus else 1
        chol = np.eye(d) if dom.is_torus else spd_sqrt(np.linalg.inv(beta * V.K))
        lb = V.lower_bound
        attempts = np.zeros(N, dtype=np.int64)

        def work(lo, hi):
            _reject_chunk(kind, V.pack, beta, lb, dom.length, chol, traj[lo:hi], k0, k1, max_attempts,
                          q[lo:hi], attempts[lo:hi])

        _parallel(work, N, threads)
        if np.any(attempts < 0):
            raise ConfigurationError("rejection sampler exhausted its attempt budget")
        acc = N / float(attempts.sum())
        if acc < 1e-4:
            raise ConfigurationError(f"rejection acceptance {acc:.2e} below 1e-4")
    else:
        method = "burn-in"
        q0 = _rng.normals(seed, traj, [0], d, _rng.TAG_POSITION)[:, 0, :]
        od = ProblemSpec(dom, V, problem.kinetic, beta, "overdamped", {"D": MatrixField.constant(np.eye(d))},
                         strict=False)
        n_steps = int(round(burn_in_time / burn_in_dt))
        n_win = 10
        trace = []
        state = EnsembleState(q0)
        for w in range(n_win):
            res = evolve(od, state, burn_in_dt, n_steps // n_win, seed=seed, stream=1000 + w, threads=threads)
            state = res.state
            trace.append(float(np.mean(V.value(state.positions))))
        q = state.positions
        diagnostics["mean_V_trace"] = trace
        diagnostics["stabilized"] = abs(trace[-1] - trace[-2]) < 5 * np.std(V.value(q)) / math.sqrt(N)
    xi = _rng.normals(seed, traj, [0], d, _rng.TAG_MOMENTUM)[:, 0, :]
    if problem.kinetic.quadratic_mass is None:
        raise UnsupportedError("momentum sampling requires a quadratic kinetic energy")
    if problem.family == "mass":
        S = problem.fields["M"].evaluate(q)["sqrt"]
        p = np.einsum("nij,nj->ni", S, xi) / math.sqrt(beta)
    else:
        p = xi @ spd_sqrt(problem.kinetic.quadratic_mass / beta).T
    return GibbsSample(EnsembleState(dom.wrap(q), p, 0.0, None, traj), method, acc, diagnostics)


# ---------------------------------------------------------------------------
# ensemble drivers
# ---------------------------------------------------------------------------


@dataclass
class EvolveResult:
    state: EnsembleState
    saves: np.ndarray | None
    n_diverged: int
    save_dt: float | None


def evolve(problem: ProblemSpec, state: EnsembleState, dt: float, n_steps: int, *, lam: float = 1.0,
           seed: int = 0, rescaled: bool = True, use_div: bool = True, symplectic: bool = False,
           save_every: int = 0, substeps: int = 1, stream: int = 0, threads: int = 1,
           lifted: bool = False) -> EvolveResult:
    """Run one dynamics family for ``n_steps`` steps of size ``dt``.

    Step ``k`` uses the normals at counter ``(k // substeps, (k % substeps) * d + c)``
    of trajectory ``traj_ids[i]``; ``substeps`` fine steps thus share the
    layout of one coarse step of a coupled run. ``stream != 0`` selects an
    independent key. ``save_every > 0`` stores the lifted positions every that
    many steps.
    """
    fam, pk, kp, fpA, fpB = _packs(problem)
    powO = 1
    if fam == 0:
        fpA, powO = problem.limit_field[0].pack, problem.limit_field[1]
    a, f, s = speed_factors(lam, problem.beta, rescaled)
    if fam != 0:
        check_stability(problem, dt, f)
        if state.momenta is None:
            raise ValidationError("kinetic family needs momenta")
    if n_steps % substeps:
        raise ConfigurationError("n_steps must be a multiple of substeps")
    if symplectic and fam != 3:
        raise ValidationError("symplectic variant exists for the mass family only")
    X0 = np.ascontiguousarray(state.positions)
    P0 = np.ascontiguousarray(state.momenta if state.momenta is not None else np.zeros_like(X0))
    n, d = X0.shape
    k0, k1 = stream_key(seed, stream)
    n_save = n_steps // save_every + 1 if save_every > 0 else 1
    saves = np.empty((n, n_save, d) if save_every > 0 else (1, 1, d))
    Xf, Pf = np.empty((n, d)), np.empty((n, d))
    div = np.zeros(n, dtype=np.bool_)
    traj = np.ascontiguousarray(state.traj_ids, dtype=np.int64)
    def work(lo, hi):
        if d == 1 and not symplectic and USE_SCALAR_KERNELS:
            _evolve_chunk1(fam, X0[lo:hi], P0[lo:hi], traj[lo:hi], k0, k1, n_steps, substeps, dt, a, f, s,
                           problem.beta, pk, kp, fpA, fpB, powO, use_div, save_every,
                           DIVERGENCE_THRESHOLD, saves[lo:hi] if save_every > 0 else saves, Xf[lo:hi],
                           Pf[lo:hi], div[lo:hi])
            return
        _evolve_chunk(fam, X0[lo:hi], P0[lo:hi], traj[lo:hi], k0, k1, n_steps, substeps, dt, a, f, s,
                      problem.beta, pk, kp, fpA, fpB, powO, use_div, symplectic, save_every,
                      DIVERGENCE_THRESHOLD, saves[lo:hi] if save_every > 0 else saves, Xf[lo:hi], Pf[lo:hi],
                      div[lo:hi])

    _parallel(work, n, threads)
    nd = int(div.sum())
    if nd > DIVERGED_BUDGET * n:
        raise DivergedError(f"{nd} of {n} trajectories diverged", count=nd)
    keep = ~div
    pos = Xf if lifted else problem.domain.wrap(Xf)
    new = EnsembleState(pos[keep], None if fam == 0 else Pf[keep], state.t + n_steps * dt, lam, traj[keep])
    return EvolveResult(new, saves[keep] if save_every > 0 else None, nd,
                        save_every * dt if save_every > 0 else None)


def stream_key(seed: int, stream: int = 0) -> tuple[int, int]:
    """Philox key of an auxiliary stream (``stream = 0`` is the master key)."""
    k0, k1 = _rng.split_seed(seed)
    if stream:
        k0 = (k0 + 0x632BE5AB * stream) & _rng.MASK32
        k1 = (k1 ^ (0x85EBCA6B * stream)) & _rng.MASK32
    return k0, k1


@dataclass
class CoupledRun:
    """Paired fine (kinetic) / coarse (overdamped) trajectories for one λ."""

    lam: float
    refine: int
    times: np.ndarray
    fine: np.ndarray          # (N, n_snap + 1, d) lifted positions
    coarse: np.ndarray        # (N, n_snap + 1, d)
    sup_error: np.ndarray     # (N,) sup over the coarse grid of |X^λ − X|
    integrals: np.ndarray     # (N, n_obs, 2) time integrals of each observable
    observables: tuple
    momenta: np.ndarray
    n_diverged: int
    period: float
    horizon: float

    def diff(self) -> np.ndarray:
        d = self.fine - self.coarse
        if self.period > 0:
            d = d - self.period * np.round(d / self.period)
        return d


def simulate_coupled(problem: ProblemSpec, lambdas: Sequence[float], N: int, T: float, coarse_dt: float, *,
                     seed: int = 0, refine_rule=None, n_snap: int = 32, observables: Sequence[str] = ("cos",),
                     initial: EnsembleState | None = None, threads: int = 1, use_div: bool = True,
                     ) -> list[CoupledRun]:
    """Shared-noise runs of the time-rescaled kinetic family and its overdamped limit.

    The comparator is the overdamped dynamics with the family's limiting
    diffusion. Both fidelities start from the same draw of ``μ₀`` (default the
    Gibbs measure) and are driven by the same reference Brownian path.
    """
    if problem.family == "overdamped":
        raise ValidationError("coupled runs need a kinetic family")
    n_coarse = int(round(T / coarse_dt))
    if abs(n_coarse * coarse_dt - T) > 1e-9 * T:
        raise ConfigurationError("horizon must be a multiple of the coarse step")
    if n_coarse % n_snap:
        raise ConfigurationError("number of coarse steps must be a multiple of n_snap")
    lambdas = [float(l) for l in lambdas]
    if any(l < 1 for l in lambdas):
        raise ConfigurationError("lambda must be >= 1")
    refine_rule = refine_rule or (lambda lam: refine_factor(lam, coarse_dt))
    if initial is None:
        initial = sample_gibbs(problem, N, seed, threads=threads).state
    X0 = np.ascontiguousarray(initial.positions)
    P0 = np.ascontiguousarray(initial.momenta)
    traj = np.ascontiguousarray(initial.traj_ids, dtype=np.int64)
    n, d = X0.shape
    fam, pk, kp, fpA, fpB = _packs(problem)
    fO, powO = problem.limit_field
    obs = np.array([OBSERVABLES[o] for o in observables], dtype=np.int64)
    period = problem.period
    obs_period = period if period > 0 else 2 * math.pi
    k0, k1 = _rng.split_seed(seed)
    snap_every = n_coarse // n_snap
    out = []
    for lam in lambdas:
        r = int(refine_rule(lam))
        a, f, s = speed_factors(lam, problem.beta, True)
        check_stability(problem, coarse_dt / r, f)
        sf, sc = np.empty((n, n_snap + 1, d)), np.empty((n, n_snap + 1, d))
        sup, integ = np.empty(n), np.empty((n, len(obs), 2))
        div, pf = np.zeros(n, dtype=np.bool_), np.empty((n, d))

        def work(lo, hi, r=r, a=a, f=f, s=s, sf=sf, sc=sc, sup=sup, integ=integ, div=div, pf=pf):
            kernel = _coupled_chunk1 if d == 1 and USE_SCALAR_KERNELS else _coupled_chunk
            kernel(fam, X0[lo:hi], P0[lo:hi], traj[lo:hi], k0, k1, n_coarse, r, coarse_dt, a, f, s,
                   problem.beta, pk, kp, fpA, fpB, fO.pack, powO, use_div, snap_every, obs,
                   period, obs_period, DIVERGENCE_THRESHOLD,
                   sf[lo:hi], sc[lo:hi], sup[lo:hi], integ[lo:hi], div[lo:hi], pf[lo:hi])

        _parallel(work, n, threads)
        nd = int(div.sum())
        if nd > DIVERGED_BUDGET * n:
            raise DivergedError(f"lambda={lam}: {nd} of {n} trajectories diverged", count=nd)
        keep = ~div
        out.append(CoupledRun(lam, r, np.arange(n_snap + 1) * snap_every * coarse_dt, sf[keep], sc[keep], sup[keep],
                              integ[keep], tuple(observables), pf[keep], nd, period, T))
    return out


# ---------------------------------------------------------------------------
# BAOAB sampler (equilibrium sampling only)
# ---------------------------------------------------------------------------


def baoab_sample(problem: ProblemSpec, state: EnsembleState, dt: float, n_steps: int, lam: float = 1.0,
                 seed: int = 0) -> EnsembleState:
    """Equilibrium sampler for the underdamped family with constant quadratic mass.

    B/A half steps are the Hamiltonian flow; the O step is the exact
    frozen-coefficient OU flow ``dp = −λ D⁻¹ M⁻¹ p dt + sqrt(2λ/β) D^{-1/2} dW``
    computed by symmetric eigendecomposition. Not used for coupled runs.
    """
    if problem.family != "underdamped" or problem.kinetic.quadratic_mass is None:
        raise UnsupportedError("BAOAB is provided for the underdamped family with quadratic U")
    beta = problem.beta
    Minv = problem.kinetic.mass_inv
    Mh = spd_sqrt(problem.kinetic.quadratic_mass)
    Mih = np.linalg.inv(Mh)
    D = problem.fields["D"]
    q, p = state.positions.copy(), state.momenta.copy()
    n, d = q.shape
    for k in range(n_steps):
        p -= 0.5 * dt * problem.potential.gradient(q)
        q += 0.5 * dt * p @ Minv.T
        Dinv = D.evaluate(q)["inv"]
        S = Mih @ Dinv @ Mih
        w, U = np.linalg.eigh(S)
        y = np.einsum("ij,nj->ni", np.linalg.inv(Mh), p)
        yU = np.einsum("nji,nj->ni", U, y)
        xi = _rng.normals(seed, state.traj_ids, [k], d, _rng.TAG_MOMENTUM)[:, 0, :]
        c = np.exp(-lam * dt * w)
        yU = c * yU + np.sqrt((1 - c * c) / beta) * xi
        y = np.einsum("nij,nj->ni", U, yU)
        p = y @ Mh.T
        q += 0.5 * dt * p @ Minv.T
        q = problem.domain.wrap(q)
        p -= 0.5 * dt * problem.potential.gradient(q)
    return EnsembleState(q, p, state.t + n_steps * dt, lam, state.traj_ids)


# ---------------------------------------------------------------------------
# IO: snapshots and CSV summaries
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"KLSNAP01"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIIQIdd")  # magic, version, flags, N, d, t, lambda


def write_snapshot(path, state: EnsembleState) -> None:
    """Binary snapshot: 44-byte little-endian header then float64 arrays.

    Header fields: magic ``KLSNAP01`` (8 bytes), version (uint32), flags
    (uint32, bit 0 = momenta present), N (uint64), d (uint32), t (float64),
    lambda (float64, NaN when absent). Payload: positions ``N*d`` float64
    row-major, then momenta if flagged.
    """
    flags = 1 if state.momenta is not None else 0
    lam = float("nan") if state.lam is None else float(state.lam)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, flags, state.n, state.dim, float(state.t), lam))
        fh.write(np.ascontiguousarray(state.positions, dtype="<f8").tobytes())
        if flags:
            fh.write(np.ascontiguousarray(state.momenta, dtype="<f8").tobytes())


def read_snapshot(path) -> EnsembleState:
    with open(path, "rb") as fh:
        magic, version, flags, n, d, t, lam = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise ValidationError("not a snapshot file")
        pos = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        mom = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy() if flags & 1 else None
    return EnsembleState(pos, mom, t, None if math.isnan(lam) else lam)


def fmt(x) -> str:
    """17-significant-digit decimal rendering used in every CSV."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.17g}"


def summary_rows(runs: Sequence[CoupledRun]) -> list[list]:
    """``(lambda, t, mean_sq_error, sup_error_q05, q50, q95, n_diverged)`` per snapshot."""
    rows = []
    for run in runs:
        e2 = np.sum(run.diff() ** 2, axis=2)
        qs = np.quantile(run.sup_error, [0.05, 0.5, 0.95])
        for k, t in enumerate(run.times):
            rows.append([run.lam, t, float(np.mean(e2[:, k])), *qs, run.n_diverged])
    return rows


SUMMARY_HEADER = ["lambda", "t", "mean_sq_error", "sup_error_q05", "sup_error_q50", "sup_error_q95", "n_diverged"]
