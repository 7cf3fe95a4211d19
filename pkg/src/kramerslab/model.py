"""Static problem description: domains, potentials, kinetic energies, SPD fields.

Every coefficient is a closed-form descriptor. Each descriptor packs itself into
a flat ``float64`` array that the compiled evaluators below understand, so the
numpy-facing methods and the simulation kernels share one implementation.
"""
from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .trig import sincos
from .errors import (
    AssumptionError,
    ConfigurationError,
    NotSPDError,
    UnsupportedError,
    ValidationError,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

TWO_PI = 2.0 * math.pi

# ---------------------------------------------------------------------------
# Domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Configuration space: the torus ``(L T)^d`` or ``R^d``."""

    kind: str
    dim: int
    length: float = 0.0

    def __post_init__(self):
        if self.kind not in ("torus", "euclidean"):
            raise ValidationError(f"unknown domain kind {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValidationError("dim must be a positive integer")
        if self.kind == "torus" and not self.length > 0:
            raise ValidationError("torus edge length must be positive")
        if self.kind == "euclidean" and self.length != 0.0:
            raise ValidationError("euclidean domain takes no length")

    @classmethod
    def torus(cls, dim: int = 1, length: float = TWO_PI) -> "Domain":
        return cls("torus", int(dim), float(length))

    @classmethod
    def euclidean(cls, dim: int = 1) -> "Domain":
        return cls("euclidean", int(dim), 0.0)

    @property
    def is_torus(self) -> bool:
        return self.kind == "torus"

    def wrap(self, q):
        """Reduce positions to the fundamental cell ``[0, L)``."""
        q = np.asarray(q, dtype=float)
        if not self.is_torus:
            return q
        r = np.mod(q, self.length)
        # mod can return exactly L for tiny negative inputs
        return np.where(r >= self.length, 0.0, r)

    def displacement(self, a, b):
        """Minimal-image displacement ``a - b``."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if not self.is_torus:
            return diff
        return diff - self.length * np.round(diff / self.length)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        if self.is_torus:
            out["length"] = self.length
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        _check_keys(d, {"kind", "dim"}, {"length"}, "domain")
        return cls(d["kind"], int(d["dim"]), float(d.get("length", 0.0)))


@njit(cache=True, nogil=True)
def min_image(x, period):
    if period > 0.0:
        return x - period * np.floor(x / period + 0.5)
    return x


# ---------------------------------------------------------------------------
# Scalar potentials
# ---------------------------------------------------------------------------
# packed layout: [d, period, dw_c, n_pw, K (d*d), cos_a (d), n_pw x (amp, k_1..k_d)]


@njit(cache=True, nogil=True)
def pot_value(pk, q):
    d = int(pk[0])
    w = TWO_PI / pk[1]
    c = pk[2]
    npw = int(pk[3])
    o = 4
    v = 0.0
    for i in range(d):
        for j in range(d):
            v += 0.5 * q[i] * pk[o + i * d + j] * q[j]
    o += d * d
    for i in range(d):
        if pk[o + i] != 0.0:
            v += pk[o + i] * sincos(w * q[i])[1]
        if c != 0.0:
            v += c * (q[i] * q[i] - 1.0) ** 2
    o += d
    for m in range(npw):
        base = o + m * (d + 1)
        arg = 0.0
        for i in range(d):
            arg += pk[base + 1 + i] * q[i]
        v += pk[base] * sincos(w * arg)[1]
    return v


@njit(cache=True, nogil=True)
def pot_grad(pk, q, g):
    d = int(pk[0])
    w = TWO_PI / pk[1]
    c = pk[2]
    npw = int(pk[3])
    o = 4
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += pk[o + i * d + j] * q[j]
        g[i] = s
    o += d * d
    for i in range(d):
        if pk[o + i] != 0.0:
            g[i] -= pk[o + i] * w * sincos(w * q[i])[0]
        if c != 0.0:
            g[i] += 4.0 * c * q[i] * (q[i] * q[i] - 1.0)
    o += d
    for m in range(npw):
        base = o + m * (d + 1)
        arg = 0.0
        for i in range(d):
            arg += pk[base + 1 + i] * q[i]
        s = -pk[base] * w * sincos(w * arg)[0]
        for i in range(d):
            g[i] += s * pk[base + 1 + i]


@njit(cache=True, nogil=True)
def pot_hess(pk, q, H):
    d = int(pk[0])
    w = TWO_PI / pk[1]
    c = pk[2]
    npw = int(pk[3])
    o = 4
    for i in range(d):
        for j in range(d):
            H[i, j] = 0.5 * (pk[o + i * d + j] + pk[o + j * d + i])
    o += d * d
    for i in range(d):
        H[i, i] -= pk[o + i] * w * w * sincos(w * q[i])[1]
        if c != 0.0:
            H[i, i] += c * (12.0 * q[i] * q[i] - 4.0)
    o += d
    for m in range(npw):
        base = o + m * (d + 1)
        arg = 0.0
        for i in range(d):
            arg += pk[base + 1 + i] * q[i]
        s = -pk[base] * w * w * sincos(w * arg)[1]
        for i in range(d):
            for j in range(d):
                H[i, j] += s * pk[base + 1 + i] * pk[base + 1 + j]


@njit(cache=True)
def _pot_batch(pk, Q, val, grad, hess, want_hess):
    d = Q.shape[1]
    g = np.empty(d)
    H = np.empty((d, d))
    for n in range(Q.shape[0]):
        q = Q[n]
        val[n] = pot_value(pk, q)
        pot_grad(pk, q, g)
        grad[n] = g
        if want_hess:
            pot_hess(pk, q, H)
            hess[n] = H


@dataclass(frozen=True)
class PotentialTerm:
    """One closed-form term.

    kind
        ``quadratic`` (``matrix`` K, value ½qᵀKq), ``cosine`` (``amplitude`` a,
        value Σ aᵢ cos(2π qᵢ/L)), ``double_well`` (``scale`` c, value
        c Σ (qᵢ² − 1)²) or ``plane_wave`` (``amplitude`` a, integer
        ``wavevector`` k, value a cos(2π k·q/L)).
    """

    kind: str
    params: dict

    def to_dict(self) -> dict:
        return {"type": self.kind, **{k: _tolist(v) for k, v in self.params.items()}}


_TERM_KEYS = {
    "quadratic": {"matrix"},
    "cosine": {"amplitude"},
    "double_well": {"scale"},
    "plane_wave": {"amplitude", "wavevector"},
}


class ScalarPotential:
    """Sum of closed-form terms on a domain.

    Parameters
    ----------
    domain : Domain
    terms : sequence of PotentialTerm
    period : float, optional
        Wavelength ``L`` used by the trigonometric terms. Defaults to the
        torus edge length, or ``2π`` on ``R^d``.
    """

    def __init__(self, domain: Domain, terms: Sequence[PotentialTerm], period: float | None = None):
        self.domain = domain
        self.terms = tuple(terms)
        d = domain.dim
        if period is None:
            period = domain.length if domain.is_torus else TWO_PI
        self.period = float(period)
        if not self.period > 0:
            raise ValidationError("period must be positive")
        K = np.zeros((d, d))
        cos_a = np.zeros(d)
        dw = 0.0
        pws = []
        for t in self.terms:
            if t.kind not in _TERM_KEYS or set(t.params) != _TERM_KEYS[t.kind]:
                raise ValidationError(f"bad potential term {t!r}")
            if t.kind == "quadratic":
                Kt = np.asarray(t.params["matrix"], dtype=float).reshape(d, d)
                if not np.allclose(Kt, Kt.T, atol=1e-12):
                    raise ValidationError("quadratic term must be symmetric")
                K += Kt
            elif t.kind == "cosine":
                cos_a += np.broadcast_to(np.asarray(t.params["amplitude"], dtype=float), (d,))
            elif t.kind == "double_well":
                dw += float(t.params["scale"])
            else:
                k = np.asarray(t.params["wavevector"], dtype=float).reshape(d)
                if not np.all(k == np.round(k)):
                    raise ValidationError("plane-wave wavevector must be integer")
                pws.append(np.concatenate([[float(t.params["amplitude"])], k]))
        if dw < 0:
            raise ValidationError("double-well scale must be nonnegative")
        self.K, self.cos_a, self.dw_scale = K, cos_a, dw
        self.plane_waves = np.array(pws).reshape(len(pws), d + 1)
        if domain.is_torus:
            if np.any(K != 0) or dw != 0:
                raise ValidationError("polynomial terms are not periodic on the torus")
            ratio = domain.length / self.period
            if abs(ratio - round(ratio)) > 1e-12:
                raise ValidationError("trigonometric period must divide the torus length")
        self._pack = np.concatenate(
            [[d, self.period, dw, len(pws)], K.ravel(), cos_a, self.plane_waves.ravel()]
        )
        self._pack.setflags(write=False)

    # descriptors --------------------------------------------------------
    @classmethod
    def cosine(cls, domain, amplitude=1.0, period=None):
        return cls(domain, [PotentialTerm("cosine", {"amplitude": amplitude})], period)

    @classmethod
    def quadratic(cls, domain, K):
        return cls(domain, [PotentialTerm("quadratic", {"matrix": np.atleast_2d(K)})])

    @property
    def pack(self) -> np.ndarray:
        return self._pack

    @property
    def gradient_lipschitz(self) -> float:
        """Global Lipschitz constant of the gradient (``inf`` if none exists)."""
        if self.dw_scale > 0:
            return math.inf
        w = TWO_PI / self.period
        lip = float(np.linalg.norm(self.K, 2)) + float(np.max(np.abs(self.cos_a), initial=0.0)) * w * w
        for row in self.plane_waves:
            lip += abs(row[0]) * w * w * float(row[1:] @ row[1:])
        return lip

    @property
    def lower_bound(self) -> float:
        """A lower bound for V (exact for pure cosine sums), used by rejection sampling."""
        lb = -float(np.sum(np.abs(self.cos_a))) - float(np.sum(np.abs(self.plane_waves[:, 0])))
        if np.any(self.K != 0) or self.dw_scale > 0:
            lb_poly = 0.0 if self.dw_scale > 0 or np.all(np.linalg.eigvalsh(self.K) >= 0) else -math.inf
            lb += lb_poly
        return lb

    @property
    def confining(self) -> bool:
        """Sublevel sets are precompact (trivial on the torus)."""
        if self.domain.is_torus:
            return True
        if self.dw_scale > 0:
            return True
        return bool(np.all(np.linalg.eigvalsh(self.K) > 0))

    @property
    def is_gaussian(self) -> bool:
        return (
            not self.domain.is_torus
            and self.dw_scale == 0
            and not np.any(self.cos_a)
            and len(self.plane_waves) == 0
            and self.confining
        )

    # evaluation ---------------------------------------------------------
    def _batch(self, q, want_hess=False):
        Q, single = _as_batch(q, self.domain.dim)
        n, d = Q.shape
        val, grad = np.empty(n), np.empty((n, d))
        hess = np.empty((n, d, d) if want_hess else (1, d, d))
        _pot_batch(self._pack, Q, val, grad, hess, want_hess)
        return val, grad, hess, single

    def value(self, q):
        val, _, _, single = self._batch(q)
        return val[0] if single else val

    def gradient(self, q):
        _, grad, _, single = self._batch(q)
        return grad[0] if single else grad

    def hessian(self, q):
        _, _, hess, single = self._batch(q, True)
        return hess[0] if single else hess

    def to_dict(self) -> dict:
        return {"period": self.period, "terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, domain: Domain, d: dict) -> "ScalarPotential":
        _check_keys(d, {"terms"}, {"period"}, "potential")
        terms = []
        for t in d["terms"]:
            t = dict(t)
            kind = t.pop("type", None)
            if kind not in _TERM_KEYS:
                raise ConfigurationError(f"unknown potential term type {kind!r}")
            _check_keys(t, _TERM_KEYS[kind], set(), f"potential term {kind}")
            terms.append(PotentialTerm(kind, t))
        return cls(domain, terms, d.get("period"))


# ---------------------------------------------------------------------------
# Kinetic energy
# ---------------------------------------------------------------------------
# packed layout: [kind, d, M (d*d), Minv (d*d)] for quadratic (kind 0);
# [kind, d] for the relativistic U(p) = sqrt(1 + |p|^2) - 1 (kind 1)


@njit(cache=True, nogil=True)
def kin_grad(kp, p, g):
    d = int(kp[1])
    if kp[0] == 0.0:
        o = 2 + d * d
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += kp[o + i * d + j] * p[j]
            g[i] = s
    else:
        r = 1.0
        for i in range(d):
            r += p[i] * p[i]
        r = math.sqrt(r)
        for i in range(d):
            g[i] = p[i] / r


@njit(cache=True, nogil=True)
def kin_value(kp, p):
    d = int(kp[1])
    if kp[0] == 0.0:
        o = 2 + d * d
        v = 0.0
        for i in range(d):
            for j in range(d):
                v += 0.5 * p[i] * kp[o + i * d + j] * p[j]
        return v
    r = 1.0
    for i in range(d):
        r += p[i] * p[i]
    return math.sqrt(r) - 1.0


class KineticEnergy:
    """Even kinetic energy ``U(p)``.

    ``KineticEnergy.quadratic(M)`` gives ``U = ½ pᵀ M⁻¹ p``;
    ``KineticEnergy.relativistic(d)`` gives ``U = sqrt(1 + |p|²) − 1``.
    """

    def __init__(self, kind: str, dim: int, mass=None):
        self.kind = kind
        self.dim = int(dim)
        if kind == "quadratic":
            M = np.asarray(mass, dtype=float).reshape(self.dim, self.dim)
            check_spd(M)
            self.quadratic_mass = M
            self.mass_inv = np.linalg.inv(M)
            self._pack = np.concatenate([[0.0, self.dim], M.ravel(), self.mass_inv.ravel()])
        elif kind == "relativistic":
            self.quadratic_mass = None
            self.mass_inv = None
            self._pack = np.array([1.0, self.dim])
        else:
            raise ValidationError(f"unknown kinetic energy {kind!r}")
        self._pack.setflags(write=False)

    @classmethod
    def quadratic(cls, M=1.0, dim: int | None = None):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if dim is not None and M.shape == (1, 1):
            M = M[0, 0] * np.eye(dim)
        return cls("quadratic", M.shape[0], M)

    @classmethod
    def relativistic(cls, dim: int = 1):
        return cls("relativistic", dim)

    @property
    def pack(self):
        return self._pack

    def value(self, p):
        P, single = _as_batch(p, self.dim)
        out = np.array([kin_value(self._pack, row) for row in P])
        return out[0] if single else out

    def gradient(self, p):
        P, single = _as_batch(p, self.dim)
        out = np.empty_like(P)
        for n in range(P.shape[0]):
            kin_grad(self._pack, P[n], out[n])
        return out[0] if single else out

    def hessian(self, p):
        P, single = _as_batch(p, self.dim)
        if self.kind == "quadratic":
            out = np.broadcast_to(self.mass_inv, (P.shape[0], self.dim, self.dim)).copy()
        else:
            r = np.sqrt(1.0 + np.sum(P * P, axis=1))
            eye = np.eye(self.dim)
            out = eye / r[:, None, None] - P[:, :, None] * P[:, None, :] / r[:, None, None] ** 3
        return out[0] if single else out

    def to_dict(self) -> dict:
        if self.kind == "quadratic":
            return {"type": "quadratic", "mass": self.quadratic_mass.tolist()}
        return {"type": "relativistic", "dim": self.dim}

    @classmethod
    def from_dict(cls, d: dict, dim: int) -> "KineticEnergy":
        kind = d.get("type")
        if kind == "quadratic":
            _check_keys(d, {"type", "mass"}, set(), "kinetic")
            return cls("quadratic", dim, d["mass"])
        if kind == "relativistic":
            _check_keys(d, {"type"}, {"dim"}, "kinetic")
            return cls("relativistic", dim)
        raise ConfigurationError(f"unknown kinetic energy type {kind!r}")


# ---------------------------------------------------------------------------
# SPD matrix fields
# ---------------------------------------------------------------------------
# packed layout: [kind, d, period, ...]
#   kind 0 constant:  C, C^-1, C^1/2, C^-1/2 (4 x d*d)
#   kind 1 diagonal:  a (d), b (d), phase (d);  F_ii = a_i + b_i cos(2π q_i/L + phase_i)
#   kind 2 conformal: a, b (d), phase (d);       F = (a + Σ b_i cos(2π q_i/L + phase_i)) Id
# Evaluators return G = F^power for power in {1, 2, -1} with its inverse,
# square root, inverse square root and derivative tensor dG[k] = ∂_k G.


@njit(cache=True, nogil=True)
def _matmul(A, B, out):
    n = A.shape[0]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += A[i, k] * B[k, j]
            out[i, j] = s


@njit(cache=True, nogil=True, inline="always")
def _power(f, df, power):
    """``(f^power, d(f^power))`` for power in {1, 2, -1}."""
    if power == 1:
        return f, df
    if power == 2:
        return f * f, 2.0 * f * df
    return 1.0 / f, -df / (f * f)


@njit(cache=True, nogil=True)
def field_eval(fp, q, power, G, Ginv, Gsqrt, Ginvsqrt, dG):
    kind = int(fp[0])
    d = int(fp[1])
    w = TWO_PI / fp[2]
    for i in range(d):
        for j in range(d):
            G[i, j] = 0.0
            Ginv[i, j] = 0.0
            Gsqrt[i, j] = 0.0
            Ginvsqrt[i, j] = 0.0
            for k in range(d):
                dG[k, i, j] = 0.0
    if kind == 0:
        s = d * d
        C = fp[3:3 + s].reshape((d, d))
        Ci = fp[3 + s:3 + 2 * s].reshape((d, d))
        Cs = fp[3 + 2 * s:3 + 3 * s].reshape((d, d))
        Cis = fp[3 + 3 * s:3 + 4 * s].reshape((d, d))
        if power == 1:
            G[:, :] = C
            Ginv[:, :] = Ci
            Gsqrt[:, :] = Cs
            Ginvsqrt[:, :] = Cis
        elif power == -1:
            G[:, :] = Ci
            Ginv[:, :] = C
            Gsqrt[:, :] = Cis
            Ginvsqrt[:, :] = Cs
        else:
            _matmul(C, C, G)
            _matmul(Ci, Ci, Ginv)
            Gsqrt[:, :] = C
            Ginvsqrt[:, :] = Ci
        return
    if kind == 1:
        for i in range(d):
            a = fp[3 + i]
            b = fp[3 + d + i]
            ph = fp[3 + 2 * d + i]
            sn, cs = sincos(w * q[i] + ph)
            f = a + b * cs
            g, dg = _power(f, -b * w * sn, power)
            G[i, i] = g
            Ginv[i, i] = 1.0 / g
            rg = math.sqrt(g)
            Gsqrt[i, i] = rg
            Ginvsqrt[i, i] = 1.0 / rg
            dG[i, i, i] = dg
        return
    f = fp[3]
    for i in range(d):
        f += fp[4 + i] * sincos(w * q[i] + fp[4 + d + i])[1]
    g, _ = _power(f, 0.0, power)
    rg = math.sqrt(g)
    for i in range(d):
        G[i, i] = g
        Ginv[i, i] = 1.0 / g
        Gsqrt[i, i] = rg
        Ginvsqrt[i, i] = 1.0 / rg
    for k in range(d):
        dfk = -fp[4 + k] * w * sincos(w * q[k] + fp[4 + d + k])[0]
        c = _power(f, dfk, power)[1]
        for i in range(d):
            dG[k, i, i] = c


@njit(cache=True, nogil=True)
def div_from_derivative(dG, out):
    d = dG.shape[1]
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += dG[j, i, j]
        out[i] = s


# ---------------------------------------------------------------------------
# scalar fast paths for one-dimensional problems
# ---------------------------------------------------------------------------
# Same packs as above, evaluated without workspace arrays. These are what the
# long d = 1 simulation loops call; tests check them against the general forms.


@njit(cache=True, nogil=True, inline="always")
def pot_grad1(pk, x):
    w = TWO_PI / pk[1]
    g = pk[4] * x
    if pk[5] != 0.0:
        g -= pk[5] * w * sincos(w * x)[0]
    if pk[2] != 0.0:
        g += 4.0 * pk[2] * x * (x * x - 1.0)
    for m in range(int(pk[3])):
        k = pk[7 + 2 * m]
        g -= pk[6 + 2 * m] * w * k * sincos(w * k * x)[0]
    return g


@njit(cache=True, nogil=True, inline="always")
def kin_grad1(kp, p):
    if kp[0] == 0.0:
        return kp[3] * p
    return p / math.sqrt(1.0 + p * p)


@njit(cache=True, nogil=True, inline="always")
def field1(fp, x, power):
    """``(g, g')`` of a one-dimensional field raised to ``power``."""
    if fp[0] == 0.0:
        if power == 1:
            return fp[3], 0.0
        if power == 2:
            return fp[3] * fp[3], 0.0
        return fp[4], 0.0
    w = TWO_PI / fp[2]
    sn, cs = sincos(w * x + fp[5])
    return _power(fp[3] + fp[4] * cs, -fp[4] * w * sn, power)


@njit(cache=True)
def _field_batch(fp, Q, power, G, Ginv, Gs, Gis, dG, div):
    d = Q.shape[1]
    g = np.empty((d, d))
    gi = np.empty((d, d))
    gs = np.empty((d, d))
    gis = np.empty((d, d))
    dg = np.empty((d, d, d))
    dv = np.empty(d)
    for n in range(Q.shape[0]):
        field_eval(fp, Q[n], power, g, gi, gs, gis, dg)
        div_from_derivative(dg, dv)
        G[n] = g
        Ginv[n] = gi
        Gs[n] = gs
        Gis[n] = gis
        dG[n] = dg
        div[n] = dv


class MatrixField:
    """Uniformly elliptic SPD matrix field ``q -> F(q)``.

    Built-ins: ``constant`` (SPD matrix C), ``diagonal`` (entries
    ``aᵢ + bᵢ cos(2π qᵢ/L + φᵢ)`` with ``aᵢ > |bᵢ|``), ``conformal``
    (``(a + Σ bᵢ cos(2π qᵢ/L + φᵢ)) Id`` with ``a > Σ|bᵢ|``).

    Parameters
    ----------
    kind : str
    dim : int
    params : dict
        ``matrix`` for constant; ``a``, ``b``, ``phase`` otherwise.
    period : float
        Wavelength ``L`` of the trigonometric entries.
    """

    def __init__(self, kind: str, dim: int, params: dict, period: float = TWO_PI):
        self.kind = kind
        self.dim = d = int(dim)
        self.period = float(period)
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        head = [0.0, d, self.period]
        if kind == "constant":
            _check_keys(params, {"matrix"}, set(), "constant field")
            C = self.params["matrix"].reshape(d, d)
            check_spd(C)
            w, U = np.linalg.eigh(C)
            parts = [C, U @ np.diag(1 / w) @ U.T, U @ np.diag(np.sqrt(w)) @ U.T,
                     U @ np.diag(1 / np.sqrt(w)) @ U.T]
            self._pack = np.concatenate([head] + [p.ravel() for p in parts])
            self._bounds = (float(w.min()), float(w.max()))
        elif kind == "diagonal":
            _check_keys(params, {"a", "b"}, {"phase"}, "diagonal field")
            a = np.broadcast_to(self.params["a"], (d,)).astype(float)
            b = np.broadcast_to(self.params["b"], (d,)).astype(float)
            ph = np.broadcast_to(self.params.get("phase", np.zeros(1)), (d,)).astype(float)
            if np.any(a <= np.abs(b)):
                raise AssumptionError("diagonal field needs a_i > |b_i| (uniform ellipticity)")
            self.params = {"a": a, "b": b, "phase": ph}
            head[0] = 1.0
            self._pack = np.concatenate([head, a, b, ph])
            self._bounds = (float(np.min(a - np.abs(b))), float(np.max(a + np.abs(b))))
        elif kind == "conformal":
            _check_keys(params, {"a", "b"}, {"phase"}, "conformal field")
            a = float(np.asarray(self.params["a"]).reshape(()))
            b = np.broadcast_to(self.params["b"], (d,)).astype(float)
            ph = np.broadcast_to(self.params.get("phase", np.zeros(1)), (d,)).astype(float)
            if a <= np.sum(np.abs(b)):
                raise AssumptionError("conformal field needs a > sum |b_i| (uniform ellipticity)")
            self.params = {"a": np.array(a), "b": b, "phase": ph}
            head[0] = 2.0
            self._pack = np.concatenate([head, [a], b, ph])
            self._bounds = (a - float(np.sum(np.abs(b))), a + float(np.sum(np.abs(b))))
        else:
            raise ValidationError(f"unknown matrix field kind {kind!r}")
        if not self.period > 0:
            raise ValidationError("period must be positive")
        self._pack.setflags(write=False)

    @classmethod
    def constant(cls, C):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        return cls("constant", C.shape[0], {"matrix": C})

    @classmethod
    def diagonal(cls, a, b, phase=0.0, dim: int = 1, period: float = TWO_PI):
        return cls("diagonal", dim, {"a": a, "b": b, "phase": phase}, period)

    @classmethod
    def conformal(cls, a, b, phase=0.0, dim: int = 1, period: float = TWO_PI):
        return cls("conformal", dim, {"a": a, "b": b, "phase": phase}, period)

    @property
    def pack(self):
        return self._pack

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or not np.any(self.params.get("b", 0.0))

    def spectrum_bounds(self, power: int = 1) -> tuple[float, float]:
        lo, hi = self._bounds
        if power == -1:
            return 1.0 / hi, 1.0 / lo
        return lo ** power, hi ** power

    def ellipticity(self, power: int = 1) -> float:
        """Smallest ``M_D >= 1`` with ``Id/M_D <= F^power <= M_D Id``."""
        lo, hi = self.spectrum_bounds(power)
        return max(1.0, hi, 1.0 / lo)

    def evaluate(self, q, power: int = 1) -> dict:
        """All derived quantities of ``G = F^power`` at a batch of points."""
        if power not in (1, 2, -1):
            raise ValidationError("power must be 1, 2 or -1")
        Q, single = _as_batch(q, self.dim)
        n, d = Q.shape
        G, Gi, Gs, Gis = (np.empty((n, d, d)) for _ in range(4))
        dG, div = np.empty((n, d, d, d)), np.empty((n, d))
        _field_batch(self._pack, Q, power, G, Gi, Gs, Gis, dG, div)
        out = {"value": G, "inv": Gi, "sqrt": Gs, "invsqrt": Gis, "derivative": dG, "div": div}
        if single:
            out = {k: v[0] for k, v in out.items()}
        return out

    def value(self, q, power: int = 1):
        return self.evaluate(q, power)["value"]

    def derivative(self, q, power: int = 1):
        """Tensor ``dF[k, i, j] = ∂_k F_ij``."""
        return self.evaluate(q, power)["derivative"]

    def logdet(self, q):
        return np.log(np.linalg.det(self.value(q)))

    def grad_logdet(self, q):
        ev = self.evaluate(q)
        return np.einsum("...ij,...kji->...k", ev["inv"], ev["derivative"])

    def to_dict(self) -> dict:
        out = {"type": self.kind}
        if self.kind == "constant":
            out["matrix"] = self.params["matrix"].reshape(self.dim, self.dim).tolist()
        else:
            out.update(a=_tolist(self.params["a"]), b=_tolist(self.params["b"]),
                       phase=_tolist(self.params["phase"]), period=self.period)
        return out

    @classmethod
    def from_dict(cls, d: dict, dim: int) -> "MatrixField":
        d = dict(d)
        kind = d.pop("type", None)
        if kind == "constant":
            _check_keys(d, {"matrix"}, set(), "constant field")
            return cls("constant", dim, d)
        if kind in ("diagonal", "conformal"):
            _check_keys(d, {"a", "b"}, {"phase", "period"}, f"{kind} field")
            period = d.pop("period", TWO_PI)
            return cls(kind, dim, d, period)
        raise ConfigurationError(f"unknown matrix field type {kind!r}")


def spd_sqrt(m) -> np.ndarray:
    """Positive square root of an SPD matrix by symmetric eigendecomposition.

    Raises
    ------
    ValidationError
        If ``m`` is not symmetric to 1e-10.
    NotSPDError
        If an eigenvalue is not positive.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    w, U = _checked_eigh(m)
    return (U * np.sqrt(w)) @ U.T


def check_spd(m) -> None:
    _checked_eigh(np.atleast_2d(np.asarray(m, dtype=float)))


def _checked_eigh(m):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > 1e-10 * scale:
        raise ValidationError("matrix is not symmetric")
    w, U = np.linalg.eigh(0.5 * (m + m.T))
    if np.any(w <= 0):
        raise NotSPDError(f"matrix is not positive definite (min eigenvalue {w.min():.3g})")
    return w, U


def div_row(field_: MatrixField, q, power: int = 1) -> np.ndarray:
    """Row-wise divergence ``(div F)_k = Σ_j ∂_j F_kj``."""
    return field_.evaluate(q, power)["div"]


# ---------------------------------------------------------------------------
# Gibbs measure and the momentum average
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GibbsSpec:
    """Gibbs measure ``μ ∝ exp(−β(V(q) + U(p)))`` with marginals ν (q) and κ (p)."""

    beta: float
    potential: ScalarPotential
    kinetic: KineticEnergy

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be positive")

    @property
    def domain(self) -> Domain:
        return self.potential.domain

    def log_density(self, q, p) -> np.ndarray:
        return -self.beta * (self.potential.value(q) + self.kinetic.value(p))

    def momentum_covariance(self) -> np.ndarray:
        if self.kinetic.quadratic_mass is None:
            raise UnsupportedError("momentum marginal is Gaussian only for quadratic U")
        return self.kinetic.quadratic_mass / self.beta


def gauss_hermite_nodes(cov: np.ndarray, order: int = 16):
    """Tensor Gauss–Hermite nodes and weights for ``N(0, cov)``."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(TWO_PI)
    d = cov.shape[0]
    grids = np.meshgrid(*([x] * d), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)
    W = np.ones(Z.shape[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        W = W * g.ravel()
    return Z @ spd_sqrt(cov).T, W


def pi0_project(f: Callable, gibbs: GibbsSpec, q, quad_order: int = 16):
    """Partial average ``∫ f(q, p) κ(dp)`` by tensor Gauss–Hermite quadrature.

    ``f(q, P)`` receives one position and an ``(n_nodes, d)`` momentum array and
    returns an array with leading axis ``n_nodes``.
    """
    if gibbs.kinetic.quadratic_mass is None:
        raise UnsupportedError("Gauss-Hermite averaging requires a quadratic kinetic energy")
    P, W = gauss_hermite_nodes(gibbs.momentum_covariance(), quad_order)
    vals = np.asarray(f(np.asarray(q, dtype=float), P), dtype=float)
    return np.tensordot(W, vals, axes=(0, 0))


def remainder_psi(field_: MatrixField, kinetic: KineticEnergy, beta: float, q, P) -> np.ndarray:
    """``ψ(q, p) = D′(q)[∇U(p)] p − (1/β) div D(q)`` for a batch of momenta."""
    ev = field_.evaluate(q)
    gU = kinetic.gradient(np.atleast_2d(P))
    P = np.atleast_2d(P)
    # D′(q)[h] = Σ_k h_k ∂_k D
    term = np.einsum("nk,kij,nj->ni", gU, ev["derivative"], P)
    return term - ev["div"] / beta


def noise_drift_identity_check(field_: MatrixField, gibbs: GibbsSpec, q, quad_order: int = 16) -> float:
    """Max-norm gap between ``Π₀(D′[∇U] p)`` and ``(1/β) div D`` at ``q``."""
    ev = field_.evaluate(q)

    def integrand(_q, P):
        return np.einsum("nk,kij,nj->ni", gibbs.kinetic.gradient(P), ev["derivative"], P)

    lhs = pi0_project(integrand, gibbs, q, quad_order)
    return float(np.max(np.abs(lhs - ev["div"] / gibbs.beta)))


# ---------------------------------------------------------------------------
# Observables shared with the kernels
# ---------------------------------------------------------------------------

OBSERVABLES = {"cos": 0, "min_abs": 1, "clipped_square": 2}
OBSERVABLE_LIPSCHITZ = {"cos": lambda period: TWO_PI / period, "min_abs": lambda period: 1.0,
                        "clipped_square": lambda period: 2.0}


@njit(cache=True, nogil=True)
def observable(code, q, period, torus):
    """Registered Lipschitz observables of the first coordinate.

    ``period`` is the wavelength of ``cos``; on the torus the other observables
    use the minimal-image coordinate.
    """
    x = q[0]
    if code == 0:
        return math.cos(TWO_PI * x / period)
    if torus:
        x = x - period * np.floor(x / period + 0.5)
    if code == 1:
        return min(abs(x), 1.0)
    return min(x * x, 1.0)


def observable_values(name: str, q, domain: Domain) -> np.ndarray:
    Q, _ = _as_batch(q, domain.dim)
    code = OBSERVABLES[name]
    period = domain.length if domain.is_torus else TWO_PI
    return np.array([observable(code, row, period, domain.is_torus) for row in Q])


def gibbs_average(potential: ScalarPotential, beta: float, name: str, n_grid: int = 1 << 15) -> float:
    """``E_ν[φ]`` for a registered observable on a one-dimensional torus (trapezoid rule)."""
    dom = potential.domain
    if dom.dim != 1 or not dom.is_torus:
        raise UnsupportedError("quadrature averages need a one-dimensional torus")
    q = (np.arange(n_grid) + 0.5) * (dom.length / n_grid)
    V = potential.value(q[:, None])
    w = np.exp(-beta * (V - V.min()))
    return float(observable_values(name, q[:, None], dom) @ w / w.sum())

# ---------------------------------------------------------------------------
# Problem descriptors
# ---------------------------------------------------------------------------

FAMILIES = ("overdamped", "underdamped", "cg", "mass")
_FIELD_ROLES = {"overdamped": {"D"}, "underdamped": {"D"}, "cg": {"A"}, "mass": {"M", "Sigma"}}


@dataclass(frozen=True)
class ProblemSpec:
    """A full dynamics instance.

    family
        ``overdamped`` / ``underdamped`` use field ``D``; ``cg`` uses the
        coarse-grained coefficient ``A`` (overdamped limit with ``D = A²``);
        ``mass`` uses a position-dependent mass ``M`` and friction ``Sigma``
        (overdamped limit with ``D = Sigma⁻¹``).
    """

    domain: Domain
    potential: ScalarPotential
    kinetic: KineticEnergy
    beta: float
    family: str
    fields: dict = field(default_factory=dict)
    name: str = "custom"
    strict: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if set(self.fields) != _FIELD_ROLES[self.family]:
            raise ValidationError(f"family {self.family} needs fields {_FIELD_ROLES[self.family]}")
        if self.potential.domain != self.domain:
            raise ValidationError("potential lives on a different domain")
        for f in self.fields.values():
            if f.dim != self.domain.dim:
                raise ValidationError("field dimension does not match the domain")
            if self.domain.is_torus and f.kind != "constant":
                ratio = self.domain.length / f.period
                if abs(ratio - round(ratio)) > 1e-12:
                    raise ValidationError("field period must divide the torus length")
        if self.kinetic.dim != self.domain.dim:
            raise ValidationError("kinetic energy dimension does not match the domain")
        if self.family in ("cg", "mass") and (
            self.kinetic.quadratic_mass is None or not np.allclose(self.kinetic.quadratic_mass, np.eye(self.domain.dim))
        ):
            raise ValidationError(f"family {self.family} uses the unit quadratic kinetic energy")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if self.strict:
            issues = assumption_issues(self)
            if issues:
                raise AssumptionError("; ".join(issues))

    @property
    def gibbs(self) -> GibbsSpec:
        return GibbsSpec(self.beta, self.potential, self.kinetic)

    @property
    def limit_field(self) -> tuple[MatrixField, int]:
        """Field and power giving the overdamped diffusion ``D``."""
        if self.family in ("overdamped", "underdamped"):
            return self.fields["D"], 1
        if self.family == "cg":
            return self.fields["A"], 2
        return self.fields["Sigma"], -1

    @property
    def period(self) -> float:
        return self.domain.length if self.domain.is_torus else 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "beta": self.beta,
            "domain": self.domain.to_dict(),
            "potential": self.potential.to_dict(),
            "kinetic": self.kinetic.to_dict(),
            "fields": {k: v.to_dict() for k, v in sorted(self.fields.items())},
        }

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "ProblemSpec":
        _check_keys(d, {"family", "beta", "domain", "potential", "kinetic", "fields"}, {"name"}, "problem")
        dom = Domain.from_dict(d["domain"])
        return cls(
            domain=dom,
            potential=ScalarPotential.from_dict(dom, d["potential"]),
            kinetic=KineticEnergy.from_dict(d["kinetic"], dom.dim),
            beta=float(d["beta"]),
            family=d["family"],
            fields={k: MatrixField.from_dict(v, dom.dim) for k, v in d["fields"].items()},
            name=d.get("name", "custom"),
            strict=strict,
        )

    def to_toml(self) -> str:
        return tomli_w.dumps({"problem": self.to_dict()})

    @classmethod
    def from_toml(cls, text: str, strict: bool = True) -> "ProblemSpec":
        data = tomllib.loads(text)
        _check_keys(data, {"problem"}, set(), "config")
        return cls.from_dict(data["problem"], strict)

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]

    def with_family(self, family: str, fields: dict | None = None, **kw) -> "ProblemSpec":
        kw.setdefault("name", self.name)
        return ProblemSpec(self.domain, self.potential, kw.pop("kinetic", self.kinetic), kw.pop("beta", self.beta),
                           family, fields if fields is not None else self.fields, strict=self.strict, **kw)


def assumption_issues(problem: ProblemSpec) -> list[str]:
    """Analytic hypotheses that are decidable from the descriptors."""
    issues = []
    V = problem.potential
    if not math.isfinite(V.gradient_lipschitz):
        issues.append("potential gradient is not globally Lipschitz")
    if not V.confining:
        issues.append("potential has non-compact sublevel sets")
    if problem.kinetic.quadratic_mass is None:
        issues.append("kinetic energy is not quadratic")
    return issues


# ---------------------------------------------------------------------------
# Built-in problems
# ---------------------------------------------------------------------------


def default_problem(family: str = "underdamped") -> ProblemSpec:
    """``2π``-torus, ``V = cos q``, ``β = 1``, ``M = 1`` with the family's stock coefficients.

    D = 2 + sin q (overdamped/underdamped), A = 1 + 0.3 cos z (cg),
    m = 2 + sin q with σ = 1 + 0.5 cos q (mass).
    """
    dom = Domain.torus(1)
    V = ScalarPotential.cosine(dom, 1.0)
    U = KineticEnergy.quadratic(1.0)
    if family in ("overdamped", "underdamped"):
        fields = {"D": sine_field(2.0, 1.0)}
    elif family == "cg":
        fields = {"A": MatrixField.diagonal(1.0, 0.3)}
    elif family == "mass":
        fields = {"M": sine_field(2.0, 1.0), "Sigma": MatrixField.diagonal(1.0, 0.5)}
    else:
        raise ValidationError(f"unknown family {family!r}")
    return ProblemSpec(dom, V, U, 1.0, family, fields, name=f"default-{family}")


def sine_field(a: float, b: float, dim: int = 1, period: float = TWO_PI) -> MatrixField:
    """Diagonal field ``a + b sin(2π q/L)``."""
    return MatrixField.diagonal(a, b, -math.pi / 2, dim, period)


# ---------------------------------------------------------------------------
# Runtime validation helpers
# ---------------------------------------------------------------------------


def sample_positions(domain: Domain, n: int, rng: np.random.Generator, box: float = 3.0) -> np.ndarray:
    if domain.is_torus:
        return rng.uniform(0.0, domain.length, size=(n, domain.dim))
    return rng.uniform(-box, box, size=(n, domain.dim))


def check_gradient_fd(potential: ScalarPotential, n: int = 100, seed: int = 0, h: float = 1e-5) -> float:
    """Largest relative gap between the gradient and central finite differences."""
    rng = np.random.default_rng(seed)
    Q = sample_positions(potential.domain, n, rng)
    g = potential.gradient(Q)
    fd = np.empty_like(g)
    for k in range(Q.shape[1]):
        e = np.zeros(Q.shape[1])
        e[k] = h
        fd[:, k] = (potential.value(Q + e) - potential.value(Q - e)) / (2 * h)
    return float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g))))


def check_field_fd(field_: MatrixField, domain: Domain, n: int = 100, seed: int = 0, h: float = 1e-5,
                   power: int = 1) -> float:
    rng = np.random.default_rng(seed)
    Q = sample_positions(domain, n, rng)
    dG = field_.derivative(Q, power)
    err = 0.0
    for k in range(Q.shape[1]):
        e = np.zeros(Q.shape[1])
        e[k] = h
        fd = (field_.value(Q + e, power) - field_.value(Q - e, power)) / (2 * h)
        err = max(err, float(np.max(np.abs(fd - dG[:, k]) / np.maximum(1.0, np.abs(dG[:, k])))))
    return err


def check_ellipticity(field_: MatrixField, domain: Domain, n: int = 1000, seed: int = 0, power: int = 1) -> bool:
    rng = np.random.default_rng(seed)
    G = field_.value(sample_positions(domain, n, rng), power)
    MD = field_.ellipticity(power)
    w = np.linalg.eigvalsh(G)
    return bool(np.all(w >= 1.0 / MD - 1e-12) and np.all(w <= MD + 1e-12))


# ---------------------------------------------------------------------------
# small utilities
# ---------------------------------------------------------------------------


def _as_batch(x, dim: int):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1), True
    if a.ndim == 1:
        if dim == 1 and a.shape[0] != 1:
            return a.reshape(-1, 1), False
        return np.ascontiguousarray(a.reshape(1, dim)), True
    return np.ascontiguousarray(a.reshape(-1, dim)), False


def _tolist(v):
    a = np.asarray(v)
    return a.tolist() if a.ndim else float(a)


def _check_keys(d, required: set, optional: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected a table")
    missing = required - set(d)
    unknown = set(d) - required - optional
    if missing:
        raise ConfigurationError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
