"""First-passage times of the queue-depletion processes.

Three processes are covered:

``B[v, kappa, mu, theta]``
    birth-death chain started at ``v`` with birth rate ``kappa`` and death
    rate ``mu + i*theta`` in state ``i``;
``C[v, l, mu, theta]``
    pure-death chain started at ``l + v`` with death rate
    ``mu + max(0, i - l)*theta``;
``A[v, l, kappa, mu, theta]``
    the ask queue seen by an agent holding ``l`` units behind ``v`` priority
    units: ``C`` runs first while a hidden M/M/inf queue of later orders
    builds up, then that queue has to deplete as a ``B`` chain.

Densities and distribution functions come from Laplace transforms inverted
with the Euler (Abate-Whitt) algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import comb
from scipy.stats import poisson

from .errors import AccuracyLoss, NonConvergence, PivotBreakdown

TINY = 1e-30

Transform = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# Process descriptions


@dataclass(frozen=True)
class BirthDeathSpec:
    """A ``B`` or ``C`` process; ``l`` is ignored for ``B``, ``kappa`` for ``C``."""

    kind: str
    v: int
    mu: float
    theta: float
    kappa: float = 0.0
    l: int = 0

    def __post_init__(self):
        if self.kind not in ("B", "C"):
            raise ValueError(f"kind must be 'B' or 'C', got {self.kind!r}")
        if self.v < 1 or self.l < 0:
            raise ValueError("need v >= 1 and l >= 0")
        if not (self.mu > 0 and self.theta > 0 and self.kappa >= 0):
            raise ValueError("rates must be positive")

    @property
    def v0(self) -> int:
        return self.v if self.kind == "B" else self.l + self.v

    def birth(self, i: int) -> float:
        return self.kappa if self.kind == "B" else 0.0

    def death(self, i: int) -> float:
        if self.kind == "B":
            return self.mu + i * self.theta
        return self.mu + max(0, i - self.l) * self.theta

    def transform(self, s):
        if self.kind == "B":
            return laplace_fpt_B(self.v, self.kappa, self.mu, self.theta, s)
        return laplace_fpt_C(self.v, self.l, self.mu, self.theta, s)

    def pdf_at_zero(self) -> float:
        return self.death(1) if self.v0 == 1 else 0.0


# --------------------------------------------------------------------------
# Continued fractions


def _coef(c, k):
    return c(k) if callable(c) else c[k]


def continued_fraction(a, b, tol: float = 1e-12, max_terms: int = 10_000) -> complex:
    """Value of ``a0/(b0 + a1/(b1 + a2/(b2 + ...)))`` by the modified Lentz method.

    ``a`` and ``b`` are sequences or callables ``k -> coefficient``.  A finite
    sequence shorter than ``max_terms`` is treated as terminating.
    """
    n_avail = max_terms
    if not callable(a):
        n_avail = min(n_avail, len(a))
    if not callable(b):
        n_avail = min(n_avail, len(b))
    a0 = _coef(a, 0)
    if a0 == 0:
        return 0j
    f = complex(_coef(b, 0))
    if f == 0:
        f = TINY
    C, D = f, 0j
    for k in range(1, n_avail):
        ak, bk = _coef(a, k), _coef(b, k)
        if ak == 0:
            break
        D = bk + ak * D
        if D == 0:
            D = TINY
        C = bk + ak / C
        if C == 0:
            C = TINY
        D = 1.0 / D
        delta = C * D
        f *= delta
        if not np.isfinite(f):
            raise PivotBreakdown(f"Lentz iterate became non-finite at term {k}")
        if abs(delta - 1.0) < tol:
            break
    else:
        if n_avail == max_terms:
            raise NonConvergence(f"continued fraction did not converge in {max_terms} terms")
    out = a0 / f
    if not np.isfinite(out):
        raise PivotBreakdown("continued fraction evaluated to a non-finite value")
    return complex(out)


def _bd_tail(n: int, kappa: float, mu: float, theta: float, s: np.ndarray,
             tol: float = 1e-13, max_terms: int = 10_000) -> np.ndarray:
    """Vectorised Lentz for ``h_n(s)`` (see :func:`bd_ratios`)."""
    s = np.asarray(s, dtype=complex)
    f = kappa + mu + n * theta + s
    f = np.where(f == 0, TINY, f)
    C = f.copy()
    D = np.zeros_like(f)
    active = np.ones(f.shape, dtype=bool)
    for k in range(1, max_terms):
        mu_k = mu + (n + k) * theta
        ak = -kappa * mu_k
        bk = kappa + mu_k + s
        D = bk + ak * D
        D = np.where(D == 0, TINY, D)
        C = bk + ak / C
        C = np.where(C == 0, TINY, C)
        D = 1.0 / D
        delta = C * D
        f = np.where(active, f * delta, f)
        active &= np.abs(delta - 1.0) >= tol
        if not active.any():
            break
    else:
        raise NonConvergence(f"birth-death fraction at level {n} did not converge")
    out = (mu + n * theta) / f
    if not np.all(np.isfinite(out)):
        raise PivotBreakdown("birth-death fraction produced non-finite values")
    return out


def bd_ratios(n_max: int, kappa: float, mu: float, theta: float, s) -> np.ndarray:
    """One-step transforms ``h_1(s) .. h_n_max(s)`` of a ``B`` chain.

    ``h_n`` is the transform of the time to go from ``n`` to ``n - 1``; it
    solves ``h_n = mu_n / (kappa + mu_n + s - kappa * h_{n+1})`` with
    ``mu_n = mu + n * theta``.  The deepest level is evaluated as a continued
    fraction and the rest by the backward recursion.
    """
    s = np.asarray(s, dtype=complex)
    h = np.empty((n_max,) + s.shape, dtype=complex)
    h[n_max - 1] = _bd_tail(n_max, kappa, mu, theta, s)
    for n in range(n_max - 1, 0, -1):
        mu_n = mu + n * theta
        h[n - 1] = mu_n / (kappa + mu_n + s - kappa * h[n])
    return h


# --------------------------------------------------------------------------
# Laplace transforms


def laplace_fpt_B(v: int, kappa: float, mu: float, theta: float, s):
    """Transform of the depletion time of ``B[v, kappa, mu, theta]``."""
    if v < 1:
        raise ValueError("v must be >= 1")
    scalar = np.ndim(s) == 0
    h = bd_ratios(v, kappa, mu, theta, np.atleast_1d(s))
    out = np.prod(h, axis=0)
    return complex(out[0]) if scalar else out


def laplace_fpt_C(v: int, l: int, mu: float, theta: float, s):
    """Transform of the depletion time of ``C[v, l, mu, theta]`` (hypoexponential)."""
    if v < 1 or l < 0:
        raise ValueError("need v >= 1 and l >= 0")
    s = np.asarray(s, dtype=complex)
    out = (mu / (mu + s)) ** l
    for n in range(1, v + 1):
        out = out * (mu + n * theta) / (mu + n * theta + s)
    return complex(out) if out.ndim == 0 else out


def default_g_cap(kappa: float, theta: float) -> int:
    r = kappa / theta
    return int(math.ceil(r + 10.0 * math.sqrt(r) + 15.0))


def laplace_fpt_A_family(v_max: int, l: int, kappa: float, mu: float, theta: float,
                         s, g_cap: int | None = None) -> np.ndarray:
    """Transforms of ``A[v, l]`` for ``v = 1..v_max``, shape ``(v_max,) + s.shape``.

    The pair (C-phase count ``c``, queue behind the agent ``g``) is a Markov
    chain; its absorption transform ``phi(c, g)`` satisfies a tridiagonal
    system in ``g`` for each ``c``, with ``phi(0, g)`` the ``B[g]`` transform.
    ``g`` is truncated where the M/M/inf occupancy is negligible.
    """
    if l < 0 or v_max < 1:
        raise ValueError("need v_max >= 1 and l >= 0")
    s = np.asarray(s, dtype=complex)
    shape = s.shape
    s = s.reshape(-1)
    G = default_g_cap(kappa, theta) if g_cap is None else int(g_cap)
    h = bd_ratios(G, kappa, mu, theta, s)
    phi = np.empty((G + 1, s.size), dtype=complex)
    phi[0] = 1.0
    phi[1:] = np.cumprod(h, axis=0)

    g = np.arange(G + 1, dtype=float)[:, None]
    birth = np.full((G + 1, 1), kappa)
    birth[G] = 0.0
    lower = g * theta
    out = np.empty((v_max, s.size), dtype=complex)
    cp = np.empty_like(phi)
    dp = np.empty_like(phi)
    for c in range(1, l + v_max + 1):
        d = mu + max(0, c - l) * theta
        diag = s[None, :] + d + birth + lower
        rhs = d * phi
        # Thomas sweep; diagonally dominant because Re(s) + d > 0
        cp[0] = -birth[0] / diag[0]
        dp[0] = rhs[0] / diag[0]
        for k in range(1, G + 1):
            den = diag[k] + lower[k] * cp[k - 1]
            cp[k] = -birth[k] / den
            dp[k] = (rhs[k] + lower[k] * dp[k - 1]) / den
        phi[G] = dp[G]
        for k in range(G - 1, -1, -1):
            phi[k] = dp[k] - cp[k] * phi[k + 1]
        if c > l:
            out[c - l - 1] = phi[0]
    return out.reshape((v_max,) + shape)


def laplace_fpt_A(v: int, l: int, kappa: float, mu: float, theta: float, s,
                  g_cap: int | None = None):
    scalar = np.ndim(s) == 0
    out = laplace_fpt_A_family(v, l, kappa, mu, theta, np.atleast_1d(s), g_cap)[v - 1]
    return complex(out[0]) if scalar else out


# --------------------------------------------------------------------------
# Euler inversion


@dataclass(frozen=True)
class EulerParams:
    """Abate-Whitt Euler summation settings.

    ``A`` sets the discretisation error (about ``exp(-A)``) at the cost of
    ``exp(A/2)`` round-off amplification; ``n`` plain partial sums are
    followed by ``m`` binomially averaged ones.
    """

    A: float = 23.0
    n: int = 30
    m: int = 11
    check_tol: float = 1e-6
    chunk: int = 4096

    @property
    def n_terms(self) -> int:
        return self.n + self.m + 1


def _euler_weights(m: int) -> np.ndarray:
    return comb(m, np.arange(m + 1)) / 2.0 ** m


def euler_nodes(t: np.ndarray, euler: EulerParams) -> np.ndarray:
    """Contour nodes ``(A + 2 k pi i) / (2 t)``, shape ``(len(t), n_terms)``."""
    k = np.arange(euler.n_terms)
    return (euler.A + 2j * np.pi * k)[None, :] / (2.0 * t[:, None])


def _euler_sum(vals: np.ndarray, t: np.ndarray, euler: EulerParams):
    """Euler-accelerated Bromwich sums from transform values at the nodes."""
    re = vals.real.copy()
    re[:, 0] *= 0.5
    re[:, 1::2] *= -1.0
    partial = np.cumsum(re, axis=1) * (np.exp(euler.A / 2.0) / t)[:, None]
    w = _euler_weights(euler.m)
    n, m = euler.n, euler.m
    est = partial[:, n:n + m + 1] @ w
    prev = partial[:, n - 1:n + m] @ w
    return est, np.abs(est - prev)


def euler_invert(transform: Transform, t, euler: EulerParams = EulerParams(),
                 with_cdf: bool = False):
    """Invert ``transform`` at positive times ``t``.

    Returns ``(pdf, pdf_err)`` or, with ``with_cdf``, also ``(cdf, cdf_err)``
    from inverting ``transform(s) / s`` on the same nodes.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise ValueError("Euler inversion needs t > 0")
    pdf = np.empty_like(t)
    perr = np.empty_like(t)
    cdf = np.empty_like(t)
    cerr = np.empty_like(t)
    step = max(1, euler.chunk)
    for lo in range(0, t.size, step):
        tt = t[lo:lo + step]
        nodes = euler_nodes(tt, euler)
        vals = np.asarray(transform(nodes), dtype=complex).reshape(nodes.shape)
        pdf[lo:lo + step], perr[lo:lo + step] = _euler_sum(vals, tt, euler)
        if with_cdf:
            cdf[lo:lo + step], cerr[lo:lo + step] = _euler_sum(vals / nodes, tt, euler)
    if with_cdf:
        return pdf, perr, cdf, cerr
    return pdf, perr


@dataclass(frozen=True, eq=False)
class FptGrid:
    """Density and distribution samples of a first-passage time."""

    t_grid: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray
    max_error: float = field(default=0.0)

    def __post_init__(self):
        for name in ("t_grid", "pdf", "cdf"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def survival(self) -> np.ndarray:
        return 1.0 - self.cdf

    def mass(self) -> float:
        return float(np.trapezoid(self.pdf, self.t_grid))

    def cdf_at(self, t):
        return np.interp(t, self.t_grid, self.cdf)

    def to_csv(self, path) -> None:
        data = np.column_stack([self.t_grid, self.pdf, self.cdf])
        np.savetxt(Path(path), data, delimiter=",", header="t,pdf,cdf", comments="", fmt="%.17g")


def _extrapolate_zero(t: np.ndarray, f: np.ndarray) -> float:
    # quadratic through the first three positive nodes
    x, y = t[1:4], f[1:4]
    coef = np.polyfit(x, y, 2)
    return float(np.polyval(coef, 0.0))


def _finish(t, pdf, perr, cdf, cerr, f0, euler):
    worst = float(max(perr.max(initial=0.0), cerr.max(initial=0.0)))
    if worst > euler.check_tol:
        k = int(np.argmax(np.maximum(perr, cerr)))
        raise AccuracyLoss(
            f"Euler summation oscillation {worst:.2e} exceeds {euler.check_tol:.0e} near t={t[1:][k]:.6g}"
        )
    full_pdf = np.empty(t.size)
    full_pdf[1:] = pdf
    full_cdf = np.empty(t.size)
    full_cdf[0] = 0.0
    full_cdf[1:] = cdf
    if f0 is None:
        f0 = _extrapolate_zero(t, full_pdf) if t.size >= 4 else float(pdf[0])
    full_pdf[0] = f0
    full_cdf = np.maximum.accumulate(np.clip(full_cdf, 0.0, 1.0))
    return FptGrid(t, full_pdf, full_cdf, worst)


def invert_to_grid(transform: Transform, t_grid, euler: EulerParams = EulerParams(),
                   f0: float | None = None) -> FptGrid:
    """Density and CDF on ``t_grid`` (which must start at 0).

    ``f0`` is the known right limit of the density at zero; without it the
    value is extrapolated quadratically.
    """
    t = np.asarray(t_grid, dtype=float)
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must start at 0 and increase strictly")
    pdf, perr, cdf, cerr = euler_invert(transform, t[1:], euler, with_cdf=True)
    return _finish(t, pdf, perr, cdf, cerr, f0, euler)


def invert_family(family: Callable[[np.ndarray], np.ndarray], size: int, t_grid,
                  euler: EulerParams = EulerParams(), f0=None) -> list[FptGrid]:
    """Invert ``size`` transforms computed together by ``family(s) -> (size, *s.shape)``."""
    t = np.asarray(t_grid, dtype=float)
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must start at 0 and increase strictly")
    tt = t[1:]
    pdf = np.empty((size, tt.size))
    perr = np.empty_like(pdf)
    cdf = np.empty_like(pdf)
    cerr = np.empty_like(pdf)
    step = max(1, euler.chunk)
    for lo in range(0, tt.size, step):
        tc = tt[lo:lo + step]
        nodes = euler_nodes(tc, euler)
        vals = family(nodes)
        for i in range(size):
            pdf[i, lo:lo + step], perr[i, lo:lo + step] = _euler_sum(vals[i], tc, euler)
            cdf[i, lo:lo + step], cerr[i, lo:lo + step] = _euler_sum(vals[i] / nodes, tc, euler)
    f0 = [None] * size if f0 is None else f0
    return [_finish(t, pdf[i], perr[i], cdf[i], cerr[i], f0[i], euler) for i in range(size)]


def fpt_grid(spec: BirthDeathSpec, t_grid, euler: EulerParams = EulerParams()) -> FptGrid:
    return invert_to_grid(spec.transform, t_grid, euler, f0=spec.pdf_at_zero())


def fpt_family_B(v_max: int, kappa: float, mu: float, theta: float, t_grid,
                 euler: EulerParams = EulerParams()) -> list[FptGrid]:
    """Grids for ``B[v]``, ``v = 1..v_max``, sharing one set of transform evaluations."""
    def family(s):
        return np.cumprod(bd_ratios(v_max, kappa, mu, theta, s), axis=0)
    f0 = [mu + theta] + [0.0] * (v_max - 1)
    return invert_family(family, v_max, t_grid, euler, f0)


def fpt_family_C(v_max: int, l: int, mu: float, theta: float, t_grid,
                 euler: EulerParams = EulerParams()) -> list[FptGrid]:
    def family(s):
        out = np.empty((v_max,) + s.shape, dtype=complex)
        cur = (mu / (mu + s)) ** l
        for n in range(1, v_max + 1):
            cur = cur * (mu + n * theta) / (mu + n * theta + s)
            out[n - 1] = cur
        return out
    f0 = [0.0] * v_max
    if l == 0:
        f0[0] = mu + theta
    return invert_family(family, v_max, t_grid, euler, f0)


def fpt_family_A(v_max: int, l: int, kappa: float, mu: float, theta: float, t_grid,
                 euler: EulerParams = EulerParams(), g_cap: int | None = None) -> list[FptGrid]:
    if l < 1:
        raise ValueError("the two-phase process needs l >= 1")
    def family(s):
        return laplace_fpt_A_family(v_max, l, kappa, mu, theta, s, g_cap)
    return invert_family(family, v_max, t_grid, euler, [0.0] * v_max)


# --------------------------------------------------------------------------
# Occupancy weights and the convolution form of A


def occupancy_weights(u, kappa: float, theta: float, J: int):
    """Poisson weights ``R_0(u)..R_J(u)`` of an initially empty M/M/inf queue.

    Returns ``(weights, tail)`` where ``tail = 1 - sum(weights)``.  ``u`` may be
    an array, in which case ``weights`` has shape ``u.shape + (J + 1,)``.
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or J < 0:
        raise ValueError("need u >= 0 and J >= 0")
    lam = kappa / theta * (-np.expm1(-theta * u))
    j = np.arange(J + 1)
    w = poisson.pmf(j, lam[..., None])
    tail = poisson.sf(J, lam)
    return w, tail


def density_fpt_A(v: int, l: int, kappa: float, mu: float, theta: float, t_grid,
                  euler: EulerParams = EulerParams(), series_tol: float = 1e-8,
                  J_cap: int = 80, b_cache: list[FptGrid] | None = None) -> FptGrid:
    """Density of ``A[v, l]`` from its convolution representation.

    ``f_A(t) = f_C(t) R_0(t) + int_0^t sum_j f_{B[j]}(t - u) f_C(u) R_j(u) du``
    evaluated by the trapezoidal rule on a uniform grid.  Slow (quadratic in
    the grid size); kept as an independent check of the transform route.
    """
    if l < 1:
        raise ValueError("the two-phase process needs l >= 1")
    t = np.asarray(t_grid, dtype=float)
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("density_fpt_A needs a uniform grid")
    dt = dt[0]
    lam_max = kappa / theta * (-math.expm1(-theta * t[-1]))
    J = int(poisson.isf(series_tol, lam_max)) + 1 if lam_max > 0 else 0
    if J > J_cap:
        import warnings
        warnings.warn(f"occupancy series needs J={J}, capped at {J_cap}", RuntimeWarning)
        J = J_cap
    fc = fpt_grid(BirthDeathSpec("C", v, mu, theta, l=l), t, euler).pdf
    R, _ = occupancy_weights(t, kappa, theta, J)
    if J == 0:
        pdf = fc * R[:, 0]
    else:
        if b_cache is None or len(b_cache) < J:
            b_cache = fpt_family_B(J, kappa, mu, theta, t, euler)
        fb = np.stack([b_cache[i].pdf for i in range(J)])  # (J, K+1)
        g = fc[None, :] * R[:, 1:].T  # (J, K+1) in u
        K = t.size
        pdf = fc * R[:, 0]
        for k in range(1, K):
            # u = t_0..t_k, t - u = t_k..t_0
            integrand = np.einsum("ji,ji->i", fb[:, k::-1], g[:, :k + 1])
            pdf[k] += dt * (integrand.sum() - 0.5 * (integrand[0] + integrand[-1]))
    cdf = cumulative_trapezoid(pdf, t, initial=0.0)
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
    return FptGrid(t, pdf, cdf)


# --------------------------------------------------------------------------
# Means and time grids


def mean_fpt_B(v: int, kappa: float, mu: float, theta: float, depth: int = 400) -> float:
    """Mean depletion time of ``B[v]`` via the one-step recursion."""
    n_cap = v + depth
    m = 1.0 / (mu + n_cap * theta)
    total = 0.0
    for n in range(n_cap - 1, 0, -1):
        m = (1.0 + kappa * m) / (mu + n * theta)
        if n <= v:
            total += m
    return total


def mean_fpt_C(v: int, l: int, mu: float, theta: float) -> float:
    return l / mu + sum(1.0 / (mu + n * theta) for n in range(1, v + 1))


def mean_fpt_A(v: int, l: int, kappa: float, mu: float, theta: float) -> float:
    """Upper bound on the mean of ``A[v, l]`` (stationary occupancy behind the agent)."""
    r = kappa / theta
    G = default_g_cap(kappa, theta)
    pm = poisson.pmf(np.arange(1, G + 1), r)
    tail = sum(p * mean_fpt_B(g, kappa, mu, theta) for g, p in zip(range(1, G + 1), pm))
    return mean_fpt_C(v, l, mu, theta) + tail


def make_time_grid(horizon: float, dt: float, t_max: float, ratio: float = 1.004) -> np.ndarray:
    """Uniform steps ``dt`` on ``[0, horizon]`` then geometrically growing steps to ``t_max``.

    Every multiple of ``dt`` up to ``horizon`` is an exact grid node.
    """
    if dt <= 0 or horizon < 0 or t_max <= 0 or ratio < 1:
        raise ValueError("invalid grid settings")
    n_u = int(round(horizon / dt))
    if abs(n_u * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a multiple of dt")
    pts = list(np.arange(n_u + 1) * dt)
    if ratio == 1.0:
        n_rest = int(math.ceil((t_max - pts[-1]) / dt - 1e-9))
        pts.extend(pts[-1] + dt * np.arange(1, n_rest + 1))
    else:
        t, h = pts[-1], dt
        while t < t_max:
            h *= ratio
            t += h
            pts.append(t)
    return np.asarray(pts)


def uniform_grid(t_max: float, K: int = 400) -> np.ndarray:
    return np.linspace(0.0, t_max, K + 1)
