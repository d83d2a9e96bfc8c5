"""Tweedie distribution mathematics for the compound Poisson-Gamma regime.

Everything here is a pure function of its arguments. The public scalar API
(`to_compound`, `zero_mass`, `log_density_exact`, ...) takes a
`TweedieParams`; the ``*_batch`` helpers take parallel arrays of
``(mu, phi, rho)`` and are what the evaluation code uses on whole forecast
fields.

Two different exponents share one letter in the literature. Here they are
kept apart:

* ``alpha_g = (2 - rho) / (rho - 1)`` is the Gamma shape (positive).
* ``alpha_s = (2 - rho) / (1 - rho)`` is the series exponent (negative).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaln
from scipy.stats import poisson

from .errors import DomainError, NonFinite, ToleranceNotMet

logger = logging.getLogger(__name__)

MU_FLOOR = 1e-6
EPS = 1e-6
ZERO_FLOOR = 1e-3  # substitute for x = 0 under the Gamma / inverse Gaussian families

CDF_TOL = 1e-7
QUANTILE_XTOL = 1e-6
_QUANTILE_PTOL = 1e-8
TAIL_SDS = 12.0
_MAX_STRETCH = 4096.0
_STRETCH_MASS = 1e-12  # Poisson mass below which singular terms are ignored when picking m

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TweedieParams:
    """Mean, dispersion and index of one Tweedie distribution with 1 < rho < 2."""

    mu: float
    phi: float
    rho: float

    def __post_init__(self):
        if not self.mu >= MU_FLOOR:
            raise DomainError(f"mu={self.mu} below MU_FLOOR={MU_FLOOR}")
        if not self.phi >= EPS:
            raise DomainError(f"phi={self.phi} below EPS={EPS}")
        if not (1.0 + EPS <= self.rho <= 2.0 - EPS):
            raise DomainError(f"rho={self.rho} outside [1+EPS, 2-EPS]")

    @classmethod
    def clamped(cls, mu: float, phi: float, rho: float) -> "TweedieParams":
        """Build params after forcing each field into its valid range."""
        return cls(
            max(float(mu), MU_FLOOR),
            max(float(phi), EPS),
            min(max(float(rho), 1.0 + EPS), 2.0 - EPS),
        )

    def mean(self) -> float:
        return self.mu

    def variance(self) -> float:
        return self.phi * self.mu**self.rho


@dataclass(frozen=True)
class CompoundPoissonGamma:
    """Poisson rate ``lam`` of the event count and Gamma(shape, scale) of each event."""

    lam: float
    alpha_g: float
    gamma: float

    def mean(self) -> float:
        return self.lam * self.alpha_g * self.gamma


class Family(enum.Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    TWEEDIE = "tweedie"
    GAMMA = "gamma"
    INVGAUSS = "invgauss"

    @property
    def rho(self) -> float | None:
        """Fixed index parameter, or None for the learned-index member."""
        return _FAMILY_RHO[self]


_FAMILY_RHO = {
    Family.GAUSSIAN: 0.0,
    Family.POISSON: 1.0,
    Family.TWEEDIE: None,
    Family.GAMMA: 2.0,
    Family.INVGAUSS: 3.0,
}


@dataclass(frozen=True)
class FamilyIndex:
    """One member of the Tweedie family with its parameters.

    The compound Poisson-Gamma member carries full ``TweedieParams`` in
    ``params``; the fixed-index members use ``mu`` and ``phi`` only.
    """

    family: Family
    mu: float
    phi: float = 1.0
    params: TweedieParams | None = None

    def __post_init__(self):
        if self.family is Family.TWEEDIE:
            if self.params is None:
                raise DomainError("the tweedie family needs TweedieParams")
        elif self.family is Family.GAUSSIAN:
            if self.mu < 0:
                raise DomainError("gaussian mean must be >= 0")
        elif not self.mu > 0:
            raise DomainError(f"{self.family.value} mean must be > 0")


# ---------------------------------------------------------------------------
# parameter mappings
# ---------------------------------------------------------------------------


def to_compound(p: TweedieParams) -> CompoundPoissonGamma:
    """Map (mu, phi, rho) to the Poisson rate and Gamma shape/scale."""
    mu, phi, rho = p.mu, p.phi, p.rho
    lam = mu ** (2.0 - rho) / (phi * (2.0 - rho))
    alpha_g = (2.0 - rho) / (rho - 1.0)
    gamma = phi * (rho - 1.0) * mu ** (rho - 1.0)
    return CompoundPoissonGamma(lam, alpha_g, gamma)


def _log_zero_mass(mu, phi, rho):
    return -(mu ** (2.0 - rho)) / (phi * (2.0 - rho))


def zero_mass(p: TweedieParams) -> float:
    """Probability of exactly zero demand, exp(-lam)."""
    return math.exp(-to_compound(p).lam)


# ---------------------------------------------------------------------------
# exact density via the series normalizer
# ---------------------------------------------------------------------------

_BLOCK = 8
_STRIDE_DIV = 16.0
_CHUNK = 256  # parameter sets per Simpson pass
_EVAL_BLOCK = 50_000  # density evaluations per vectorized call
_LATTICE_RATIO = 16.0  # alpha_g / j above which the Gamma spikes are >= 4 sd apart
_LATTICE_WINDOW = 8  # neighbouring spikes kept around the crossing one
_RIPPLE_RATIO = 0.1  # alpha_g / j below which the bumps blend into a smooth density
_MAX_PIECES = 65_536
_MAX_BLOCKS = 100_000


def _log_terms(j, logx, phi, rho):
    """log W_j of the normalizing series, elementwise."""
    alpha_s = (2.0 - rho) / (1.0 - rho)
    c = alpha_s * np.log(rho - 1.0) - (1.0 - alpha_s) * np.log(phi) - np.log(2.0 - rho)
    return j * (c - alpha_s * logx) - gammaln(j + 1.0) - gammaln(-j * alpha_s)


def _expand(j_start, step, peak, logx, phi, rho, log_tol):
    """Sum terms from j_start moving by step (per row) until they drop below tol * peak.

    Returns the log of the partial sum relative to ``peak`` (i.e. log of
    sum exp(term - peak)) for each row. Terms are log-concave in j, so once
    a term falls under the threshold all later ones do too.
    """
    n = j_start.shape[0]
    acc = np.zeros(n)
    active = np.ones(n, dtype=bool)
    step = np.broadcast_to(np.asarray(step, float), (n,))
    offsets = np.arange(_BLOCK)
    cur = j_start.astype(float)
    for _ in range(_MAX_BLOCKS):
        if not active.any():
            return acc
        idx = np.nonzero(active)[0]
        j = cur[idx, None] + offsets[None, :] * step[idx, None]
        valid = j >= 1.0
        terms = _log_terms(
            np.where(valid, j, 1.0), logx[idx, None], phi[idx, None], rho[idx, None]
        )
        if not np.all(np.isfinite(terms[valid])):
            raise NonFinite("series term overflowed in log space; clamp parameters")
        rel = terms - peak[idx, None]
        below = (rel < log_tol) | ~valid
        # include terms up to (excluding) the first one under the threshold
        first = np.where(below.any(axis=1), below.argmax(axis=1), _BLOCK)
        keep = np.arange(_BLOCK)[None, :] < first[:, None]
        acc[idx] += np.where(keep, np.exp(np.where(keep, rel, -np.inf)), 0.0).sum(axis=1)
        done = first < _BLOCK
        cur[idx] += _BLOCK * step[idx]
        active[idx[done]] = False
    raise ToleranceNotMet("series expansion did not terminate")


def _log_series(x, phi, rho, tol):
    """log of sum_{j>=1} W_j for x > 0, elementwise over broadcast arrays."""
    x, phi, rho = np.broadcast_arrays(
        np.asarray(x, float), np.asarray(phi, float), np.asarray(rho, float)
    )
    shape = x.shape
    x, phi, rho = x.ravel(), phi.ravel(), rho.ravel()
    logx = np.log(x)
    jmax = np.exp((2.0 - rho) * logx) / ((2.0 - rho) * phi)
    j = np.maximum(1.0, np.round(np.minimum(jmax, 1e15)))
    # hill-climb to the true peak; terms are unimodal in j
    t = _log_terms(j, logx, phi, rho)
    for _ in range(10_000):
        up = _log_terms(j + 1.0, logx, phi, rho)
        dn = np.where(j > 1.0, _log_terms(np.maximum(j - 1.0, 1.0), logx, phi, rho), -np.inf)
        move_up = up > t
        move_dn = (dn > t) & ~move_up
        if not (move_up.any() or move_dn.any()):
            break
        j = j + move_up - move_dn
        t = np.where(move_up, up, np.where(move_dn, dn, t))
    if not np.all(np.isfinite(t)):
        raise NonFinite("peak series term is not finite; clamp parameters")
    log_tol = math.log(tol)
    # Around a wide peak (sd of about sqrt(j (rho - 1)) indices) the terms are
    # smooth in j; sampling every h-th term with h far below the sd and
    # scaling by h reproduces the integer sum to rounding error.
    h = np.maximum(1.0, np.floor(np.sqrt(j * (rho - 1.0)) / _STRIDE_DIV))
    upper = _expand(j + h, h, t, logx, phi, rho, log_tol)
    lower = _expand(j - h, -h, t, logx, phi, rho, log_tol)
    out = t + np.log(h) + np.log1p(upper + lower)
    return out.reshape(shape)


def series_peak(x, phi, rho) -> np.ndarray:
    """Index j of the largest series term for each x > 0 (elementwise)."""
    x, phi, rho = (np.asarray(v, float).ravel() for v in np.broadcast_arrays(x, phi, rho))
    logx = np.log(x)
    j = np.maximum(1.0, np.round(np.minimum(np.exp((2.0 - rho) * logx) / ((2.0 - rho) * phi), 1e15)))
    t = _log_terms(j, logx, phi, rho)
    for _ in range(10_000):
        up = _log_terms(j + 1.0, logx, phi, rho)
        dn = np.where(j > 1.0, _log_terms(np.maximum(j - 1.0, 1.0), logx, phi, rho), -np.inf)
        move_up = up > t
        move_dn = (dn > t) & ~move_up
        if not (move_up.any() or move_dn.any()):
            break
        j = j + move_up - move_dn
        t = np.where(move_up, up, np.where(move_dn, dn, t))
    return j


def _log_density(x, mu, phi, rho, tol=1e-10):
    """Exact log density/mass, elementwise. x = 0 gives the log of the zero atom."""
    x, mu, phi, rho = np.broadcast_arrays(
        np.asarray(x, float), np.asarray(mu, float), np.asarray(phi, float), np.asarray(rho, float)
    )
    out = np.empty(x.shape)
    zero = x <= 0.0
    out[zero] = _log_zero_mass(mu[zero], phi[zero], rho[zero])
    pos = ~zero
    if pos.any():
        xp, mp, fp, rp = x[pos], mu[pos], phi[pos], rho[pos]
        expo = (xp * mp ** (1.0 - rp) / (1.0 - rp) - mp ** (2.0 - rp) / (2.0 - rp)) / fp
        out[pos] = expo - np.log(xp) + _log_series(xp, fp, rp, tol)
    return out


def log_density_exact(x, p: TweedieParams, tol: float = 1e-10):
    """Exact log density of the continuous part (x > 0) or log zero mass (x = 0).

    The normalizing series is summed in log space outward from its largest
    term until terms fall below ``tol`` times that term.

    Args:
        x: non-negative scalar or array.
        p: distribution parameters.
        tol: relative truncation threshold for series terms.

    Returns:
        float for scalar input, ndarray otherwise.
    """
    xa = np.asarray(x, float)
    if np.any(xa < 0):
        raise DomainError("x must be non-negative")
    out = _log_density(xa, p.mu, p.phi, p.rho, tol)
    return float(out) if out.ndim == 0 else out


def log_series_sum(x: float, p: TweedieParams, tol: float = 1e-10) -> float:
    """log of the normalizing series sum (so a(x) = exp(this) / x)."""
    return float(_log_series(x, p.phi, p.rho, tol))


# ---------------------------------------------------------------------------
# training surrogate
# ---------------------------------------------------------------------------


def surrogate_array(x, mu, phi, rho):
    """Elementwise single-term surrogate log-likelihood (numpy)."""
    x, mu, phi, rho = np.broadcast_arrays(
        np.asarray(x, float), np.asarray(mu, float), np.asarray(phi, float), np.asarray(rho, float)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        zero_branch = _log_zero_mass(mu, phi, rho)
        alpha_s = (2.0 - rho) / (1.0 - rho)
        xs = np.where(x > 0, x, 1.0)
        jmax = xs ** (2.0 - rho) / ((2.0 - rho) * phi)
        pos_branch = (
            (xs * mu ** (1.0 - rho) / (1.0 - rho) - mu ** (2.0 - rho) / (2.0 - rho)) / phi
            - np.log(jmax * np.sqrt(-alpha_s) * xs)
            + jmax * (alpha_s - 1.0)
        )
    return np.where(x > 0, pos_branch, zero_branch)


def log_density_surrogate(x: float, p: TweedieParams) -> float:
    """Closed-form single-term approximation used as the training objective.

    For x = 0 this is the exact log zero mass. For x > 0 the series is
    replaced by one term located at ``j_max = x**(2-rho) / ((2-rho) phi)``.
    """
    if x < 0:
        raise DomainError("x must be non-negative")
    v = float(surrogate_array(x, p.mu, p.phi, p.rho))
    if not math.isfinite(v):
        raise NonFinite(f"surrogate is {v} at x={x}, {p}")
    return v


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_array(mu, phi, rho, rng: np.random.Generator) -> np.ndarray:
    """One draw per entry of the broadcast parameter arrays.

    Each draw takes L ~ Poisson(lam) and returns 0 when L = 0, else the sum
    of L independent Gamma(alpha_g, gamma) events.
    """
    mu, phi, rho = np.broadcast_arrays(
        np.asarray(mu, float), np.asarray(phi, float), np.asarray(rho, float)
    )
    shape = mu.shape
    mu, phi, rho = mu.ravel(), phi.ravel(), rho.ravel()
    lam = mu ** (2.0 - rho) / (phi * (2.0 - rho))
    alpha_g = (2.0 - rho) / (rho - 1.0)
    gamma = phi * (rho - 1.0) * mu ** (rho - 1.0)
    counts = rng.poisson(lam)
    out = np.zeros(mu.size)
    total = int(counts.sum())
    if total:
        nz = np.nonzero(counts)[0]
        owner = np.repeat(nz, counts[nz])
        events = rng.gamma(alpha_g[owner], gamma[owner])
        starts = np.concatenate(([0], np.cumsum(counts[nz])[:-1]))
        out[nz] = np.add.reduceat(events, starts)
    return out.reshape(shape)


def sample(p: TweedieParams, n: int, seed: int) -> np.ndarray:
    """n independent draws; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return sample_array(np.full(n, p.mu), p.phi, p.rho, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# CDF and quantiles
# ---------------------------------------------------------------------------


def _stretch(mu, phi, rho):
    """Exponent m of the substitution x = u**m that tames the x -> 0 singularity.

    Given L = j trips the density behaves like x**(j * alpha_g - 1) near zero,
    so in u it behaves like u**(m * j * alpha_g - 1), smooth once
    m * j * alpha_g >= 2. Only the smallest j with non-negligible Poisson
    weight matters; for large lambda that j is far above 1.
    """
    alpha_g = (2.0 - rho) / (rho - 1.0)
    lam = -_log_zero_mass(mu, phi, rho)
    j_min = np.maximum(poisson.ppf(_STRETCH_MASS, lam), 1.0)
    return np.clip(np.ceil(2.0 / (j_min * alpha_g)), 1.0, _MAX_STRETCH)


def upper_bound(mu, phi, rho):
    """Right end of the integration domain: mean plus TAIL_SDS standard deviations."""
    return mu + TAIL_SDS * np.sqrt(phi * mu**rho)


def _initial_pieces(lo, hi, mu, phi, rho, m):
    """Starting grid size per problem.

    Near rho = 1 the density ripples with period alpha_g * gamma (one bump per
    Poisson count). Unless the bumps overlap enough to wash out, the grid
    starts at about one piece per bump width so none is skipped.
    """
    alpha_g = (2.0 - rho) / (rho - 1.0)
    lam = -_log_zero_mass(mu, phi, rho)
    j_lo = np.maximum(poisson.ppf(_STRETCH_MASS, lam), 1.0)
    gam = phi * (rho - 1.0) * mu ** (rho - 1.0)
    width = np.sqrt(j_lo * alpha_g) * gam
    rippled = (alpha_g / j_lo > _RIPPLE_RATIO) & (m == 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fine = np.ceil((hi - lo) / width)
    fine = np.where(np.isfinite(fine), fine, 8.0)
    return np.where(rippled, np.clip(fine, 8.0, _MAX_PIECES), 8.0).astype(np.intp)


def _simpson_pieces(lo, hi, mu, phi, rho, tol, max_evals=200_000_000):
    """Adaptive Simpson over [lo, hi] for many problems at once.

    Works breadth-first in u = x**(1/m): every pass refines all unconverged
    subintervals of all problems with one vectorized density evaluation. A
    subinterval is accepted when its two half-rules agree with the whole
    rule to 15x its share of the absolute tolerance ``tol``.

    Returns the accepted half-intervals as a dict of parallel arrays
    (problem index ``k``, ends ``a``/``b`` in u, endpoint and midpoint
    integrand values, Simpson value) plus the stretch exponents ``m``.
    """
    lo, hi, mu, phi, rho = (
        np.asarray(v, float).ravel() for v in np.broadcast_arrays(lo, hi, mu, phi, rho)
    )
    n = lo.shape[0]
    m = _stretch(mu, phi, rho)

    def g(u, k):
        val = np.zeros(u.shape)
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            x = u ** m[k]
            ok = x > 0
            for idx in np.array_split(np.nonzero(ok)[0], max(1, int(ok.sum()) // _EVAL_BLOCK + 1)):
                if idx.size == 0:
                    continue
                kk = k[idx]
                lf = _log_density(x[idx], mu[kk], phi[kk], rho[kk])
                val[idx] = np.exp(lf + np.log(m[kk]) + (m[kk] - 1.0) * np.log(u[idx]))
        return val

    ua = lo ** (1.0 / m)
    ub = hi ** (1.0 / m)
    pieces = _initial_pieces(lo, hi, mu, phi, rho, m)
    k = np.repeat(np.arange(n), pieces)
    first = np.repeat(np.cumsum(pieces) - pieces, pieces)
    frac = (np.arange(k.size) - first) / pieces[k]
    a = ua[k] + (ub - ua)[k] * frac
    b = ua[k] + (ub - ua)[k] * (frac + 1.0 / pieces[k])
    keep = b > a
    a, b, k = a[keep], b[keep], k[keep]
    t = tol / pieces[k]
    c = 0.5 * (a + b)
    fa, fc, fb = g(a, k), g(c, k), g(b, k)
    whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb)
    evals = 3 * a.size
    depth = 0
    out = {key: [] for key in ("k", "a", "b", "fa", "fc", "fb", "value")}
    while a.size:
        d = 0.5 * (a + c)
        e = 0.5 * (c + b)
        fd, fe = g(d, k), g(e, k)
        evals += 2 * a.size
        left = (c - a) / 6.0 * (fa + 4.0 * fd + fc)
        right = (b - c) / 6.0 * (fc + 4.0 * fe + fb)
        err = left + right - whole
        done = (np.abs(err) <= 15.0 * t) & (depth >= 2)
        if done.any():
            for key, lv, rv in (
                ("k", k, k), ("a", a, c), ("b", c, b), ("fa", fa, fc),
                ("fc", fd, fe), ("fb", fc, fb), ("value", left, right),
            ):
                out[key].append(lv[done])
                out[key].append(rv[done])
        depth += 1
        nd = ~done
        if not nd.any():
            break
        if depth > 60 or evals > max_evals:
            raise ToleranceNotMet(
                f"adaptive Simpson did not converge ({evals} evaluations, depth {depth})"
            )
        a, b, c, d, e, k, t = a[nd], b[nd], c[nd], d[nd], e[nd], k[nd], t[nd]
        fa, fb, fc, fd, fe = fa[nd], fb[nd], fc[nd], fd[nd], fe[nd]
        left, right = left[nd], right[nd]
        # children [a, c] (midpoint d) and [c, b] (midpoint e)
        a, c, b = np.concatenate((a, c)), np.concatenate((d, e)), np.concatenate((c, b))
        fa, fc, fb = np.concatenate((fa, fc)), np.concatenate((fd, fe)), np.concatenate((fc, fb))
        whole = np.concatenate((left, right))
        k = np.concatenate((k, k))
        t = np.concatenate((t, t)) * 0.5
    table = {key: (np.concatenate(v) if v else np.zeros(0)) for key, v in out.items()}
    table["k"] = table["k"].astype(np.intp)
    if not np.all(np.isfinite(table["value"])):
        raise NonFinite("density integral is not finite")
    order = np.lexsort((table["a"], table["k"]))
    table = {key: v[order] for key, v in table.items()}
    table["m"] = m
    return table


def _integrate_batch(lo, hi, mu, phi, rho, tol):
    """Integral of the continuous density over [lo, hi] for each problem."""
    n = np.broadcast(lo, hi, mu, phi, rho).size
    table = _simpson_pieces(lo, hi, mu, phi, rho, tol)
    return np.bincount(table["k"], weights=table["value"], minlength=n)


def _chunked(fn, n, *arrays):
    # bounds the breadth-first Simpson working set
    parts = [fn(*(a[s : s + _CHUNK] for a in arrays)) for s in range(0, n, _CHUNK)]
    return np.concatenate(parts, axis=-1) if parts else np.zeros(0)


def _lattice(mu, phi, rho):
    """True where the continuous part is a comb of well separated Gamma spikes.

    Given L = j the continuous part is Gamma(j alpha_g, gamma): spikes at
    multiples of alpha_g * gamma with width sqrt(j alpha_g) * gamma. As
    rho -> 1 they become too narrow for quadrature on a fixed grid; there
    the CDF is evaluated as the equivalent Poisson-weighted sum of
    regularized incomplete gamma functions instead.
    """
    alpha_g = (2.0 - rho) / (rho - 1.0)
    lam = -_log_zero_mass(mu, phi, rho)
    j_hi = np.maximum(poisson.isf(_STRETCH_MASS, lam), 1.0)
    return alpha_g > _LATTICE_RATIO * j_hi


def _mixture_cdf(x, mu, phi, rho, j_lo, j_hi):
    """Atom + P(1 <= L < j_lo) + sum over j_lo <= j <= j_hi of Pois(j) * P(Gamma_j <= x)."""
    lam = -_log_zero_mass(mu, phi, rho)
    alpha_g = (2.0 - rho) / (rho - 1.0)
    gam = phi * (rho - 1.0) * mu ** (rho - 1.0)
    width = int(np.max(j_hi - j_lo)) + 1
    j = j_lo[:, None] + np.arange(width)[None, :]
    live = j <= j_hi[:, None]
    w = np.where(live, poisson.pmf(j, lam[:, None]), 0.0)
    with np.errstate(invalid="ignore"):
        g = gammainc(np.maximum(j, 1.0) * alpha_g[:, None], (x / gam)[:, None])
    below = poisson.cdf(j_lo - 1.0, lam)  # includes the atom
    return below + np.sum(w * np.where(live, g, 0.0), axis=1)


def _lattice_cdf(x, mu, phi, rho):
    lam = -_log_zero_mass(mu, phi, rho)
    j_lo = np.maximum(poisson.ppf(_STRETCH_MASS, lam), 1.0)
    j_hi = np.maximum(poisson.isf(_STRETCH_MASS, lam), 1.0)
    out = np.empty(x.size)
    for s in range(0, x.size, 32):
        sl = slice(s, s + 32)
        out[sl] = _mixture_cdf(x[sl], mu[sl], phi[sl], rho[sl], j_lo[sl], j_hi[sl])
    return out


def cdf_batch(x, mu, phi, rho, tol: float = CDF_TOL) -> np.ndarray:
    """CDF at x for each parameter set (parallel 1-D arrays)."""
    x, mu, phi, rho = (np.asarray(a, float).ravel() for a in np.broadcast_arrays(x, mu, phi, rho))

    def chunk(x, mu, phi, rho):
        out = np.empty(x.size)
        lat = _lattice(mu, phi, rho)
        if lat.any():
            out[lat] = _lattice_cdf(np.maximum(x[lat], 0.0), mu[lat], phi[lat], rho[lat])
        q = ~lat
        if q.any():
            hi = np.minimum(np.maximum(x[q], 0.0), upper_bound(mu[q], phi[q], rho[q]))
            out[q] = np.exp(_log_zero_mass(mu[q], phi[q], rho[q])) + _integrate_batch(
                np.zeros_like(hi), hi, mu[q], phi[q], rho[q], tol
            )
        return out

    return _chunked(chunk, x.size, x, mu, phi, rho)


def cdf(x: float, p: TweedieParams, tol: float = CDF_TOL) -> float:
    """P(X <= x): zero atom plus the integrated continuous density.

    Integration runs over [0, min(x, U)] with U = mu + 12 sd. Mass beyond U
    is treated as zero; the compound Poisson-Gamma tail decays exponentially
    (like a Gamma tail with scale gamma), so for the parameter ranges used
    here the neglected mass is far below the 1e-7 quadrature tolerance.
    """
    if x < 0:
        raise DomainError("x must be non-negative")
    return float(cdf_batch(x, p.mu, p.phi, p.rho, tol)[0])


def _partial_simpson(s, fa, fc, fb):
    """Integral over the first fraction s of a unit piece of the Simpson parabola."""
    s2, s3 = s * s, s * s * s
    return (
        fa * (2.0 * s3 / 3.0 - 1.5 * s2 + s)
        + fc * (-4.0 * s3 / 3.0 + 2.0 * s2)
        + fb * (2.0 * s3 / 3.0 - 0.5 * s2)
    )


def quantile_batch(q, mu, phi, rho, xtol: float = QUANTILE_XTOL) -> np.ndarray:
    """Quantiles for each parameter set at one or more levels.

    Args:
        q: scalar level or 1-D array of levels, each in (0, 1).
        mu, phi, rho: parallel 1-D parameter arrays of length n.
        xtol: bisection stops once the bracket is narrower than this in x.

    Returns:
        Array of shape (n,) for scalar q, else (len(q), n). Levels inside
        the zero atom give 0.

    One adaptive Simpson pass per parameter set builds the CDF as a table of
    accepted pieces; the CDF is bisected inside the piece where it crosses
    the level, using the same Simpson parabola that was accepted there.
    """
    scalar = np.ndim(q) == 0
    levels = np.atleast_1d(np.asarray(q, float))
    if np.any((levels <= 0) | (levels >= 1)):
        raise DomainError("quantile level must lie in (0, 1)")
    mu, phi, rho = (np.asarray(v, float).ravel() for v in np.broadcast_arrays(mu, phi, rho))
    out = _chunked(lambda m_, f_, r_: _quantile_chunk(levels, m_, f_, r_, xtol), mu.size, mu, phi, rho)
    if out.size == 0:
        out = np.zeros((levels.size, 0))
    return out[0] if scalar else out


def _lattice_quantile(levels, mu, phi, rho, xtol):
    """Quantiles of lattice-regime parameter sets by bisection of the mixture CDF.

    The level is first located between two spikes from the cumulative Poisson
    weights, then bisected inside that spike with its neighbours included.
    """
    lam = -_log_zero_mass(mu, phi, rho)
    spacing = (2.0 - rho) * phi * mu ** (rho - 1.0)  # alpha_g * gamma
    out = np.zeros((levels.size, mu.size))
    for li, level in enumerate(levels):
        rows = np.nonzero(level > np.exp(-lam))[0]
        if rows.size == 0:
            continue
        j_star = np.maximum(poisson.ppf(level, lam[rows]), 1.0)
        j_lo = np.maximum(j_star - _LATTICE_WINDOW, 1.0)
        j_hi = j_star + _LATTICE_WINDOW
        lo = (j_star - 1.0) * spacing[rows]
        hi = (j_star + 1.0) * spacing[rows]
        args = (mu[rows], phi[rows], rho[rows], j_lo, j_hi)
        for _ in range(200):
            if np.all(hi - lo <= xtol * 1e-3):
                break
            mid = 0.5 * (lo + hi)
            below = _mixture_cdf(mid, *args) < level
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out[li, rows] = 0.5 * (lo + hi)
    return out


def _quantile_chunk(levels, mu, phi, rho, xtol):
    n = mu.size
    out = np.zeros((levels.size, n))
    lat = _lattice(mu, phi, rho)
    if lat.any():
        out[:, lat] = _lattice_quantile(levels, mu[lat], phi[lat], rho[lat], xtol)
    p0 = np.exp(_log_zero_mass(mu, phi, rho))
    need = np.nonzero((levels[:, None] > p0[None, :]).any(axis=0) & ~lat)[0]
    if need.size:
        mu_n, phi_n, rho_n = mu[need], phi[need], rho[need]
        hi = upper_bound(mu_n, phi_n, rho_n)
        tab = _simpson_pieces(np.zeros_like(hi), hi, mu_n, phi_n, rho_n, CDF_TOL)
        m = tab["m"]
        values = np.maximum(tab["value"], 0.0)
        cum = np.cumsum(values)
        counts = np.bincount(tab["k"], minlength=need.size)
        end = np.cumsum(counts)
        start = end - counts
        base = np.where(start > 0, cum[np.maximum(start - 1, 0)], 0.0)
        for li, level in enumerate(levels):
            rows = np.nonzero(level > p0[need])[0]
            if rows.size == 0:
                continue
            target = base[rows] + (level - p0[need][rows])
            # first piece of this problem whose cumulative mass reaches the target
            pos = np.searchsorted(cum, target, side="left")
            over = pos >= end[rows]
            pos = np.minimum(pos, end[rows] - 1)
            before = np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)
            before = np.maximum(before, base[rows])
            a, b = tab["a"][pos], tab["b"][pos]
            fa, fc, fb = tab["fa"][pos], tab["fc"][pos], tab["fb"][pos]
            h = b - a
            mm = m[rows]
            s_lo, s_hi = np.zeros(rows.size), np.ones(rows.size)
            for _ in range(200):
                width = (a + s_hi * h) ** mm - (a + s_lo * h) ** mm
                spread = h * (_partial_simpson(s_hi, fa, fc, fb) - _partial_simpson(s_lo, fa, fc, fb))
                # near x = 0 the CDF can be far steeper than 1 per unit x
                if np.all((width <= xtol) & (spread <= _QUANTILE_PTOL)):
                    break
                s_mid = 0.5 * (s_lo + s_hi)
                f_mid = before + h * _partial_simpson(s_mid, fa, fc, fb)
                below = f_mid < target
                s_lo = np.where(below, s_mid, s_lo)
                s_hi = np.where(below, s_hi, s_mid)
            else:
                raise ToleranceNotMet("quantile bisection did not converge")
            x = (a + 0.5 * (s_lo + s_hi) * h) ** mm
            # levels beyond the integrated domain saturate at its upper end
            x = np.where(over, hi[rows], x)
            out[li, need[rows]] = x
    return out


def quantile(q: float, p: TweedieParams) -> float:
    """Smallest x (to within 1e-6) with cdf(x) >= q; 0 when q falls in the zero atom."""
    return float(quantile_batch(q, p.mu, p.phi, p.rho)[0])


# ---------------------------------------------------------------------------
# fixed-index family members
# ---------------------------------------------------------------------------


def _floor_zero(x, family, zero_floor):
    if x > 0:
        return x
    if not zero_floor:
        raise DomainError(f"x = 0 has no density under the {family.value} family")
    logger.warning("substituting x=%g for x=0 under the %s family", ZERO_FLOOR, family.value)
    return ZERO_FLOOR


def family_log_density(x: float, f: FamilyIndex, zero_floor: bool = False) -> float:
    """Closed-form log density (or mass) of a fixed-index family member.

    Gaussian uses variance phi; Poisson ignores phi; Gamma has variance
    phi * mu**2; inverse Gaussian has variance phi * mu**3. With
    ``zero_floor`` the continuous positive families evaluate x = 0 at
    ``ZERO_FLOOR`` instead of raising.
    """
    if x < 0:
        raise DomainError("x must be non-negative")
    mu, phi = f.mu, f.phi
    if f.family is Family.TWEEDIE:
        return log_density_exact(x, f.params)
    if f.family is Family.GAUSSIAN:
        return -0.5 * (_LOG_2PI + math.log(phi)) - (x - mu) ** 2 / (2.0 * phi)
    if f.family is Family.POISSON:
        if x != int(x):
            raise DomainError("poisson needs integer x")
        return x * math.log(mu) - mu - math.lgamma(x + 1.0)
    if f.family is Family.GAMMA:
        x = _floor_zero(x, f.family, zero_floor)
        shape = 1.0 / phi
        scale = phi * mu
        return -math.lgamma(shape) - shape * math.log(scale) + (shape - 1.0) * math.log(x) - x / scale
    x = _floor_zero(x, f.family, zero_floor)
    return -0.5 * (_LOG_2PI + math.log(phi) + 3.0 * math.log(x)) - (x - mu) ** 2 / (2.0 * phi * mu**2 * x)
