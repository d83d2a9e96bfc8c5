"""Point, interval, distributional and sparsity metrics for forecast fields.

Conventions fixed here (the evaluation protocol leaves them open):

* Discrete metrics (KL, true-zero rate, F1) use the median point estimate,
  rounded half-to-even.
* KL divergence compares the rounded truth histogram with the rounded
  point-estimate histogram on bins 0..B (B = max truth), after adding
  ``smoothing`` to every bin and renormalizing.
* F1 scores the "demand > 0" class.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .encoder import ForecastField
from .errors import NoZeros, ShapeMismatch
from .tweedie import EPS, MU_FLOOR, Family, _log_density, quantile_batch

Q_LO, Q_HI = 0.10, 0.90


@dataclass
class IntervalSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ShapeMismatch(f"bounds {self.lower.shape} vs {self.upper.shape}")
        if np.any(self.lower > self.upper) or np.any(self.lower < 0):
            raise ValueError("intervals need 0 <= lower <= upper")


@dataclass
class MetricsReport:
    mae_mean: float
    mae_median: float
    mpiw: float
    picp: float
    kl_divergence: float
    true_zero_rate: float
    f1: float

    def to_json(self) -> str:
        return json.dumps({k: float(v) for k, v in asdict(self).items()}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def _check_shapes(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction shape {a.shape} vs truth shape {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# quantiles of every family
# ---------------------------------------------------------------------------


def family_quantiles(q, field: ForecastField, family: Family = Family.TWEEDIE) -> np.ndarray:
    """Quantiles of each entry's predictive distribution, shaped like the field.

    Continuous families are truncated below at 0 so bounds stay non-negative.
    """
    shape = field.mu.shape
    mu = np.maximum(field.mu.ravel(), MU_FLOOR)
    phi = np.maximum(field.phi.ravel(), EPS)
    if family is Family.TWEEDIE:
        rho = np.clip(field.rho.ravel(), 1.0 + EPS, 2.0 - EPS)
        out = quantile_batch(q, mu, phi, rho)
    elif family is Family.GAUSSIAN:
        qq = np.reshape(q, np.shape(q) + (1,))
        out = stats.norm.ppf(qq, loc=field.mu.ravel(), scale=np.sqrt(phi))
    elif family is Family.POISSON:
        out = stats.poisson.ppf(np.reshape(q, np.shape(q) + (1,)), mu)
    elif family is Family.GAMMA:
        out = stats.gamma.ppf(np.reshape(q, np.shape(q) + (1,)), a=1.0 / phi, scale=phi * mu)
    else:
        out = stats.invgauss.ppf(np.reshape(q, np.shape(q) + (1,)), mu * phi, scale=1.0 / phi)
    return np.maximum(np.asarray(out, float), 0.0).reshape(np.shape(q) + shape)


def point_estimates(field: ForecastField, mode: str = "mean",
                    family: Family = Family.TWEEDIE) -> np.ndarray:
    """Mean (mu itself) or median of each predictive distribution."""
    if mode == "mean":
        return np.asarray(field.mu, float).copy()
    if mode == "median":
        return family_quantiles(0.5, field, family)
    raise ValueError(f"mode must be 'mean' or 'median', got {mode!r}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def mae(pred, truth) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def intervals(field: ForecastField, q_lo: float = Q_LO, q_hi: float = Q_HI,
              family: Family = Family.TWEEDIE) -> IntervalSet:
    if not q_lo < q_hi:
        raise ValueError("q_lo must be below q_hi")
    if family is Family.TWEEDIE:
        both = family_quantiles(np.array([q_lo, q_hi]), _flat(field), family)
        lo = both[0].reshape(field.mu.shape)
        hi = both[1].reshape(field.mu.shape)
    else:
        lo = family_quantiles(q_lo, field, family)
        hi = family_quantiles(q_hi, field, family)
    return IntervalSet(lo, np.maximum(hi, lo))


def _flat(field: ForecastField) -> ForecastField:
    # the Tweedie quantile routine returns (levels, n); keep the field 1-D
    return ForecastField(field.mu.ravel(), field.phi.ravel(), field.rho.ravel())


def mpiw(iv: IntervalSet) -> float:
    return float(np.mean(iv.upper - iv.lower))


def picp(iv: IntervalSet, truth) -> float:
    truth = np.asarray(truth, float)
    if truth.shape != iv.lower.shape:
        raise ShapeMismatch(f"intervals {iv.lower.shape} vs truth {truth.shape}")
    return float(np.mean((iv.lower <= truth) & (truth <= iv.upper)))


def kl_divergence(truth, pred, max_bin: int | None = None, smoothing: float = 1e-6) -> float:
    """KL(truth histogram || prediction histogram) over rounded, clipped values."""
    truth = np.rint(np.asarray(truth, float).ravel())
    pred = np.rint(np.asarray(pred, float).ravel())
    if np.any(truth < 0) or np.any(pred < 0):
        raise ValueError("values must be non-negative")
    B = int(truth.max()) if max_bin is None else int(max_bin)
    bins = B + 1
    p = np.bincount(np.clip(truth, 0, B).astype(int), minlength=bins) / truth.size
    q = np.bincount(np.clip(pred, 0, B).astype(int), minlength=bins) / pred.size
    p = (p + smoothing) / (1.0 + bins * smoothing)
    q = (q + smoothing) / (1.0 + bins * smoothing)
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def true_zero_rate(pred, truth) -> float:
    """Share of true zeros whose rounded prediction is also zero."""
    pred, truth = _check_shapes(pred, truth)
    zeros = truth == 0
    if not zeros.any():
        raise NoZeros("true-zero rate is undefined without zeros in the truth")
    return float(np.mean(np.rint(pred[zeros]) == 0))


def f1_nonzero(pred, truth) -> float:
    """F1 of "rounded prediction > 0" against "truth > 0"."""
    pred, truth = _check_shapes(pred, truth)
    p = np.rint(pred) > 0
    t = truth > 0
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def mean_nll(field: ForecastField, truth, family: Family = Family.TWEEDIE) -> float:
    """Mean negative log-likelihood of the truth; exact series density for Tweedie.

    Zeros under the Tweedie family score the zero atom; under the Gamma and
    inverse Gaussian families they are evaluated at 1e-3.
    """
    x = np.asarray(truth, float)
    mu = np.maximum(field.mu, MU_FLOOR)
    phi = np.maximum(field.phi, EPS)
    if family is Family.TWEEDIE:
        rho = np.clip(field.rho, 1.0 + EPS, 2.0 - EPS)
        ll = _log_density(x, mu, phi, rho)
    elif family is Family.GAUSSIAN:
        ll = stats.norm.logpdf(x, loc=field.mu, scale=np.sqrt(phi))
    elif family is Family.POISSON:
        ll = stats.poisson.logpmf(np.rint(x), mu)
    else:
        xf = np.where(x > 0, x, 1e-3)
        if family is Family.GAMMA:
            ll = stats.gamma.logpdf(xf, a=1.0 / phi, scale=phi * mu)
        else:
            ll = stats.invgauss.logpdf(xf, mu * phi, scale=1.0 / phi)
    return float(-np.mean(ll))


def evaluate(field: ForecastField, truth, family: Family = Family.TWEEDIE) -> MetricsReport:
    """All metrics of one forecast field against matching ground truth."""
    truth = np.asarray(truth, float)
    _check_shapes(field.mu, truth)
    mean_pt = point_estimates(field, "mean", family)
    if family is Family.TWEEDIE:
        qs = family_quantiles(np.array([Q_LO, 0.5, Q_HI]), _flat(field), family)
        lo, med, hi = (v.reshape(truth.shape) for v in qs)
        iv = IntervalSet(lo, np.maximum(hi, lo))
    else:
        med = point_estimates(field, "median", family)
        iv = intervals(field, Q_LO, Q_HI, family)
    try:
        tzr = true_zero_rate(med, truth)
    except NoZeros:
        tzr = math.nan
    return MetricsReport(
        mae_mean=mae(mean_pt, truth),
        mae_median=mae(med, truth),
        mpiw=mpiw(iv),
        picp=picp(iv, truth),
        kl_divergence=kl_divergence(truth, med),
        true_zero_rate=tzr,
        f1=f1_nonzero(med, truth),
    )


# ---------------------------------------------------------------------------
# surface export
# ---------------------------------------------------------------------------

SURFACE_COLUMNS = ("node", "horizon", "mu", "phi", "rho", "x_true")


def surface_export(field: ForecastField, truth) -> str:
    """CSV text with one row per (node, horizon); floats printed with 17 significant digits."""
    truth = np.asarray(truth, float)
    if field.mu.ndim != 2:
        raise ShapeMismatch(f"surface export needs a (V, k) field, got {field.mu.shape}")
    _check_shapes(field.mu, truth)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURFACE_COLUMNS)
    V, k = field.mu.shape
    for i in range(V):
        for h in range(k):
            w.writerow([
                i, h,
                *("%.17g" % v for v in (field.mu[i, h], field.phi[i, h], field.rho[i, h], truth[i, h])),
            ])
    return buf.getvalue()


def read_surface(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "node": int(r["node"]), "horizon": int(r["horizon"]),
            **{c: float(r[c]) for c in ("mu", "phi", "rho", "x_true")},
        })
    return rows
