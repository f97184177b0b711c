"""Quantile-distribution kernel: distortion weights, distorted expectations,
left truncated variance and the quantile Huber regression loss.

All functions operate on the last axis of an array of quantile estimates, so a
single distribution has shape ``(M,)`` and a batch of per-action distributions
has shape ``(..., A, M)``.  Quantile estimates are used in the order the
network emits them; nothing here sorts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.special import ndtr

__all__ = [
    "CVaR",
    "WangTransform",
    "DistortionMeasure",
    "norm_ppf",
    "norm_cdf",
    "quantile_midpoints",
    "distortion_weights",
    "distorted_expectation",
    "mean_value",
    "left_truncated_variance",
    "huber",
    "quantile_huber_loss",
]


# Wichura (1988), algorithm AS 241 (PPND16): |error| ~ 1e-16 over (0, 1).
_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coeffs, x):
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


def norm_ppf(p):
    """Standard normal quantile function (inverse CDF).

    Rational approximation AS 241; accepts scalars or arrays with entries in
    the open interval (0, 1).
    """
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(np.isnan(p)):
        raise ValueError("norm_ppf is defined on the open interval (0, 1)")
    q = p - 0.5
    out = np.empty_like(p)

    central = np.abs(q) <= 0.425
    if np.any(central):
        qc = q[central]
        r = 0.180625 - qc * qc
        out[central] = qc * _poly(_A, r) / _poly(_B, r)

    tail = ~central
    if np.any(tail):
        pt = p[tail]
        r = np.sqrt(-np.log(np.minimum(pt, 1.0 - pt)))
        near = r <= 5.0
        x = np.empty_like(r)
        rn = r[near] - 1.6
        x[near] = _poly(_C, rn) / _poly(_D, rn)
        rf = r[~near] - 5.0
        x[~near] = _poly(_E, rf) / _poly(_F, rf)
        out[tail] = np.where(q[tail] < 0.0, -x, x)

    return out[()] if out.ndim == 0 else out


def norm_cdf(x):
    return ndtr(x)


@dataclass(frozen=True)
class WangTransform:
    """Wang's transform g(tau) = Phi(Phi^-1(tau) + lam); lam < 0 is risk-seeking."""

    lam: float

    def distortion(self, tau):
        tau = np.asarray(tau, dtype=float)
        inner = np.clip(tau, 1e-300, 1.0 - 1e-16)
        g = norm_cdf(norm_ppf(inner) + self.lam)
        return np.where(tau <= 0.0, 0.0, np.where(tau >= 1.0, 1.0, g))

    def derivative(self, tau):
        # phi(z + lam) / phi(z) with z = Phi^-1(tau)
        z = norm_ppf(tau)
        return np.exp(-self.lam * z - 0.5 * self.lam**2)


@dataclass(frozen=True)
class CVaR:
    """Tail expectation below ``alpha`` (averse) or above ``1 - alpha`` (seeking)."""

    alpha: float
    mode: str = "seeking"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"CVaR alpha must lie in (0, 1), got {self.alpha}")
        if self.mode not in ("averse", "seeking"):
            raise ValueError(f"CVaR mode must be 'averse' or 'seeking', got {self.mode!r}")

    def distortion(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.mode == "averse":
            return np.minimum(tau / self.alpha, 1.0)
        return np.maximum(0.0, 1.0 - (1.0 - tau) / self.alpha)

    def derivative(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.mode == "averse":
            inside = tau < self.alpha
        else:
            inside = tau > 1.0 - self.alpha
        return np.where(inside, 1.0 / self.alpha, 0.0)


DistortionMeasure = WangTransform | CVaR


def _check_quantile_count(M: int) -> None:
    if int(M) != M or M < 2 or M % 2:
        raise ValueError(f"quantile count must be an even integer >= 2, got {M}")


def quantile_midpoints(M: int) -> np.ndarray:
    """Fractions tau_hat_k = (2k - 1) / (2M), k = 1..M."""
    return _midpoints(int(M)).copy()


@lru_cache(maxsize=None)
def _midpoints(M: int) -> np.ndarray:
    return (2.0 * np.arange(1, M + 1) - 1.0) / (2.0 * M)


def distortion_weights(measure: DistortionMeasure, M: int) -> np.ndarray:
    """Weights g'(tau_hat_k) used to reweight each of the M quantiles."""
    _check_quantile_count(M)
    w = np.asarray(measure.derivative(quantile_midpoints(M)), dtype=float)
    if isinstance(measure, WangTransform) and measure.lam == 0.0:
        # exp(-0 * z - 0) is 1 up to rounding; keep the identity exact
        w = np.ones(M)
    return w


def _as_quantiles(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        raise ValueError("quantile values need at least one axis")
    _check_quantile_count(theta.shape[-1])
    if not np.all(np.isfinite(theta)):
        raise ValueError("quantile values must be finite")
    return theta


def mean_value(theta) -> np.ndarray:
    """Q estimate: arithmetic mean over the quantile axis."""
    return np.mean(np.asarray(theta, dtype=float), axis=-1)


def distorted_expectation(theta, measure: DistortionMeasure, weights=None):
    """(1/M) sum_k g'(tau_hat_k) theta_k over the last axis.

    ``weights`` may be passed to skip recomputing them in hot loops.
    """
    theta = _as_quantiles(theta)
    M = theta.shape[-1]
    w = distortion_weights(measure, M) if weights is None else weights
    return theta @ w / M


def left_truncated_variance(theta):
    """Upper-tail spread around the median quantile.

    sigma_+^2 = 1/(2M) * sum_{j=M/2}^{M} (theta_{M/2} - theta_j)^2 with 1-based
    indices, i.e. M/2 + 1 terms anchored at theta_{M/2}.
    """
    theta = _as_quantiles(theta)
    M = theta.shape[-1]
    upper = theta[..., M // 2 - 1:]
    anchor = theta[..., M // 2 - 1:M // 2]
    return np.sum((anchor - upper) ** 2, axis=-1) / (2.0 * M)


def huber(x, kappa: float = 1.0):
    ax = np.abs(x)
    return np.where(ax <= kappa, 0.5 * x * x, kappa * (ax - 0.5 * kappa))


@njit(cache=True)
def _qh_kernel(pred, tgt, tau, kappa):
    B, M = pred.shape
    loss = np.zeros(B)
    grad = np.zeros((B, M))
    norm = 1.0 / (kappa * M)
    for b in range(B):
        acc = 0.0
        for k in range(M):
            p = pred[b, k]
            t = tau[k]
            g = 0.0
            for j in range(M):
                d = tgt[b, j] - p
                # clip(d) is the Huber derivative; clip * (d - clip / 2) the Huber loss
                c = min(max(d, -kappa), kappa)
                w = 1.0 - t if d < 0.0 else t
                acc += w * c * (d - 0.5 * c)
                g += w * c
            grad[b, k] = -g * norm  # d delta / d pred = -1
        loss[b] = acc * norm
    return loss, grad


def quantile_huber_loss(predicted, targets, kappa: float = 1.0):
    """Quantile Huber regression loss and its gradient w.r.t. ``predicted``.

    ``predicted`` and ``targets`` have shape ``(M,)`` or ``(B, M)``.  For one
    sample the loss is (1/M) sum_k sum_j rho_{tau_hat_k}(targets_j - predicted_k)
    with rho_tau(x) = |tau - 1{x < 0}| * huber_kappa(x) / kappa; a batch is
    averaged over its leading axis.  Targets carry no gradient.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    pred = np.asarray(predicted, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    single = pred.ndim == 1
    if single:
        pred, tgt = pred[None], tgt[None]
    if pred.shape != tgt.shape:
        raise ValueError(f"predicted {pred.shape} and targets {tgt.shape} differ in shape")
    B, M = pred.shape
    loss, grad = _qh_kernel(np.ascontiguousarray(pred), np.ascontiguousarray(tgt),
                            _midpoints(M), float(kappa))
    if single:
        return float(loss[0]), grad[0]
    return float(loss.mean()), grad / B
