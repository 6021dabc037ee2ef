"""Statistical kernels for residual-based alarm testing.

Covariance eigenfactorization and whitening, the chi-square alarm test, a
noncentral chi-square distribution (CDF and upper quantile) implemented as a
Poisson-weighted mixture of central chi-square CDFs, plus the auxiliary
distributions (gamma, exponential, Laplace, normal) consumed by the privacy
bound calculators.

All functions are pure and safe for unrestricted parallel use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

__all__ = [
    "CovFactorization",
    "TestOutcome",
    "eig_factorize",
    "whiten",
    "chi2_test",
    "central_chi2_quantile",
    "noncentral_chi2_cdf",
    "noncentral_chi2_quantile",
    "gamma_cdf",
    "exp_cdf",
    "laplace_sample",
    "normal_cdf",
]

# Max Poisson-mixture terms; beyond this the noncentrality is rejected rather
# than silently losing accuracy.
_MAX_SERIES_TERMS = 100_000
# Poisson mass left outside the summation window (absolute CDF error floor).
_SERIES_TAIL_MASS = 1e-13


@dataclass(frozen=True)
class CovFactorization:
    """Eigenfactorization of a symmetric PSD covariance, top-p retained.

    Attributes:
        vectors: (d, d) orthonormal eigenvectors as columns, ordered to match
            ``lambdas``; each column's largest-magnitude component is positive
            so repeated factorizations are reproducible.
        lambdas: (d,) eigenvalues sorted descending.
        p: number of leading components retained for whitening, 1 <= p <= d.
    """

    vectors: np.ndarray
    lambdas: np.ndarray
    p: int

    @property
    def d(self) -> int:
        return int(self.lambdas.shape[0])

    def retained(self) -> tuple[np.ndarray, np.ndarray]:
        """Top-p eigenvectors (d, p) and eigenvalues (p,)."""
        return self.vectors[:, : self.p], self.lambdas[: self.p]

    def reconstruct(self) -> np.ndarray:
        """V diag(lambdas) V^T."""
        return (self.vectors * self.lambdas) @ self.vectors.T


@dataclass(frozen=True)
class TestOutcome:
    """Result of one chi-square alarm test."""

    tau: np.ndarray
    t_stat: float
    threshold: float
    rho: int
    alpha: float


def _check_symmetric(s: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s))))
    asym = float(np.max(np.abs(s - s.T)))
    if asym > tol * scale:
        raise ValueError(f"matrix not symmetric: max asymmetry {asym:.3e}")
    return 0.5 * (s + s.T)


def eig_factorize(
    s: np.ndarray,
    count: int | None = None,
    variance_fraction: float | None = None,
) -> CovFactorization:
    """Factorize a symmetric PSD matrix with a deterministic sign convention.

    Exactly one of ``count`` / ``variance_fraction`` selects the retained
    component count p; with neither given, all d components are kept.
    ``variance_fraction=q`` keeps the smallest p whose leading eigenvalues
    cover at least fraction q of the total.

    Raises:
        ValueError: non-symmetric input, an eigenvalue below
            -1e-8 * trace, or an invalid selector.
    """
    s = _check_symmetric(s)
    d = s.shape[0]
    lam, vec = np.linalg.eigh(s)
    # eigh returns ascending; flip to descending
    lam = lam[::-1].copy()
    vec = vec[:, ::-1].copy()

    trace = float(np.trace(s))
    if lam[-1] < -1e-8 * max(trace, 1.0):
        raise ValueError(
            f"matrix not PSD: smallest eigenvalue {lam[-1]:.3e} "
            f"below tolerance for trace {trace:.3e}"
        )
    lam = np.maximum(lam, 0.0)

    # Sign convention: largest-magnitude component of each column positive.
    for j in range(d):
        k = int(np.argmax(np.abs(vec[:, j])))
        if vec[k, j] < 0:
            vec[:, j] = -vec[:, j]

    if count is not None and variance_fraction is not None:
        raise ValueError("give either count or variance_fraction, not both")
    if count is not None:
        p = int(count)
        if not 1 <= p <= d:
            raise ValueError(f"count must be in [1, {d}], got {count}")
    elif variance_fraction is not None:
        q = float(variance_fraction)
        if not 0.0 < q <= 1.0:
            raise ValueError(f"variance_fraction must be in (0, 1], got {q}")
        total = float(lam.sum())
        if total <= 0.0:
            raise ValueError("variance_fraction selection needs a nonzero spectrum")
        frac = np.cumsum(lam) / total
        p = int(np.searchsorted(frac, q - 1e-15) + 1)
        p = min(p, d)
    else:
        p = d

    return CovFactorization(vectors=vec, lambdas=lam, p=p)


def whiten(r: np.ndarray, fac: CovFactorization) -> np.ndarray:
    """Project r onto the retained eigenbasis and scale to unit variance.

    Returns the p-vector with components (v_i^T r) / sqrt(lambda_i).

    Raises:
        ValueError: a retained eigenvalue is <= 0 (clamp eigenvalues upstream
            before whitening).
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (fac.d,):
        raise ValueError(f"residual length {r.shape} does not match d={fac.d}")
    vec, lam = fac.retained()
    if np.any(lam <= 0.0):
        raise ValueError(
            "retained eigenvalue <= 0; clamp eigenvalues upstream before whitening"
        )
    return (vec.T @ r) / np.sqrt(lam)


def central_chi2_quantile(alpha_upper: float, k: float) -> float:
    """Upper-alpha quantile of the central chi-square with k dof."""
    if not 0.0 < alpha_upper < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha_upper}")
    return float(2.0 * special.gammaincinv(k / 2.0, 1.0 - alpha_upper))


def chi2_test(tau: np.ndarray, alpha: float, dof: int | None = None) -> TestOutcome:
    """Chi-square alarm test on a whitened residual.

    The statistic is ||tau||^2; the alarm fires (rho=1) strictly above the
    central chi-square upper-alpha quantile at ``dof`` degrees of freedom
    (default: len(tau)).
    """
    tau = np.asarray(tau, dtype=float)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    p = len(tau) if dof is None else int(dof)
    t_stat = float(tau @ tau)
    threshold = central_chi2_quantile(alpha, p)
    return TestOutcome(
        tau=tau,
        t_stat=t_stat,
        threshold=threshold,
        rho=int(t_stat > threshold),
        alpha=float(alpha),
    )


def _poisson_window(mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Poisson(mu) weights over a window covering all but ~1e-13 mass."""
    if mu <= 0.0:
        return np.array([0]), np.array([1.0])
    half = int(np.ceil(10.0 * np.sqrt(mu) + 35.0))
    lo = max(0, int(np.floor(mu)) - half)
    hi = int(np.floor(mu)) + half
    if hi - lo + 1 > _MAX_SERIES_TERMS:
        raise ValueError(
            f"noncentrality too large for the series (needs {hi - lo + 1} terms, "
            f"cap {_MAX_SERIES_TERMS})"
        )
    j = np.arange(lo, hi + 1)
    logw = j * np.log(mu) - mu - special.gammaln(j + 1.0)
    w = np.exp(logw)
    # normalize away float accumulation error so the mixture CDF can reach 1;
    # the window holds all but ~1e-13 of the true mass
    return j, w / w.sum()


def noncentral_chi2_cdf(x, k: float, lam: float):
    """CDF of the noncentral chi-square with k dof and noncentrality lam.

    Poisson-weighted mixture of central chi-square CDFs, truncated so the
    absolute error stays below 1e-9. Vectorized over x; a scalar x returns a
    float.

    Raises:
        ValueError: negative x or lam, or lam beyond the series term cap.
    """
    if k < 1:
        raise ValueError(f"dof must be >= 1, got {k}")
    if lam < 0.0:
        raise ValueError(f"noncentrality must be >= 0, got {lam}")
    x_arr = np.asarray(x, dtype=float)
    scalar = x_arr.ndim == 0
    x_arr = np.atleast_1d(x_arr)
    if np.any(x_arr < 0.0):
        raise ValueError("x must be >= 0")

    if lam == 0.0:
        out = special.gammainc(k / 2.0, x_arr / 2.0)
    else:
        j, w = _poisson_window(lam / 2.0)
        out = np.empty_like(x_arr)
        # Chunk over x so the (terms x points) table stays small.
        chunk = max(1, int(4_000_000 // max(len(j), 1)))
        shapes = k / 2.0 + j
        for start in range(0, len(x_arr), chunk):
            xs = x_arr[start : start + chunk]
            tbl = special.gammainc(shapes[:, None], xs[None, :] / 2.0)
            out[start : start + chunk] = w @ tbl
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def noncentral_chi2_quantile(alpha_upper: float, k: float, lam: float) -> float:
    """x such that 1 - noncentral_chi2_cdf(x, k, lam) = alpha_upper.

    Bracketing plus Brent root finding; converges to ~1e-9 in probability for
    all valid inputs.
    """
    if not 0.0 < alpha_upper < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha_upper}")
    if lam == 0.0:
        return central_chi2_quantile(alpha_upper, k)
    target = 1.0 - alpha_upper
    hi = k + lam + 10.0 * np.sqrt(2.0 * (k + 2.0 * lam)) + 10.0
    it = 0
    while noncentral_chi2_cdf(hi, k, lam) < target:
        hi *= 2.0
        it += 1
        if it > 200:
            raise RuntimeError("quantile bracketing failed to converge")
    root = optimize.brentq(
        lambda t: noncentral_chi2_cdf(t, k, lam) - target,
        0.0,
        hi,
        xtol=1e-12,
        rtol=8.9e-16,
        maxiter=200,
    )
    return float(root)


def gamma_cdf(x, shape: float, rate: float):
    """CDF of Gamma(shape, rate) via the regularized lower incomplete gamma."""
    if shape <= 0.0 or rate <= 0.0:
        raise ValueError(f"shape and rate must be > 0, got {shape}, {rate}")
    x_arr = np.asarray(x, dtype=float)
    out = np.where(x_arr > 0.0, special.gammainc(shape, rate * np.maximum(x_arr, 0.0)), 0.0)
    return float(out) if np.ndim(x) == 0 else out


def exp_cdf(x, rate: float):
    """CDF of Exp(rate)."""
    if rate <= 0.0:
        raise ValueError(f"rate must be > 0, got {rate}")
    x_arr = np.asarray(x, dtype=float)
    out = np.where(x_arr > 0.0, -np.expm1(-rate * np.maximum(x_arr, 0.0)), 0.0)
    return float(out) if np.ndim(x) == 0 else out


def laplace_sample(scale: float, rng: np.random.Generator, size=None):
    """Inverse-CDF sampling of Laplace(0, scale)."""
    if scale < 0.0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    u = rng.random(size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def normal_cdf(x, mean: float = 0.0, var: float = 1.0):
    """erf-based CDF of N(mean, var)."""
    if var <= 0.0:
        raise ValueError(f"variance must be > 0, got {var}")
    z = (np.asarray(x, dtype=float) - mean) / np.sqrt(2.0 * var)
    out = 0.5 * (1.0 + special.erf(z))
    return float(out) if np.ndim(x) == 0 else out
