"""Evaluators for the disclosure scheme's theoretical guarantees.

Every evaluator is a pure function of its inputs: covariance-phase statistic
gap bound, residual-phase statistic gap interval, worst-case Type-I error of
the DP test and its inversion to an equivalent significance level,
misclassification bounds between local and regulator alarms, and the privacy
losses of the two verification modes.

Conventions used throughout (fixed package-wide):
  * noncentral chi-square CDFs are evaluated on variance-scaled statistics
    T / sigma^2 with noncentrality ||tau||^2 / sigma^2 — the frame in which
    the perturbed statistic's law is exact;
  * thresholds written with an explicit sigma^2 factor are converted through
    that factor before CDF evaluation;
  * probability outputs are clamped to [0, 1] (the raw bounds can exceed 1
    for loose parameters, and clamping preserves validity as upper bounds).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .privacy import PrivacyParams
from .stats import (
    CovFactorization,
    exp_cdf,
    gamma_cdf,
    noncentral_chi2_cdf,
    noncentral_chi2_quantile,
    normal_cdf,
)

__all__ = [
    "NormTracker",
    "BoundReport",
    "BoundInputs",
    "cov_gap_bound",
    "residual_gap_interval",
    "type1_upper_bound",
    "equivalent_alpha",
    "AlphaInversion",
    "misclassification_bounds",
    "cr_privacy_loss",
    "statistic_privacy_profile",
]

ALPHA_FLOOR = 1e-12


class NormTracker:
    """Sliding-window tracker of the max-2-norm vector seen recently.

    Ring buffer of the last ``window`` vectors; the current max is the
    stored vector of largest 2-norm, ties broken by the most recent insert.
    """

    def __init__(self, window: int = 50):
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.window = window
        self._buf: deque[np.ndarray] = deque(maxlen=window)

    def push(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if self._buf and vec.shape != self._buf[0].shape:
            raise ValueError(
                f"vector length {vec.shape} does not match tracker {self._buf[0].shape}"
            )
        self._buf.append(vec.copy())

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def max_vector(self) -> np.ndarray:
        if not self._buf:
            raise ValueError("tracker is empty; run warm-up epochs first")
        best = None
        best_norm = -1.0
        for v in self._buf:  # later entries win ties
            n = float(v @ v)
            if n >= best_norm:
                best, best_norm = v, n
        return best.copy()

    @property
    def max_norm(self) -> float:
        v = self.max_vector
        return float(np.sqrt(v @ v))

    @property
    def median_vector(self) -> np.ndarray:
        """Window entry of median 2-norm: the representative typical vector.

        Feeding the equivalent-significance inversion with this (rather than
        the vector of whichever epoch triggers a recompute) keeps the
        inversion snapshot decoupled from the recompute trigger; triggers
        fire exactly when a new window max arrives, whose own vector would
        make the current and max terms coincide.
        """
        if not self._buf:
            raise ValueError("tracker is empty; run warm-up epochs first")
        norms = [float(v @ v) for v in self._buf]
        order = int(np.argsort(norms, kind="stable")[(len(norms) - 1) // 2])
        return self._buf[order].copy()


def _clamp01(x: float) -> float:
    return float(min(max(x, 0.0), 1.0))


def cov_gap_bound(
    r_w: np.ndarray,
    fac: CovFactorization,
    theta_l: float,
    gamma_cov: float,
) -> tuple[float, float]:
    """Bound on |T_cov_hat - T| from the covariance phase alone.

    Returns (res_energy * theta_l, 1 - gamma_cov): the gap between the
    perturbed and original statistics stays below the bound with at least the
    returned confidence. res_energy is the residual energy in the retained
    eigenbasis of the *original* covariance, the frame in which the bound's
    derivation holds.
    """
    vec_p, lam_p = fac.retained()
    if np.any(lam_p <= 0.0):
        raise ValueError("retained eigenvalues must be positive")
    proj = vec_p.T @ np.asarray(r_w, dtype=float)
    res_energy = float(proj @ proj)
    return res_energy * theta_l, 1.0 - gamma_cov


def residual_gap_interval(
    tau: np.ndarray,
    sigma: float,
    theta_r: float,
    gamma_r: float,
) -> tuple[float, float, float, bool]:
    """Interval [L, U] for the scaled statistic gap (T_res_hat - T)/sigma^2.

    Returns (L, U, joint_prob_lower, swapped). joint_prob_lower multiplies
    the noncentral chi-square mass of [L, U] (noncentrality ||tau||^2/sigma^2)
    by (1-gamma_r)^p. When sum(tau) < 0 the raw endpoints come out reversed;
    they are reordered and flagged, with the probability computed on the
    ordered pair.
    """
    tau = np.asarray(tau, dtype=float)
    p = len(tau)
    s_tau = float(tau.sum())
    lo = theta_r / (sigma**2 * p) * (theta_r - 2.0 * s_tau)
    hi = theta_r / (sigma**2 * p) * (theta_r + 2.0 * s_tau)
    swapped = lo > hi
    if swapped:
        lo, hi = hi, lo
    nc = float(tau @ tau) / sigma**2
    f_hi = noncentral_chi2_cdf(max(hi, 0.0), p, nc)
    f_lo = noncentral_chi2_cdf(max(lo, 0.0), p, nc)
    joint = (f_hi - f_lo) * (1.0 - gamma_r) ** p
    return float(lo), float(hi), _clamp01(joint), swapped


@dataclass(frozen=True)
class BoundInputs:
    """Per-epoch snapshot every bound evaluator reads from.

    tau_cov_hat / tau_cov_max are whitened residuals after the covariance
    phase (current epoch, and the tracked window max); res_energy is the
    residual energy in the original covariance eigenbasis; r_max the largest
    residual 2-norm in the window.
    """

    tau_cov_hat: np.ndarray
    tau_cov_max: np.ndarray
    res_energy: float
    r_max: float
    d: int
    params: PrivacyParams

    @property
    def p(self) -> int:
        return self.params.p

    @property
    def sigma(self) -> float:
        return self.params.sigma

    def _weights(self) -> tuple[float, float]:
        """(omega_1, omega_2): tail weights of the two covariance-phase cases."""
        params = self.params
        theta_l = params.theta_l(self.d)
        arg = self.res_energy * theta_l
        if self.r_max <= 0.0:
            # degenerate window: the gamma-tail case carries all the weight
            w1 = 1.0 if arg <= 0.0 else 0.0
        else:
            rate = params.eps_cov / (params.delta_l * self.r_max**2)
            w1 = 1.0 - gamma_cdf(arg, shape=self.p, rate=rate)
        w2 = exp_cdf(theta_l, rate=params.eps_cov / params.delta_l) ** self.p
        return float(w1), float(w2)

    def scaled_nc_current(self) -> float:
        t = float(self.tau_cov_hat @ self.tau_cov_hat)
        return t / self.sigma**2

    def scaled_nc_max(self) -> float:
        t = float(self.tau_cov_max @ self.tau_cov_max)
        return t / self.sigma**2


def type1_upper_bound(alpha_hat: float, inputs: BoundInputs) -> float:
    """Worst-case Type-I error of the DP test at significance alpha_hat.

    omega_1 * S_cur(q) + omega_2 * S_max(q), where q is the upper-alpha_hat
    quantile of the scaled perturbed statistic's law (noncentral chi-square at
    the current noncentrality), S_cur its own survival there (= alpha_hat by
    construction) and S_max the survival under the window-max noncentrality.
    Monotone increasing in alpha_hat; clamped to [0, 1].
    """
    if not 0.0 < alpha_hat < 1.0:
        raise ValueError(f"alpha_hat must be in (0,1), got {alpha_hat}")
    w1, w2 = inputs._weights()
    nc_cur = inputs.scaled_nc_current()
    nc_max = inputs.scaled_nc_max()
    q = noncentral_chi2_quantile(alpha_hat, inputs.p, nc_cur)
    s_cur = 1.0 - noncentral_chi2_cdf(q, inputs.p, nc_cur)
    s_max = 1.0 - noncentral_chi2_cdf(q, inputs.p, nc_max)
    return _clamp01(w1 * s_cur + w2 * s_max)


@dataclass(frozen=True)
class AlphaInversion:
    """Result of solving type1_upper_bound(alpha_hat) = alpha_target."""

    alpha_hat: float
    achieved: float
    target: float
    degenerate: bool
    mc_estimate: float | None = None
    mc_se: float | None = None


def _mc_type1_estimate(
    alpha_hat: float, inputs: BoundInputs, n_mc: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo estimate of the Type-I upper bound's survival terms."""
    w1, w2 = inputs._weights()
    p = inputs.p
    q = noncentral_chi2_quantile(alpha_hat, p, inputs.scaled_nc_current())
    mu_cur = inputs.tau_cov_hat / inputs.sigma
    mu_max = inputs.tau_cov_max / inputs.sigma
    z = rng.standard_normal((n_mc, p))
    s_cur_hat = float(np.mean(((z + mu_cur) ** 2).sum(axis=1) > q))
    s_max_hat = float(np.mean(((z + mu_max) ** 2).sum(axis=1) > q))
    est = _clamp01(w1 * s_cur_hat + w2 * s_max_hat)
    var = (
        w1**2 * s_cur_hat * (1.0 - s_cur_hat) + w2**2 * s_max_hat * (1.0 - s_max_hat)
    ) / n_mc
    return est, float(np.sqrt(var))


def equivalent_alpha(
    alpha_target: float,
    inputs: BoundInputs,
    n_mc: int = 10_000,
    rng: np.random.Generator | None = None,
) -> AlphaInversion:
    """Solve for the alpha_hat whose worst-case Type-I error equals alpha_target.

    Bisection over alpha_hat in (1e-12, alpha_target], exploiting
    monotonicity of the bound. When the bound at alpha_target is already
    below the target no inversion is needed and alpha_target is returned with
    the degenerate flag. With ``n_mc`` > 0 a Monte Carlo re-estimate of the
    bound at the solution is attached (estimate and standard error), matching
    the simulation route for computing the equivalent level.
    """
    if not 0.0 < alpha_target < 1.0:
        raise ValueError(f"alpha_target must be in (0,1), got {alpha_target}")
    if 0 < n_mc < 1000:
        raise ValueError(f"n_mc must be 0 or >= 1000, got {n_mc}")

    hi = alpha_target
    f_hi = type1_upper_bound(hi, inputs)
    if f_hi <= alpha_target:
        result = AlphaInversion(
            alpha_hat=alpha_target,
            achieved=f_hi,
            target=alpha_target,
            degenerate=True,
        )
    else:
        lo = ALPHA_FLOOR
        f_lo = type1_upper_bound(lo, inputs)
        if f_lo > alpha_target:
            # bound exceeds the target even at the floor: return the floor
            result = AlphaInversion(
                alpha_hat=lo, achieved=f_lo, target=alpha_target, degenerate=True
            )
        else:
            for _ in range(200):
                mid = float(np.sqrt(lo * hi))  # bisect in log space
                f_mid = type1_upper_bound(mid, inputs)
                if f_mid > alpha_target:
                    hi = mid
                else:
                    lo, f_lo = mid, f_mid
                if hi / lo < 1.0 + 1e-12:
                    break
            result = AlphaInversion(
                alpha_hat=lo, achieved=f_lo, target=alpha_target, degenerate=False
            )

    if n_mc > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        est, se = _mc_type1_estimate(result.alpha_hat, inputs, n_mc, rng)
        result = AlphaInversion(
            alpha_hat=result.alpha_hat,
            achieved=result.achieved,
            target=result.target,
            degenerate=result.degenerate,
            mc_estimate=est,
            mc_se=se,
        )
    return result


def misclassification_bounds(
    t_orig: float,
    alpha: float,
    alpha_hat: float,
    inputs: BoundInputs,
) -> tuple[float, float]:
    """Upper bounds on (miss, false-alarm) rates between DP and local alarms.

    With q the scaled DP threshold and chi2_alpha the local central
    threshold, the pivot is T_hat = t_orig + sigma^2 q - chi2_alpha,
    evaluated in the scaled frame (negative pivots give CDF 0):

        P(dp=0 | local=1) <= F_cur(T_hat) * (omega_1 + omega_2)
        P(dp=1 | local=0) <= omega_1 * (1 - F_cur(T_hat))
                              + omega_2 * (1 - F_max(T_hat))

    Both clamped to [0, 1].
    """
    from .stats import central_chi2_quantile

    w1, w2 = inputs._weights()
    p = inputs.p
    sigma2 = inputs.sigma**2
    nc_cur = inputs.scaled_nc_current()
    nc_max = inputs.scaled_nc_max()
    q = noncentral_chi2_quantile(alpha_hat, p, nc_cur)
    chi2_alpha = central_chi2_quantile(alpha, p)
    t_hat_scaled = (t_orig + sigma2 * q - chi2_alpha) / sigma2
    if t_hat_scaled <= 0.0:
        f_cur = 0.0
        f_max = 0.0
    else:
        f_cur = noncentral_chi2_cdf(t_hat_scaled, p, nc_cur)
        f_max = noncentral_chi2_cdf(t_hat_scaled, p, nc_max)
    miss = _clamp01(f_cur * (w1 + w2))
    false_alarm = _clamp01(w1 * (1.0 - f_cur) + w2 * (1.0 - f_max))
    return miss, false_alarm


def cr_privacy_loss(
    delta_r: float,
    sigma: float,
    s_hat: np.ndarray,
    theta_r: float,
    p: int,
    gamma_r: float,
) -> tuple[float, float]:
    """Worst-case privacy loss of the critical-region disclosure.

    Returns (loss, prob_bound) with
    loss = (delta_r/sigma^2) * q^2 * (theta_r^2/p + 1/(2q)), q = 1^T S_hat^-1 1,
    and P[loss exceeded] <= prob_bound = 1 - (1-gamma_r)^p.
    """
    s_hat = np.asarray(s_hat, dtype=float)
    d = s_hat.shape[0]
    ones = np.ones(d)
    try:
        sol = np.linalg.solve(s_hat, ones)
    except np.linalg.LinAlgError as exc:
        raise ValueError("perturbed covariance is singular") from exc
    quad = float(ones @ sol)
    if quad <= 0.0:
        raise ValueError(f"1^T S_hat^-1 1 = {quad:.3e} must be positive (S_hat not PD)")
    loss = delta_r / sigma**2 * quad**2 * (theta_r**2 / p + 1.0 / (2.0 * quad))
    prob_bound = 1.0 - (1.0 - gamma_r) ** p
    return float(loss), _clamp01(prob_bound)


def statistic_privacy_profile(
    eps_cov: float,
    sigma: float,
    delta_vec: np.ndarray,
    cov: np.ndarray,
    eps_prime: float | None = None,
) -> tuple[float, float]:
    """(eps', delta') privacy of disclosing the covariance-phase statistic.

    a = delta^T C^-1 delta, eps' >= eps_cov + a/(2 sigma^2) (the lower bound
    is used when ``eps_prime`` is not given), and with b = ||C^-1 delta||,
    delta' = Phi(sigma^2 (eps'-eps_cov)/b - a/(2b))
             - Phi(-sigma^2 (eps'-eps_cov)/b + a/(2b)),
    Phi the CDF of N(0, a). At the lower bound the two arguments coincide at
    zero and delta' vanishes.
    """
    cov = np.asarray(cov, dtype=float)
    delta_vec = np.asarray(delta_vec, dtype=float)
    if cov.shape[0] != cov.shape[1] or cov.shape[0] != len(delta_vec):
        raise ValueError("cov must be square and match delta_vec length")
    try:
        sol = np.linalg.solve(cov, delta_vec)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance matrix is singular") from exc
    a = float(delta_vec @ sol)
    if a <= 0.0:
        raise ValueError(f"delta^T C^-1 delta = {a:.3e} must be positive")
    b = float(np.linalg.norm(sol))
    # carry the budget increment separately so u vanishes exactly at the bound
    increment = a / (2.0 * sigma**2)
    eps_lb = eps_cov + increment
    if eps_prime is not None and float(eps_prime) > eps_lb:
        increment = float(eps_prime) - eps_cov
    u = sigma**2 * increment / b - a / (2.0 * b)
    delta_out = normal_cdf(u, 0.0, a) - normal_cdf(-u, 0.0, a)
    return float(eps_cov + increment), _clamp01(delta_out)


@dataclass(frozen=True)
class BoundReport:
    """Evaluated values of every bound for one epoch snapshot."""

    cov_gap_bound: float
    cov_gap_confidence: float
    gap_low: float
    gap_high: float
    gap_joint_prob: float
    type1_upper: float
    alpha_hat: float
    miss_bound: float
    false_alarm_bound: float
    cr_loss: float
    cr_loss_prob: float
    eps_prime: float
    delta_prime: float
    seed: int
    n_mc: int

    def to_flat(self) -> dict[str, str]:
        """Flat key-value form for audit logs and report files."""
        out = {}
        for k, v in self.__dict__.items():
            out[k] = str(v) if isinstance(v, int) else format(float(v), ".17g")
        return out

    FIELDS = (
        "cov_gap_bound",
        "cov_gap_confidence",
        "gap_low",
        "gap_high",
        "gap_joint_prob",
        "type1_upper",
        "alpha_hat",
        "miss_bound",
        "false_alarm_bound",
        "cr_loss",
        "cr_loss_prob",
        "eps_prime",
        "delta_prime",
        "seed",
        "n_mc",
    )
