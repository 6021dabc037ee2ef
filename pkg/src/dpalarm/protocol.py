"""Epoch aggregation, utility/regulator verification, and the wire format.

A utility session aggregates W filter steps into an epoch, raises its local
(non-DP) alarm, runs the two-phase disclosure, and emits one tuple per epoch
in one of two mutually exclusive modes fixed at handshake:

  * CR (critical region): the tuple carries the perturbed covariance, the
    regulator-frame residual, and a pre-multiplied threshold; the regulator
    independently recomputes the DP statistic and compares.
  * PV (p-value): the tuple carries both scaled statistics and the equivalent
    significance level; the regulator rebuilds the statistic's law and checks
    the alarm via its quantile / p-value.

Scaled-statistic convention, normative on the wire: PV statistics are
||tau/sigma||^2; the CR threshold field is sigma^2 * (upper-alpha_hat quantile
of the scaled law), so the regulator compares the unscaled ||tau_res_hat||^2
directly against it.

Records are newline-delimited UTF-8 JSON objects, floats serialized with 17
significant digits (round-trip exact for 64-bit floats). Unknown fields are
ignored for forward compatibility; malformed records raise ProtocolError with
the offending field path.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import AlphaInversion, BoundInputs, NormTracker, equivalent_alpha
from .ekf import ResidualRecord
from .privacy import PrivacyParams, noise_calibration_factor, sequential_disclose
from .stats import chi2_test, eig_factorize, noncentral_chi2_cdf, noncentral_chi2_quantile, whiten

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "EpochAggregate",
    "CrTuple",
    "PvTuple",
    "Verdict",
    "Handshake",
    "aggregate_epoch",
    "UtilitySession",
    "RegulatorSession",
    "encode_record",
    "decode_record",
]

PROTOCOL_VERSION = 1
ALPHA_RECOMPUTE_DRIFT = 0.10  # refresh alpha_hat when tau_max norm moves >10%


class ProtocolError(ValueError):
    """Malformed record, schema violation, or non-finite wire value."""


@dataclass(frozen=True)
class EpochAggregate:
    """Sums of one epoch's residuals/covariances plus the local alarm."""

    w: int
    r_w: np.ndarray
    s_w: np.ndarray
    rho: int
    n_steps: int
    t_stat: float


def aggregate_epoch(
    records: Sequence[ResidualRecord],
    w: int,
    alpha: float,
    p: int,
) -> EpochAggregate:
    """Sum W contiguous records and raise the local chi-square alarm.

    Raises:
        ValueError: empty epoch or a gap in the step index sequence.
    """
    if not records:
        raise ValueError("epoch must contain at least one record")
    ts = [rec.t for rec in records]
    for prev, cur in zip(ts, ts[1:]):
        if cur != prev + 1:
            raise ValueError(f"gap in step sequence: {prev} -> {cur}")
    r_w = np.sum([rec.r for rec in records], axis=0)
    s_w = np.sum([rec.s for rec in records], axis=0)
    fac = eig_factorize(s_w, count=p)
    outcome = chi2_test(whiten(r_w, fac), alpha, dof=p)
    return EpochAggregate(
        w=w,
        r_w=r_w,
        s_w=0.5 * (s_w + s_w.T),
        rho=outcome.rho,
        n_steps=len(records),
        t_stat=outcome.t_stat,
    )


@dataclass(frozen=True)
class CrTuple:
    uid: str
    w: int
    s_hat: np.ndarray  # (d, d)
    tau_rg: np.ndarray  # (d,)
    threshold: float  # sigma^2-premultiplied scaled quantile
    rho: int


@dataclass(frozen=True)
class PvTuple:
    uid: str
    w: int
    t_res: float  # ||tau_res_hat / sigma||^2
    t_cov: float  # ||tau_cov_hat / sigma||^2
    alpha_hat: float
    rho: int


@dataclass(frozen=True)
class Verdict:
    uid: str
    w: int
    rho_hat: int
    matched: bool
    pvalue: float | None = None
    reason: str | None = None
    t_res_hat: float | None = None
    threshold: float | None = None

    @property
    def rejected(self) -> bool:
        return self.reason is not None


@dataclass(frozen=True)
class Handshake:
    uid: str
    mode: str  # "cr" | "pv"
    d: int
    p: int
    epoch_len: int
    params: PrivacyParams


@dataclass
class EpochResult:
    """Utility-side record of one disclosed epoch (for summaries/experiments)."""

    w: int
    rho: int
    rho_hat_local: int  # the utility's own evaluation of the DP alarm
    t_stat: float
    t_res_scaled: float
    t_cov_scaled: float
    alpha_hat: float
    threshold: float  # premultiplied CR threshold
    tuple_obj: object = None


class UtilitySession:
    """Per-utility disclosure state machine (one of the two modes, fixed).

    Owns the trackers, the alpha_hat cache, and the session rng. Disclosure
    never writes back into filter or plant state; it only consumes epoch
    aggregates.
    """

    def __init__(
        self,
        uid: str,
        mode: str,
        params: PrivacyParams,
        d: int,
        alpha: float,
        rng: np.random.Generator,
        epoch_len: int = 1,
        tracker_window: int = 50,
        n_mc: int = 0,
    ):
        if mode not in ("cr", "pv"):
            raise ValueError(f"mode must be 'cr' or 'pv', got {mode!r}")
        self.uid = uid
        self.epoch_len = int(epoch_len)
        self.mode = mode
        self.params = params
        self.d = d
        self.alpha = float(alpha)
        self.rng = rng
        self.n_mc = n_mc
        self.tau_tracker = NormTracker(tracker_window)
        self.r_tracker = NormTracker(tracker_window)
        self._energy_window: deque[float] = deque(maxlen=tracker_window)
        self._alpha_cache: AlphaInversion | None = None
        self._alpha_cache_norm: float = 0.0
        self.epoch_count = 0
        self.last_inputs: BoundInputs | None = None
        self.last_inversion: AlphaInversion | None = None

    def handshake(self) -> Handshake:
        return Handshake(
            uid=self.uid,
            mode=self.mode,
            d=self.d,
            p=self.params.p,
            epoch_len=self.epoch_len,
            params=self.params,
        )

    def _representative_inputs(self) -> BoundInputs:
        """Inversion snapshot drawn from the trackers, not the current epoch."""
        energies = sorted(self._energy_window)
        return BoundInputs(
            tau_cov_hat=self.tau_tracker.median_vector,
            tau_cov_max=self.tau_tracker.max_vector,
            res_energy=energies[(len(energies) - 1) // 2],
            r_max=self.r_tracker.max_norm,
            d=self.d,
            params=self.params,
        )

    def _alpha_hat(self) -> AlphaInversion:
        cur_norm = self.tau_tracker.max_norm
        stale = (
            self._alpha_cache is None
            or self._alpha_cache_norm <= 0.0
            or abs(cur_norm - self._alpha_cache_norm) > ALPHA_RECOMPUTE_DRIFT * self._alpha_cache_norm
        )
        if stale:
            self.last_inversion = equivalent_alpha(
                self.alpha, self._representative_inputs(), n_mc=self.n_mc
            )
            self._alpha_cache = self.last_inversion
            self._alpha_cache_norm = cur_norm
        return self._alpha_cache

    def process_epoch(self, agg: EpochAggregate) -> EpochResult:
        """Run the disclosure pipeline on one aggregate and build the tuple."""
        params = self.params
        disc = sequential_disclose(agg.r_w, agg.s_w, params, self.rng)
        self.tau_tracker.push(disc.tau_cov_hat)
        self.r_tracker.push(agg.r_w)
        fac_orig = eig_factorize(agg.s_w, count=params.p)
        vec_p, _ = fac_orig.retained()
        proj = vec_p.T @ agg.r_w
        self._energy_window.append(float(proj @ proj))

        inputs = BoundInputs(
            tau_cov_hat=disc.tau_cov_hat,
            tau_cov_max=self.tau_tracker.max_vector,
            res_energy=float(proj @ proj),
            r_max=self.r_tracker.max_norm,
            d=self.d,
            params=params,
        )
        inversion = self._alpha_hat()
        alpha_hat = inversion.alpha_hat

        sigma = disc.sigma
        nc = float(disc.tau_cov_hat @ disc.tau_cov_hat) / sigma**2
        q = noncentral_chi2_quantile(alpha_hat, params.p, nc)

        if params.use_calibration:
            mu = noise_calibration_factor(inputs.tau_cov_max, q)
            sigma_cal = float(np.sqrt(mu)) * params.sigma
            if sigma_cal > 0.0 and not math.isclose(sigma_cal, sigma):
                disc = sequential_disclose(agg.r_w, agg.s_w, params, self.rng, sigma=sigma_cal)
                sigma = sigma_cal
                nc = float(disc.tau_cov_hat @ disc.tau_cov_hat) / sigma**2
                q = noncentral_chi2_quantile(alpha_hat, params.p, nc)

        threshold = sigma**2 * q
        t_res = disc.t_res_hat / sigma**2
        t_cov = disc.t_cov_hat / sigma**2
        rho_hat_local = int(disc.t_res_hat > threshold)

        if self.mode == "cr":
            tup = CrTuple(
                uid=self.uid,
                w=agg.w,
                s_hat=disc.s_hat,
                tau_rg=disc.tau_rg,
                threshold=threshold,
                rho=agg.rho,
            )
        else:
            tup = PvTuple(
                uid=self.uid,
                w=agg.w,
                t_res=t_res,
                t_cov=t_cov,
                alpha_hat=alpha_hat,
                rho=agg.rho,
            )

        self.epoch_count += 1
        self.last_inputs = inputs
        return EpochResult(
            w=agg.w,
            rho=agg.rho,
            rho_hat_local=rho_hat_local,
            t_stat=agg.t_stat,
            t_res_scaled=t_res,
            t_cov_scaled=t_cov,
            alpha_hat=alpha_hat,
            threshold=threshold,
            tuple_obj=tup,
        )


def verify_cr(tup: CrTuple, p: int) -> Verdict:
    """Critical-region verification: refactorize, rewhiten, compare.

    Any malformed disclosure (non-PD covariance, non-finite values) yields a
    typed rejection verdict rather than an exception.
    """
    try:
        fac = eig_factorize(tup.s_hat, count=p)
        tau_res = whiten(tup.tau_rg, fac)
    except ValueError as exc:
        return Verdict(
            uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason=f"malformed disclosure: {exc}"
        )
    t_res_hat = float(tau_res @ tau_res)
    rho_hat = int(t_res_hat > tup.threshold)
    return Verdict(
        uid=tup.uid,
        w=tup.w,
        rho_hat=rho_hat,
        matched=(rho_hat == tup.rho),
        t_res_hat=t_res_hat,
        threshold=tup.threshold,
    )


def verify_pv(tup: PvTuple, p: int) -> Verdict:
    """P-value verification against the scaled statistic's disclosed law."""
    if not 0.0 < tup.alpha_hat < 1.0:
        return Verdict(
            uid=tup.uid,
            w=tup.w,
            rho_hat=0,
            matched=False,
            reason=f"alpha_hat out of range: {tup.alpha_hat}",
        )
    if tup.t_res < 0.0 or tup.t_cov < 0.0:
        return Verdict(
            uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason="negative statistic"
        )
    threshold = noncentral_chi2_quantile(tup.alpha_hat, p, tup.t_cov)
    rho_hat = int(tup.t_res > threshold)
    pvalue = 1.0 - noncentral_chi2_cdf(tup.t_res, p, tup.t_cov)
    return Verdict(
        uid=tup.uid,
        w=tup.w,
        rho_hat=rho_hat,
        matched=(rho_hat == tup.rho),
        pvalue=float(pvalue),
        t_res_hat=tup.t_res,
        threshold=threshold,
    )


class RegulatorSession:
    """Per-utility verification state at the regulator.

    Stateless per tuple apart from duplicate-epoch tracking: a repeated epoch
    index yields a rejection verdict (at-most-once per (uid, w)).
    """

    def __init__(self, handshake: Handshake):
        self.handshake = handshake
        self.seen: set[int] = set()
        self.tuples_received = 0
        self.verdicts_sent = 0
        self.mismatches = 0

    def verify(self, tup: CrTuple | PvTuple) -> Verdict:
        self.tuples_received += 1
        if tup.uid != self.handshake.uid:
            verdict = Verdict(
                uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason="uid mismatch"
            )
        elif tup.w in self.seen:
            verdict = Verdict(
                uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason="duplicate epoch index"
            )
        elif isinstance(tup, CrTuple):
            if self.handshake.mode != "cr":
                verdict = Verdict(
                    uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason="mode mismatch"
                )
            else:
                verdict = verify_cr(tup, self.handshake.p)
        elif isinstance(tup, PvTuple):
            if self.handshake.mode != "pv":
                verdict = Verdict(
                    uid=tup.uid, w=tup.w, rho_hat=0, matched=False, reason="mode mismatch"
                )
            else:
                verdict = verify_pv(tup, self.handshake.p)
        else:
            verdict = Verdict(
                uid=getattr(tup, "uid", "?"),
                w=getattr(tup, "w", -1),
                rho_hat=0,
                matched=False,
                reason="unknown tuple type",
            )
        if verdict.reason is None:
            self.seen.add(tup.w)
        self.verdicts_sent += 1
        if not verdict.matched:
            self.mismatches += 1
        return verdict


# --- wire format -----------------------------------------------------------


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ProtocolError(f"non-finite number on the wire: {v}")
    return format(float(v), ".17g")


def _emit(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ",".join(_emit(x) for x in np.asarray(v).reshape(-1)) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_emit(x)}" for k, x in v.items()) + "}"
    raise ProtocolError(f"cannot serialize {type(v).__name__}")


def _emit_record(fields: dict) -> str:
    return "{" + ",".join(f"{json.dumps(k)}:{_emit(v)}" for k, v in fields.items()) + "}"


def encode_record(obj) -> str:
    """Serialize a handshake, tuple, or verdict to one wire line (no newline)."""
    if isinstance(obj, Handshake):
        return _emit_record(
            {
                "v": PROTOCOL_VERSION,
                "mode": obj.mode,
                "uid": obj.uid,
                "d": obj.d,
                "p": obj.p,
                "W": obj.epoch_len,
                "params": obj.params.to_flat(),
            }
        )
    if isinstance(obj, CrTuple):
        return _emit_record(
            {
                "v": PROTOCOL_VERSION,
                "mode": "cr",
                "uid": obj.uid,
                "w": obj.w,
                "s_hat": np.asarray(obj.s_hat, dtype=float).reshape(-1),
                "tau_rg": np.asarray(obj.tau_rg, dtype=float),
                "thr": float(obj.threshold),
                "rho": int(obj.rho),
            }
        )
    if isinstance(obj, PvTuple):
        return _emit_record(
            {
                "v": PROTOCOL_VERSION,
                "mode": "pv",
                "uid": obj.uid,
                "w": obj.w,
                "t_res": float(obj.t_res),
                "t_cov": float(obj.t_cov),
                "alpha_hat": float(obj.alpha_hat),
                "rho": int(obj.rho),
            }
        )
    if isinstance(obj, Verdict):
        fields = {
            "v": PROTOCOL_VERSION,
            "uid": obj.uid,
            "w": obj.w,
            "rho_hat": int(obj.rho_hat),
            "matched": int(obj.matched),
        }
        if obj.pvalue is not None:
            fields["pvalue"] = float(obj.pvalue)
        if obj.reason is not None:
            fields["reason"] = obj.reason
        return _emit_record(fields)
    raise ProtocolError(f"cannot encode {type(obj).__name__}")


def _reject_constant(name: str):
    raise ProtocolError(f"non-finite constant on the wire: {name}")


def _need(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise ProtocolError(f"{path}.{key}: missing field")
    val = obj[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ProtocolError(f"{path}.{key}: expected number, got {type(val).__name__}")
        val = float(val)
        if not math.isfinite(val):
            raise ProtocolError(f"{path}.{key}: non-finite number")
        return val
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ProtocolError(f"{path}.{key}: expected integer, got {type(val).__name__}")
        return int(val)
    if kind is str:
        if not isinstance(val, str):
            raise ProtocolError(f"{path}.{key}: expected string, got {type(val).__name__}")
        return val
    if kind is list:
        if not isinstance(val, list):
            raise ProtocolError(f"{path}.{key}: expected array, got {type(val).__name__}")
        out = []
        for i, x in enumerate(val):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise ProtocolError(f"{path}.{key}[{i}]: expected finite number")
            out.append(float(x))
        return out
    raise AssertionError(kind)


def decode_record(line: str | bytes) -> Handshake | CrTuple | PvTuple | Verdict:
    """Parse one wire line into a typed record.

    Raises:
        ProtocolError: truncated/malformed JSON, bad version, schema
            violation, or non-finite numbers — with the offending field path.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid utf-8: {exc}") from exc
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed record: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"record must be an object, got {type(obj).__name__}")
    v = _need(obj, "v", int, "record")
    if v != PROTOCOL_VERSION:
        raise ProtocolError(f"record.v: unsupported version {v}")

    if "rho_hat" in obj:  # verdict
        return Verdict(
            uid=_need(obj, "uid", str, "verdict"),
            w=_need(obj, "w", int, "verdict"),
            rho_hat=_need(obj, "rho_hat", int, "verdict"),
            matched=bool(_need(obj, "matched", int, "verdict")),
            pvalue=_need(obj, "pvalue", float, "verdict") if "pvalue" in obj else None,
            reason=_need(obj, "reason", str, "verdict") if "reason" in obj else None,
        )
    mode = _need(obj, "mode", str, "record")
    if mode not in ("cr", "pv"):
        raise ProtocolError(f"record.mode: unknown mode {mode!r}")
    if "params" in obj:  # handshake
        d = _need(obj, "d", int, "handshake")
        p = _need(obj, "p", int, "handshake")
        epoch_len = _need(obj, "W", int, "handshake")
        raw = obj["params"]
        if not isinstance(raw, dict):
            raise ProtocolError("handshake.params: expected object")
        try:
            params = PrivacyParams.from_flat(raw)
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"handshake.params: {exc}") from exc
        if d < 1 or p < 1 or p > d or epoch_len < 1:
            raise ProtocolError(f"handshake: invalid dims d={d} p={p} W={epoch_len}")
        return Handshake(
            uid=_need(obj, "uid", str, "handshake"),
            mode=mode,
            d=d,
            p=p,
            epoch_len=epoch_len,
            params=params,
        )
    if mode == "cr":
        s_flat = _need(obj, "s_hat", list, "cr")
        d = math.isqrt(len(s_flat))
        if d * d != len(s_flat) or d < 1:
            raise ProtocolError(f"cr.s_hat: length {len(s_flat)} is not a square")
        tau_rg = _need(obj, "tau_rg", list, "cr")
        if len(tau_rg) != d:
            raise ProtocolError(f"cr.tau_rg: length {len(tau_rg)} != d={d}")
        return CrTuple(
            uid=_need(obj, "uid", str, "cr"),
            w=_need(obj, "w", int, "cr"),
            s_hat=np.array(s_flat).reshape(d, d),
            tau_rg=np.array(tau_rg),
            threshold=_need(obj, "thr", float, "cr"),
            rho=_need(obj, "rho", int, "cr"),
        )
    return PvTuple(
        uid=_need(obj, "uid", str, "pv"),
        w=_need(obj, "w", int, "pv"),
        t_res=_need(obj, "t_res", float, "pv"),
        t_cov=_need(obj, "t_cov", float, "pv"),
        alpha_hat=_need(obj, "alpha_hat", float, "pv"),
        rho=_need(obj, "rho", int, "pv"),
    )
