"""Evaluation metrics, computed in original (destandardized) scale.

Percentiles use linear interpolation between order statistics at rank
q*(n-1). The mean-relative-error denominator is guarded by
delta = 0.01 * per-channel std so the metric stays finite when the truth
crosses zero; the guard value is recorded in the report metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateDataError, ShapeMismatchError

MRE_GUARD_FACTOR = 0.01


@dataclass
class MetricsReport:
    mse: float
    rmse: float
    mae: float
    mre_percent: float
    ae_95: float
    ae_99: float
    r2: float
    relative_l2: float
    per_channel: dict = field(default_factory=dict)
    weighted_r2: float | None = None
    weighted_r2_per_channel: dict = field(default_factory=dict)
    mre_guard: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "mse": self.mse, "rmse": self.rmse, "mae": self.mae,
            "mre_percent": self.mre_percent, "ae_95": self.ae_95,
            "ae_99": self.ae_99, "r2": self.r2, "relative_l2": self.relative_l2,
            "mre_guard": self.mre_guard,
        }
        for ch, sub in self.per_channel.items():
            for k, v in sub.items():
                d[f"channel_{ch}.{k}"] = v
        if self.weighted_r2 is not None:
            d["weighted_r2"] = self.weighted_r2
            for ch, v in self.weighted_r2_per_channel.items():
                d[f"channel_{ch}.weighted_r2"] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        d = self.to_dict()
        d.pop("mre_guard", None)
        lines = ["metric,value"]
        lines += [f"{k},{v!r}" for k, v in sorted(d.items())]
        return "\n".join(lines) + "\n"


def _as_mcn(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[:, None, :]
    if y.ndim != 3:
        raise ShapeMismatchError(f"expected [M, C, N] or [M, N] fields, got {y.shape}")
    return y


def percentile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics at rank q*(n-1)."""
    return float(np.percentile(values, q, method="linear"))


def _scalar_metrics(yt: np.ndarray, yp: np.ndarray, guard: float) -> dict:
    err = yp - yt
    abs_err = np.abs(err)
    mse = float(np.mean(err ** 2))
    ybar = yt.mean()
    ss_tot = float(np.sum((yt - ybar) ** 2))
    return {
        "mse": mse,
        "rmse": float(np.sqrt(mse)),
        "mae": float(np.mean(abs_err)),
        "mre_percent": float(100.0 * np.mean(abs_err / np.maximum(np.abs(yt), guard))),
        "ae_95": percentile(abs_err, 95.0),
        "ae_99": percentile(abs_err, 99.0),
        "r2": float(1.0 - np.sum(err ** 2) / ss_tot) if ss_tot > 0 else float("nan"),
        "relative_l2": float(np.linalg.norm(err) / np.linalg.norm(yt)),
    }


def compute_metrics(y_true, y_pred, channel_std: np.ndarray | None = None) -> MetricsReport:
    """Pooled and per-channel error metrics over [M, C, N] field sets.

    `channel_std` feeds the MRE denominator guard; it defaults to the
    per-channel std of y_true (use the training-split std when available).
    """
    yt = _as_mcn(y_true)
    yp = _as_mcn(y_pred)
    if yt.size == 0:
        raise ContractError("empty input")
    if yt.shape != yp.shape:
        raise ShapeMismatchError(f"y_true {yt.shape} != y_pred {yp.shape}")
    n_ch = yt.shape[1]
    if channel_std is None:
        channel_std = yt.std(axis=(0, 2))
    channel_std = np.asarray(channel_std, dtype=np.float64)
    guards = MRE_GUARD_FACTOR * channel_std

    per_channel = {}
    for ch in range(n_ch):
        per_channel[ch] = _scalar_metrics(yt[:, ch], yp[:, ch], guards[ch])

    # pooled metrics: MRE uses the per-channel guard before pooling
    err = yp - yt
    abs_err = np.abs(err)
    mse = float(np.mean(err ** 2))
    ybar = yt.mean()
    rel_den = np.maximum(np.abs(yt), guards[None, :, None])
    pooled = MetricsReport(
        mse=mse,
        rmse=float(np.sqrt(mse)),
        mae=float(np.mean(abs_err)),
        mre_percent=float(100.0 * np.mean(abs_err / rel_den)),
        ae_95=percentile(abs_err, 95.0),
        ae_99=percentile(abs_err, 99.0),
        r2=float(1.0 - np.sum(err ** 2) / np.sum((yt - ybar) ** 2)),
        relative_l2=float(np.linalg.norm(err) / np.linalg.norm(yt)),
        per_channel=per_channel,
        mre_guard=[float(g) for g in guards],
    )
    return pooled


def aoa_weights(aoa_degrees: np.ndarray, lo: float = -10.0, hi: float = 10.0) -> np.ndarray:
    """Per-condition weights: 1.0 inside [lo, hi] degrees, 0.5 outside."""
    aoa = np.asarray(aoa_degrees, dtype=np.float64)
    return np.where((aoa >= lo) & (aoa <= hi), 1.0, 0.5)


def weighted_r2(y_true, y_pred, weights: np.ndarray, channel: int | None = None):
    """Weighted coefficient of determination with one weight per condition,
    broadcast over its points; the reference mean is unweighted over all
    points and conditions. Returns a scalar for one channel, or
    (global_mean, per_channel) over all channels when channel is None."""
    yt = _as_mcn(y_true)
    yp = _as_mcn(y_pred)
    if yt.shape != yp.shape:
        raise ShapeMismatchError(f"y_true {yt.shape} != y_pred {yp.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (yt.shape[0],):
        raise ShapeMismatchError(f"need one weight per condition ({yt.shape[0]}), got {w.shape}")

    def one(ch: int) -> float:
        t, p = yt[:, ch], yp[:, ch]
        ybar = t.mean()
        den = np.sum(w[:, None] * (t - ybar) ** 2)
        if den == 0:
            raise DegenerateDataError(f"channel {ch}: all-identical truth, undefined denominator")
        return float(1.0 - np.sum(w[:, None] * (t - p) ** 2) / den)

    if channel is not None:
        return one(channel)
    per = {ch: one(ch) for ch in range(yt.shape[1])}
    return float(np.mean(list(per.values()))), per
