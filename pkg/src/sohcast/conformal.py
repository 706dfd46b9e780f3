"""Split conformal prediction intervals around SOH forecasts.

Nonconformity is the absolute prediction error in physical SOH units on
held-out calibration cells.  With q calibration scores, the interval
half-width is the p-th smallest score where p = ceil((q + 1)(1 - alpha));
a +infinity sentinel is appended so p = q + 1 cleanly yields an infinite
(vacuous) interval when q is too small for the requested alpha.  Under
exchangeability this gives marginal coverage >= 1 - alpha.

Two score sources are supported: teacher-forced one-step residuals on
calibration windows, and closed-loop rollout residuals on calibration
cells.  The latter matches how forecasts are actually produced (each
prediction is fed back as the next window's SOH input, with future
C-rates known covariates) and is the pipeline default; the half-width is
held constant across the forecast horizon either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cellsim import SOHTrajectory
from .dataset import WindowSet
from .errors import DataError, ParameterError
from .network import Predictor

# Closed-loop SOH feedback is clamped to this physical range before being
# written into the next window, so a diverging rollout cannot push the
# network further out of distribution.
SOH_FEEDBACK_RANGE = (0.0, 1.1)


# --------------------------------------------------------------------------
# Scores and quantile
# --------------------------------------------------------------------------


@dataclass
class ScoreDistribution:
    """Sorted nonconformity scores with the +inf sentinel appended."""

    scores: np.ndarray  # (q + 1,), ascending, last entry +inf

    @property
    def q(self) -> int:
        return int(self.scores.shape[0] - 1)


def scores_from_residuals(residuals: np.ndarray) -> ScoreDistribution:
    """Build the calibration distribution from raw residuals."""
    residuals = np.asarray(residuals, dtype=np.float64).ravel()
    if residuals.size == 0:
        raise DataError("calibration produced no residuals")
    if not np.all(np.isfinite(residuals)):
        raise DataError("calibration residuals contain non-finite values")
    scores = np.sort(np.abs(residuals))
    return ScoreDistribution(scores=np.append(scores, np.inf))


def nonconformity_scores(
    predictor: Predictor, calibration: WindowSet
) -> ScoreDistribution:
    """Teacher-forced one-step absolute errors on calibration windows."""
    if calibration.y is None or len(calibration) == 0:
        raise DataError("calibration set must be non-empty and labeled")
    preds = predictor.predict_next(calibration.X)
    return scores_from_residuals(preds - calibration.y)


def quantile_index(q: int, alpha: float) -> int:
    """1-indexed conformal quantile rank p = ceil((q + 1)(1 - alpha)).

    A tiny fuzz guards against float round-up (e.g. 10 * 0.9 landing just
    above 9.0).  p == q + 1 addresses the +inf sentinel.
    """
    if q < 0:
        raise ParameterError(f"q must be non-negative; got {q}")
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1); got {alpha}")
    p = math.ceil((q + 1) * (1.0 - alpha) - 1e-9)
    return max(1, min(p, q + 1))


def epsilon_hat(dist: ScoreDistribution, alpha: float) -> float:
    """Interval half-width: the p-th smallest calibration score."""
    p = quantile_index(dist.q, alpha)
    return float(dist.scores[p - 1])


# --------------------------------------------------------------------------
# Intervals and rollouts
# --------------------------------------------------------------------------


@dataclass
class PredictionInterval:
    """Symmetric interval around a point forecast for one step."""

    step: int  # trajectory row index being predicted
    center: float
    lower: float
    upper: float

    @property
    def half_width(self) -> float:
        return (self.upper - self.lower) / 2.0


def predict_interval(
    predictor: Predictor, window_phys: np.ndarray, eps_hat: float, step: int = 0
) -> PredictionInterval:
    """One-step interval for a single physical-unit window (w, 3)."""
    if eps_hat < 0.0:
        raise ParameterError(f"eps_hat must be non-negative; got {eps_hat}")
    yhat = float(predictor.predict_next(window_phys[None])[0])
    return PredictionInterval(
        step=step, center=yhat, lower=yhat - eps_hat, upper=yhat + eps_hat
    )


def rollout_predictions(
    predictor: Predictor,
    seed_windows: np.ndarray,
    future_rates: np.ndarray,
) -> np.ndarray:
    """Closed-loop multi-step forecasts, vectorized over cells.

    `seed_windows` is (k, w, 3) in physical units; `future_rates` is
    (k, steps, 2) giving the known (c_rate_dis, c_rate_ch) covariates at
    each predicted step.  Each prediction is clamped to
    SOH_FEEDBACK_RANGE and written into the next window's SOH column.
    Returns (k, steps) predicted SOH.
    """
    if seed_windows.ndim != 2 and seed_windows.ndim != 3:
        raise ParameterError(
            f"seed_windows must be (k, w, 3); got shape {seed_windows.shape}"
        )
    if seed_windows.ndim == 2:
        seed_windows = seed_windows[None]
    k, w, d = seed_windows.shape
    if future_rates.ndim == 2:
        future_rates = future_rates[None]
    if future_rates.shape[0] != k or future_rates.shape[2] != 2:
        raise ParameterError(
            f"future_rates must be (k, steps, 2); got {future_rates.shape}"
        )
    steps = future_rates.shape[1]
    if steps < 1:
        raise ParameterError("rollout needs at least one step")
    lo, hi = SOH_FEEDBACK_RANGE
    window = seed_windows.copy()
    preds = np.empty((k, steps))
    for s in range(steps):
        yhat = predictor.predict_next(window)
        preds[:, s] = yhat
        if s + 1 < steps:
            window[:, :-1] = window[:, 1:]
            window[:, -1, 0] = np.clip(yhat, lo, hi)
            window[:, -1, 1] = future_rates[:, s, 0]
            window[:, -1, 2] = future_rates[:, s, 1]
    return preds


def rollout_forecast(
    predictor: Predictor,
    seed_window: np.ndarray,
    future_rates: np.ndarray,
    eps_hat: float,
    start_step: int,
) -> list[PredictionInterval]:
    """Closed-loop forecast for one cell with constant-width intervals."""
    if eps_hat < 0.0:
        raise ParameterError(f"eps_hat must be non-negative; got {eps_hat}")
    preds = rollout_predictions(predictor, seed_window[None], future_rates[None])[0]
    return [
        PredictionInterval(
            step=start_step + s,
            center=float(p),
            lower=float(p - eps_hat),
            upper=float(p + eps_hat),
        )
        for s, p in enumerate(preds)
    ]


def empirical_coverage(
    intervals: Sequence[PredictionInterval], truths: Sequence[float]
) -> float:
    """Fraction of truths inside their interval (inclusive bounds)."""
    if len(intervals) == 0 or len(intervals) != len(truths):
        raise ParameterError(
            f"need matching non-empty intervals and truths; got "
            f"{len(intervals)} and {len(truths)}"
        )
    hits = sum(
        1 for iv, t in zip(intervals, truths) if iv.lower <= t <= iv.upper
    )
    return hits / len(intervals)


# --------------------------------------------------------------------------
# Trajectory-level helpers shared by calibration and evaluation
# --------------------------------------------------------------------------


def seed_window_at(traj: SOHTrajectory, w: int, start_step: int) -> np.ndarray:
    """Physical window covering rows start_step - w .. start_step - 1."""
    if start_step - w < 0 or start_step > len(traj):
        raise DataError(
            f"{traj.cell_id}: cannot seed a w={w} window ending before "
            f"step {start_step} (trajectory has {len(traj)} rows)"
        )
    rows = slice(start_step - w, start_step)
    return np.stack(
        [traj.soh[rows], traj.c_rate_dis[rows], traj.c_rate_ch[rows]], axis=1
    )


def rollout_cells(
    predictor: Predictor,
    trajectories: Sequence[SOHTrajectory],
    w: int,
    start_step: int,
) -> tuple[np.ndarray, np.ndarray, list[SOHTrajectory]]:
    """Roll every cell from `start_step` to its end, jointly.

    Returns (preds, truths) as (k, steps) arrays plus the cell order.
    Cells shorter than start_step + 1 are rejected; all cells must share
    the same length (one recording grid), which holds for untruncated
    fleets.
    """
    if not trajectories:
        raise DataError("no trajectories to roll out")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise DataError(
            f"rollout needs equal-length trajectories; got lengths "
            f"{sorted(lengths)}"
        )
    m = lengths.pop()
    steps = m - start_step
    if steps < 1:
        raise DataError(
            f"nothing to forecast: trajectories have {m} rows, rollout "
            f"starts at {start_step}"
        )
    cells = sorted(trajectories, key=lambda t: t.cell_id)
    seeds = np.stack([seed_window_at(t, w, start_step) for t in cells])
    rates = np.stack(
        [
            np.stack(
                [
                    t.c_rate_dis[start_step : start_step + steps],
                    t.c_rate_ch[start_step : start_step + steps],
                ],
                axis=1,
            )
            for t in cells
        ]
    )
    preds = rollout_predictions(predictor, seeds, rates)
    truths = np.stack([t.soh[start_step : start_step + steps] for t in cells])
    return preds, truths, cells


def rollout_scores(
    predictor: Predictor,
    trajectories: Sequence[SOHTrajectory],
    w: int,
    start_step: int,
) -> ScoreDistribution:
    """Pooled rollout residuals on calibration cells, as conformal scores."""
    preds, truths, _ = rollout_cells(predictor, trajectories, w, start_step)
    return scores_from_residuals(preds - truths)
