"""Masked regression metrics and the Historical Inertia baseline."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

MAPE_FLOOR = 1e-3


def _prep(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    mask = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != truth.shape:
        raise ShapeError(f"mask shape {mask.shape} != truth shape {truth.shape}")
    return pred, truth, mask


def mae(pred, truth, mask=None) -> float:
    pred, truth, mask = _prep(pred, truth, mask)
    if not mask.any():
        raise NumericError("MAE over an empty mask")
    return float(np.abs(pred - truth)[mask].mean())


def mse(pred, truth, mask=None) -> float:
    pred, truth, mask = _prep(pred, truth, mask)
    if not mask.any():
        raise NumericError("MSE over an empty mask")
    d = (pred - truth)[mask]
    return float((d * d).mean())


def mape(pred, truth, mask=None) -> float:
    """Percent error; entries with |truth| < 1e-3 are always excluded."""
    pred, truth, mask = _prep(pred, truth, mask)
    mask = mask & (np.abs(truth) >= MAPE_FLOOR)
    if not mask.any():
        raise NumericError("MAPE: every entry is masked")
    return float((np.abs(pred - truth)[mask] / np.abs(truth[mask])).mean() * 100.0)


def hi_baseline(history, horizon: int) -> np.ndarray:
    """Historical Inertia: the last ``horizon`` history steps, verbatim.

    Works on [T, C] or batched [..., T, C] histories.
    """
    history = np.asarray(history)
    t = history.shape[-2]
    if horizon > t:
        raise ContractError(f"HI needs horizon <= history length, got {horizon} > {t}")
    return history[..., t - horizon :, :].copy()
