"""Feature bases and small ridge least-squares solvers."""
from __future__ import annotations

import numpy as np

from .core import ObservationSpace

RIDGE = 1e-10


def features(obs, space: ObservationSpace, degree: int = 2) -> np.ndarray:
    """Regression basis for a batch of observations.

    Discrete observations map to an intercept plus indicators of every level
    but the first, so a level an arm has not visited falls back to the arm
    mean instead of zero.  Continuous ones map to ``[1, o]`` (degree 1) or
    ``[1, o, o**2]`` elementwise (degree 2).
    Works on any leading batch shape.
    """
    obs = np.asarray(obs)
    if space.discrete:
        ind = (obs[..., None] == np.arange(1, space.size)).astype(float)
        return np.concatenate([np.ones(obs.shape + (1,)), ind], axis=-1)
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    ones = np.ones(obs.shape[:-1] + (1,))
    parts = [ones, obs] if degree == 1 else [ones, obs, obs * obs]
    return np.concatenate(parts, axis=-1).astype(float)


def n_features(space: ObservationSpace, degree: int = 2) -> int:
    return space.size if space.discrete else 1 + degree * space.size


def ridge_fit(X: np.ndarray, y: np.ndarray, ridge: float = RIDGE, weights=None) -> np.ndarray:
    """Ridge least squares, batched over any leading axes of ``X``/``y``.

    The penalty is ``ridge`` times the mean diagonal of ``X'X`` (plus one), so
    it stays negligible whatever the scale of the features.  ``weights``
    (same shape as ``y``) gives weighted least squares.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xw = X if weights is None else X * np.asarray(weights, dtype=float)[..., None]
    XwT = np.swapaxes(Xw, -1, -2)
    return solve_normal(XwT @ X, XwT @ y[..., None], ridge)[..., 0]


def solve_normal(gram: np.ndarray, rhs: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Solve ``(gram + penalty I) beta = rhs`` with the scale-relative penalty of :func:`ridge_fit`."""
    q = gram.shape[-1]
    scale = np.trace(gram, axis1=-2, axis2=-1) / q + 1.0
    gram = np.array(gram, dtype=float)
    diag = np.arange(q)
    gram[..., diag, diag] += (ridge * scale)[..., None]
    return np.linalg.solve(gram, rhs)


def predict(X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``X @ beta`` with numpy broadcasting on the leading axes."""
    return np.sum(np.asarray(X) * np.asarray(beta), axis=-1)
