"""Small elementwise tensor operations used throughout the attack stack.

Tensors are plain numpy arrays. Images use (batch, channels, height, width)
layout with pixel values in [0, 255]; float32 is the working precision and
float64 is used for gradient verification runs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise if `t` contains NaN or Inf; return `t` unchanged."""
    if not np.all(np.isfinite(t)):
        raise ValueError(f"non-finite values in {what}")
    return t


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise -1/0/+1."""
    return np.sign(t)


def clip_linf(
    candidate: np.ndarray,
    anchor: np.ndarray,
    epsilon: float,
    lo: float = 0.0,
    hi: float = 255.0,
) -> np.ndarray:
    """Project `candidate` onto the L-inf ball of radius `epsilon` around
    `anchor`, intersected with the [lo, hi] pixel box.

    Elementwise nearest projection: out = min(hi, anchor+eps, max(lo, anchor-eps, candidate)).
    """
    if candidate.shape != anchor.shape:
        raise ShapeError(
            f"candidate shape {candidate.shape} != anchor shape {anchor.shape}"
        )
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    lower = np.maximum(lo, anchor - epsilon)
    upper = np.minimum(hi, anchor + epsilon)
    return np.clip(candidate, lower, upper)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale `v` to unit Euclidean norm along `axis`.

    Raises on zero norm (direction undefined).
    """
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot l2-normalize a zero vector")
    return v / norm


def l2_normalize_backward(
    v: np.ndarray, grad_output: np.ndarray, axis: int = -1
) -> np.ndarray:
    """Exact adjoint of l2_normalize at `v`.

    With y = v/||v||:  dL/dv = (g - y * <g, y>) / ||v||.
    """
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot l2-normalize a zero vector")
    y = v / norm
    inner = np.sum(grad_output * y, axis=axis, keepdims=True)
    return (grad_output - y * inner) / norm
