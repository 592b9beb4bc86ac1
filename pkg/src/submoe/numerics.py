"""Float64 numeric primitives shared by every other module.

Everything here is pure and operates on plain numpy arrays.  The
finite-difference oracle exists for the test suite and deliberately knows
nothing about the analytic gradients it is used to check.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, LabelError, NumericError

# Probabilities below this are floored before entering a log.
KL_FLOOR = 1e-12


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {arr.shape}")
    return arr


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")


def softmax(logits) -> np.ndarray:
    """Stable softmax of a 1-d logit vector."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax expects a non-empty 1-d vector, got shape {v.shape}")
    require_finite("logits", v)
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(logits) -> np.ndarray:
    """Row-wise stable softmax of a 2-d logit array."""
    m = as_matrix(logits)
    if m.shape[1] == 0:
        raise DimensionError("softmax needs at least one column")
    require_finite("logits", m)
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def is_prob_vector(v, atol: float = 1e-12) -> bool:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        return False
    if arr.min() < -atol or arr.max() > 1.0 + atol:
        return False
    return abs(float(arr.sum()) - 1.0) <= max(atol, 64 * np.finfo(np.float64).eps * arr.size)


def kl_divergence(p, q) -> float:
    """KL(p || q) with q floored at KL_FLOOR and renormalised; 0*log(0) := 0."""
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.ndim != 1 or pa.shape != qa.shape:
        raise DimensionError(f"KL needs matching 1-d vectors, got {pa.shape} vs {qa.shape}")
    require_finite("p", pa)
    require_finite("q", qa)
    qf = np.maximum(qa, KL_FLOOR)
    qf = qf / qf.sum()
    mask = pa > 0.0
    val = float(np.sum(pa[mask] * np.log(pa[mask] / qf[mask])))
    # exact p == q can land a few ulp below zero; the quantity itself is >= 0
    return max(val, 0.0)


def contrastive_loss(img_emb, txt_emb, labels, temperature: float):
    """Cross-entropy over temperature-scaled cosine similarities, image rows
    against the label-embedding table.

    Returns (loss, grad) where grad is the analytic gradient with respect to
    the unnormalised image embeddings (the cosine normalisation is part of
    the op and is differentiated through).
    """
    img = as_matrix(img_emb)
    txt = as_matrix(txt_emb)
    if img.shape[0] == 0 or txt.shape[0] == 0:
        raise DimensionError("contrastive loss needs at least one image and one label row")
    if img.shape[1] != txt.shape[1]:
        raise DimensionError(
            f"embedding widths differ: image {img.shape[1]} vs text {txt.shape[1]}"
        )
    if not np.isfinite(temperature) or temperature <= 0.0:
        raise NumericError(f"temperature must be positive, got {temperature}")
    require_finite("image embeddings", img)
    require_finite("text embeddings", txt)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != img.shape[0]:
        raise DimensionError(f"{img.shape[0]} image rows but {y.shape[0]} labels")
    if y.min(initial=0) < 0 or y.max(initial=-1) >= txt.shape[0]:
        raise LabelError(f"labels must lie in [0, {txt.shape[0]})")

    img_norm = np.linalg.norm(img, axis=1)
    txt_norm = np.linalg.norm(txt, axis=1)
    if np.any(img_norm == 0.0):
        raise NumericError("zero-norm image embedding row")
    if np.any(txt_norm == 0.0):
        raise NumericError("zero-norm text embedding row")
    ih = img / img_norm[:, None]
    th = txt / txt_norm[:, None]

    logits = ih @ th.T / temperature
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    b = img.shape[0]
    rows = np.arange(b)
    loss = float(-logp[rows, y].mean())

    ds = np.exp(logp)
    ds[rows, y] -= 1.0
    ds /= b
    dih = ds @ th / temperature
    # back through the row normalisation of the image embeddings
    proj = (dih * ih).sum(axis=1, keepdims=True)
    grad = (dih - proj * ih) / img_norm[:, None]
    return loss, grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not np.isfinite(h) or h <= 0.0:
        raise NumericError(f"step size must be positive, got {h}")
    base = np.array(x, dtype=np.float64)  # private copy; f sees perturbed views of it
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(base))
        flat[i] = orig - h
        f_minus = float(f(base))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"objective non-finite near coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
