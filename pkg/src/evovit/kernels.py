"""Dense numeric kernels with explicit reverse-mode gradient rules.

All arrays are 64-bit floats. Every forward kernel here has a matching
backward companion used by the hand-composed model backward pass, and
``check_gradients`` provides the central-difference oracle that verifies
the pairing.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

# tanh-approximation GELU constants
_GELU_C = 0.044715
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} x {b.shape}"
        )
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization."""
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient through softmax_rows given the forward probabilities."""
    inner = (dout * probs).sum(axis=-1, keepdims=True)
    return probs * (dout - inner)


def layer_norm_rows(m, gain, bias, eps: float = 1e-6):
    """Standardize each row (population variance + eps), then affine.

    Returns (out, cache) where cache feeds layer_norm_backward.
    """
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (m.shape[1],) or bias.shape != (m.shape[1],):
        raise DimensionError(
            f"layer_norm_rows: gain/bias {gain.shape}/{bias.shape} "
            f"do not match {m.shape[1]} columns"
        )
    mean = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (m - mean) * inv_std
    out = xhat * gain + bias
    return out, (xhat, inv_std, gain)


def layer_norm_backward(dout, cache):
    """Returns (dx, dgain, dbias) for layer_norm_rows."""
    xhat, inv_std, gain = cache
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    # per-row: dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def gelu_map(m: np.ndarray) -> np.ndarray:
    """Elementwise GELU (tanh approximation, cubic constant 0.044715)."""
    m = np.asarray(m, dtype=np.float64)
    inner = _SQRT_2_OVER_PI * (m + _GELU_C * m ** 3)
    return 0.5 * m * (1.0 + np.tanh(inner))


def gelu_backward(dout: np.ndarray, m: np.ndarray) -> np.ndarray:
    inner = _SQRT_2_OVER_PI * (m + _GELU_C * m ** 3)
    t = np.tanh(inner)
    dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * m ** 2)
    return dout * (0.5 * (1.0 + t) + 0.5 * m * (1.0 - t ** 2) * dinner)


def cross_entropy_logits(logits: np.ndarray, labels) -> float:
    """Mean negative log-softmax probability of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"cross_entropy_logits: {logits.shape[0]} rows vs "
            f"{labels.shape[0]} labels"
        )
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise IndexError(
            f"cross_entropy_logits: label out of range [0, {logits.shape[1]})"
        )
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return float(np.mean(log_norm - picked))


def cross_entropy_backward(logits: np.ndarray, labels) -> np.ndarray:
    """d(mean CE)/dlogits = (softmax - onehot) / batch."""
    labels = np.asarray(labels, dtype=np.int64)
    p = softmax_rows(np.asarray(logits, dtype=np.float64))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def check_gradients(f, params, h: float = 1e-5) -> float:
    """Compare stored reverse-mode grads against central differences.

    ``f`` is a zero-argument scalar function reading the current parameter
    values; ``params`` is a ParamSet whose .grad buffers already hold the
    reverse-mode gradients of ``f`` at the current point. Returns the max
    over all entries of |g_ad - g_fd| / max(1, |g_fd|).
    """
    worst = 0.0
    for p in params:
        value = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in range(value.size):
            orig = value[i]
            value[i] = orig + h
            lo_hi = f()
            value[i] = orig - h
            lo_lo = f()
            value[i] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise NumericError(
                    f"check_gradients: non-finite loss perturbing {p.name}[{i}]"
                )
            g_fd = (lo_hi - lo_lo) / (2.0 * h)
            err = abs(grad[i] - g_fd) / max(1.0, abs(g_fd))
            if err > worst:
                worst = err
    return worst
