"""Small dense-array helpers shared by the network and estimation code.

Matrices are plain float64 numpy arrays; this module only adds the handful of
elementwise nonlinearities and shape-checked products the rest of the package
relies on.
"""
import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


def as_matrix(data, rows=None, cols=None):
    """Return `data` as a 2-D float64 array, optionally checking its shape."""
    arr = np.asarray(data, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite values")
    return arr


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def tanh_fn(x):
    out = np.tanh(np.asarray(x, dtype=DTYPE))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad_from_output(s):
    # derivative expressed through the activation value s = sigmoid(x)
    return s * (1.0 - s)


def tanh_grad_from_output(t):
    return 1.0 - t * t


def matvec(W, v):
    W = np.asarray(W, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if W.ndim != 2 or v.ndim != 1 or W.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {W.shape} matrix by vector of shape {v.shape}")
    return W @ v


def concat(h, x):
    """Stack the recurrent vector `h` on top of the input vector `x`."""
    return np.concatenate([np.asarray(h, dtype=DTYPE).ravel(), np.asarray(x, dtype=DTYPE).ravel()])


def hadamard(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product of {a.shape} and {b.shape}")
    return a * b


def split_columns(W, left):
    """Split W column-wise into (W[:, :left], W[:, left:])."""
    W = np.asarray(W, dtype=DTYPE)
    return W[:, :left], W[:, left:]
