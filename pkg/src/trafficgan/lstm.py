"""Single LSTM layer with hand-written backpropagation through time.

Sequences are arrays of shape ``(n_steps, input_size)`` for a single sample or
``(n_steps, batch, input_size)`` for a minibatch; the batched form is what the
GAN and estimation loops use, the single-sample form is a convenience.

Gate weights are stored pre-split into a recurrent block ``W_*h`` (acting on
``h_{t-1}``) and an input block ``W_*x`` (acting on ``x_t``), so that
``W_* @ [h_{t-1}, x_t] == W_*h @ h_{t-1} + W_*x @ x_t``.
"""
from dataclasses import dataclass, fields

import numpy as np

from .tensor import DTYPE, ShapeError, sigmoid

GATES = ("f", "i", "c", "o")
PARAM_NAMES = (
    "W_fh", "W_fx", "W_ih", "W_ix", "W_ch", "W_cx", "W_oh", "W_ox",
    "b_f", "b_i", "b_c", "b_o",
)


class DivergenceError(RuntimeError):
    """Raised when an update would introduce non-finite parameters."""


@dataclass
class _GateArrays:
    W_fh: np.ndarray
    W_fx: np.ndarray
    W_ih: np.ndarray
    W_ix: np.ndarray
    W_ch: np.ndarray
    W_cx: np.ndarray
    W_oh: np.ndarray
    W_ox: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self):
        return self.W_fh.shape[0]

    @property
    def input_size(self):
        return self.W_fx.shape[1]

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.arrays().items()})

    def check_shapes(self):
        H, I = self.hidden_size, self.input_size
        for g in GATES:
            if getattr(self, f"W_{g}h").shape != (H, H):
                raise ShapeError(f"W_{g}h must be {H}x{H}")
            if getattr(self, f"W_{g}x").shape != (H, I):
                raise ShapeError(f"W_{g}x must be {H}x{I}")
            if getattr(self, f"b_{g}").shape != (H,):
                raise ShapeError(f"b_{g} must have length {H}")


@dataclass
class LstmParams(_GateArrays):
    """Weights and biases of one LSTM layer."""

    @classmethod
    def zeros(cls, hidden_size, input_size):
        H, I = hidden_size, input_size
        kw = {}
        for g in GATES:
            kw[f"W_{g}h"] = np.zeros((H, H), dtype=DTYPE)
            kw[f"W_{g}x"] = np.zeros((H, I), dtype=DTYPE)
            kw[f"b_{g}"] = np.zeros(H, dtype=DTYPE)
        return cls(**kw)

    @classmethod
    def init_uniform(cls, hidden_size, input_size, rng):
        """Weights uniform on [-r, r] with r = 1/sqrt(hidden + input); zero biases."""
        p = cls.zeros(hidden_size, input_size)
        r = 1.0 / np.sqrt(hidden_size + input_size)
        for g in GATES:
            for part in ("h", "x"):
                name = f"W_{g}{part}"
                setattr(p, name, rng.uniform(-r, r, size=getattr(p, name).shape))
        return p

    def gate_matrix(self, gate):
        """Concatenated ``[W_*h  W_*x]`` block for one gate."""
        return np.hstack([getattr(self, f"W_{gate}h"), getattr(self, f"W_{gate}x")])


@dataclass
class LstmGrads(_GateArrays):
    """dE/d(parameter), one array per LstmParams field."""

    @classmethod
    def zeros_like(cls, params):
        return cls(**{k: np.zeros_like(v) for k, v in params.arrays().items()})

    def __iadd__(self, other):
        for k, v in other.arrays().items():
            getattr(self, k).__iadd__(v)
        return self

    def max_abs(self):
        return max(float(np.max(np.abs(v))) for v in self.arrays().values())


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmCache:
    """Per-step activations kept for the backward pass, all shaped (n, batch, ·)."""
    x: np.ndarray
    f: np.ndarray
    i: np.ndarray
    Q: np.ndarray
    o: np.ndarray
    c: np.ndarray
    h: np.ndarray
    tanh_c: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    batched: bool

    @property
    def n_steps(self):
        return self.x.shape[0]

    def h_prev(self, t):
        return self.h0 if t == 0 else self.h[t - 1]

    def c_prev(self, t):
        return self.c0 if t == 0 else self.c[t - 1]


def _as_batched(seq, width, what):
    seq = np.asarray(seq, dtype=DTYPE)
    if seq.ndim == 2:
        seq, batched = seq[:, None, :], False
    elif seq.ndim == 3:
        batched = True
    else:
        raise ShapeError(f"{what} must be (n, {width}) or (n, batch, {width}), got {seq.shape}")
    if seq.shape[-1] != width:
        raise ShapeError(f"{what} has width {seq.shape[-1]}, expected {width}")
    return seq, batched


def lstm_forward(params, inputs, initial=None):
    """Run the layer over `inputs`; return (outputs h_1..h_n, cache)."""
    x, batched = _as_batched(inputs, params.input_size, "inputs")
    n, B, _ = x.shape
    H = params.hidden_size
    if initial is None:
        h0 = np.zeros((B, H), dtype=DTYPE)
        c0 = np.zeros((B, H), dtype=DTYPE)
    else:
        h0 = np.broadcast_to(np.asarray(initial.h, dtype=DTYPE), (B, H)).copy()
        c0 = np.broadcast_to(np.asarray(initial.c, dtype=DTYPE), (B, H)).copy()

    # input contributions for every step at once; only the recurrent part is sequential
    xf = x @ params.W_fx.T + params.b_f
    xi = x @ params.W_ix.T + params.b_i
    xc = x @ params.W_cx.T + params.b_c
    xo = x @ params.W_ox.T + params.b_o

    f = np.empty((n, B, H))
    i = np.empty((n, B, H))
    Q = np.empty((n, B, H))
    o = np.empty((n, B, H))
    c = np.empty((n, B, H))
    h = np.empty((n, B, H))
    tc = np.empty((n, B, H))
    h_prev, c_prev = h0, c0
    for t in range(n):
        f[t] = sigmoid(xf[t] + h_prev @ params.W_fh.T)
        i[t] = sigmoid(xi[t] + h_prev @ params.W_ih.T)
        Q[t] = np.tanh(xc[t] + h_prev @ params.W_ch.T)
        # output gate reads h_{t-1}, like the other three gates
        o[t] = sigmoid(xo[t] + h_prev @ params.W_oh.T)
        c[t] = f[t] * c_prev + i[t] * Q[t]
        tc[t] = np.tanh(c[t])
        h[t] = o[t] * tc[t]
        h_prev, c_prev = h[t], c[t]

    cache = LstmCache(x=x, f=f, i=i, Q=Q, o=o, c=c, h=h, tanh_c=tc, h0=h0, c0=c0, batched=batched)
    return (h if batched else h[:, 0, :]), cache


def lstm_backward(params, cache, dh):
    """Backpropagate dE/dh_t through time.

    Returns ``(grads, dx)`` where grads are summed over steps and batch and
    ``dx[t] = dE/dx_t``.
    """
    dh, _ = _as_batched(dh, params.hidden_size, "dh")
    if dh.shape[:2] != cache.h.shape[:2] or cache.x.shape[-1] != params.input_size:
        raise ShapeError("cache does not match params / upstream error shape")
    n = cache.n_steps
    grads = LstmGrads.zeros_like(params)
    dx = np.zeros_like(cache.x)
    dh_next = np.zeros_like(cache.h0)
    dc_next = np.zeros_like(cache.c0)

    for t in range(n - 1, -1, -1):
        f, i, Q, o, tc = cache.f[t], cache.i[t], cache.Q[t], cache.o[t], cache.tanh_c[t]
        h_prev, c_prev, x_t = cache.h_prev(t), cache.c_prev(t), cache.x[t]

        delta = dh[t] + dh_next
        d_o = delta * tc * o * (1.0 - o)
        dc = delta * o * (1.0 - tc * tc) + dc_next
        d_f = dc * c_prev * f * (1.0 - f)
        d_i = dc * Q * i * (1.0 - i)
        d_Q = dc * i * (1.0 - Q * Q)

        for g, d in (("f", d_f), ("i", d_i), ("c", d_Q), ("o", d_o)):
            getattr(grads, f"W_{g}h").__iadd__(d.T @ h_prev)
            getattr(grads, f"W_{g}x").__iadd__(d.T @ x_t)
            getattr(grads, f"b_{g}").__iadd__(d.sum(axis=0))

        dh_next = d_o @ params.W_oh + d_f @ params.W_fh + d_i @ params.W_ih + d_Q @ params.W_ch
        dx[t] = d_o @ params.W_ox + d_f @ params.W_fx + d_i @ params.W_ix + d_Q @ params.W_cx
        dc_next = dc * f

    return grads, (dx if cache.batched else dx[:, 0, :])


def clip_grads(grads, limit=5.0):
    return LstmGrads(**{k: np.clip(v, -limit, limit) for k, v in grads.arrays().items()})


def sgd_apply(params, grads, lr, direction="descend"):
    """Return params moved by -lr*grad (descend) or +lr*grad (ascend)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    new = {}
    for k, p in params.arrays().items():
        g = getattr(grads, k)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {k}")
        new[k] = p + sign * lr * g
    return LstmParams(**new)
