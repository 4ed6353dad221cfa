"""Toy cross-view synchronization block: epipolar-masked cross attention + ff.

Frames are ``(h, w, dim)`` arrays. Single head, logits scaled by
``1/sqrt(dim_attn)``; ``ff`` is affine -> SiLU -> affine with a 4x hidden
expansion. Query rows whose mask is empty attend to nothing and produce a
zero attention vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import EpipolarMask
from .tensor_io import load_tensors_csv, save_tensors_csv

PARAM_NAMES = ("W_Q", "W_K", "W_V", "W1", "b1", "W2", "b2")


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


@dataclass(frozen=True)
class SyncModuleWeights:
    W_Q: np.ndarray  # (dim, dim_attn)
    W_K: np.ndarray
    W_V: np.ndarray
    W1: np.ndarray  # (dim_attn, 4 * dim_attn)
    b1: np.ndarray
    W2: np.ndarray  # (4 * dim_attn, dim)
    b2: np.ndarray
    out_scale: float = 1.0
    use_ff: bool = True

    def __post_init__(self):
        dim, a = self.W_Q.shape
        if self.W_K.shape != (dim, a) or self.W_V.shape != (dim, a):
            raise ValueError("W_Q, W_K and W_V must share one shape")
        if self.use_ff:
            if self.W1.shape != (a, 4 * a) or self.b1.shape != (4 * a,):
                raise ValueError("ff hidden layer must map dim_attn -> 4 * dim_attn")
            if self.W2.shape != (4 * a, dim) or self.b2.shape != (dim,):
                raise ValueError("ff output layer must map 4 * dim_attn -> dim")
        elif a != dim:
            raise ValueError("without ff, dim_attn must equal dim")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    @property
    def dim_attn(self) -> int:
        return self.W_Q.shape[1]

    @classmethod
    def init(cls, dim, dim_attn, rng, zero_output=False, use_ff=True, bias_scale=0.0):
        """Seeded Gaussian init (std 1/sqrt(fan_in)); ``zero_output`` zeros the last layer."""

        def g(*shape):
            return rng.standard_normal(shape) / np.sqrt(shape[0])

        hidden = 4 * dim_attn
        W2 = np.zeros((hidden, dim)) if zero_output else g(hidden, dim)
        b2 = np.zeros(dim) if zero_output else bias_scale * rng.standard_normal(dim)
        return cls(
            g(dim, dim_attn),
            g(dim, dim_attn),
            g(dim, dim_attn),
            g(dim_attn, hidden),
            bias_scale * rng.standard_normal(hidden),
            W2,
            b2,
            use_ff=use_ff,
        )

    def params(self) -> tuple:
        return tuple(getattr(self, n) for n in PARAM_NAMES)

    def with_params(self, params) -> "SyncModuleWeights":
        return replace(self, **dict(zip(PARAM_NAMES, params)))


def masked_softmax(logits, bits):
    """Row softmax over unmasked entries; rows with no unmasked entry are all zero."""
    S = np.where(bits, logits, -np.inf)
    empty = ~bits.any(axis=1, keepdims=True)
    row_max = np.where(empty, 0.0, S.max(axis=1, keepdims=True))
    E = np.where(bits, np.exp(S - row_max), 0.0)
    return E / np.where(empty, 1.0, E.sum(axis=1, keepdims=True))


def _check(zq, zkv, w, mask):
    if zq.ndim != 3 or zkv.ndim != 3:
        raise ValueError("frames must be (h, w, dim)")
    if zq.shape[2] != w.dim or zkv.shape[2] != w.dim:
        raise ValueError(f"frame dim does not match weights ({w.dim})")
    if tuple(mask.query_resolution) != zq.shape[:2] or tuple(mask.key_resolution) != zkv.shape[:2]:
        raise ValueError("mask resolutions do not match the frame grids")


def _forward(zq, zkv, params, bits, out_scale, use_ff):
    W_Q, W_K, W_V, W1, b1, W2, b2 = params
    Xq = zq.reshape(-1, zq.shape[-1])
    Xk = zkv.reshape(-1, zkv.shape[-1])
    Q, K, V = Xq @ W_Q, Xk @ W_K, Xk @ W_V
    scale = 1.0 / np.sqrt(W_Q.shape[1])
    P = masked_softmax((Q @ K.T) * scale, bits)
    O = P @ V
    cache = dict(Xq=Xq, Xk=Xk, Q=Q, K=K, V=V, P=P, O=O, scale=scale)
    if use_ff:
        H = O @ W1 + b1
        G = silu(H)
        Y = G @ W2 + b2
        cache.update(H=H, G=G)
    else:
        Y = O
    return out_scale * Y, cache


def _backward(gY, params, cache, out_scale, use_ff):
    W_Q, W_K, W_V, W1, b1, W2, b2 = params
    gY = out_scale * gY
    if use_ff:
        gW2 = cache["G"].T @ gY
        gb2 = gY.sum(axis=0)
        gH = (gY @ W2.T) * silu_grad(cache["H"])
        gW1 = cache["O"].T @ gH
        gb1 = gH.sum(axis=0)
        gO = gH @ W1.T
    else:
        gW2, gb2, gW1, gb1 = (np.zeros_like(p) for p in (W2, b2, W1, b1))
        gO = gY
    P, V = cache["P"], cache["V"]
    gP = gO @ V.T
    gV = P.T @ gO
    gS = P * (gP - (gP * P).sum(axis=1, keepdims=True))
    gQ = gS @ cache["K"] * cache["scale"]
    gK = gS.T @ cache["Q"] * cache["scale"]
    Xq, Xk = cache["Xq"], cache["Xk"]
    gWq = Xq.T @ gQ
    gWk = Xk.T @ gK
    gWv = Xk.T @ gV
    gXq = gQ @ W_Q.T
    gXk = gK @ W_K.T + gV @ W_V.T
    return gXq, gXk, (gWq, gWk, gWv, gW1, gb1, gW2, gb2)


def masked_cross_attention(zq, zkv, w: SyncModuleWeights, mask: EpipolarMask) -> np.ndarray:
    """ff(Attn(W_Q zq, W_K zkv, W_V zkv, mask)) without the residual."""
    zq = np.asarray(zq, dtype=float)
    zkv = np.asarray(zkv, dtype=float)
    _check(zq, zkv, w, mask)
    Y, _ = _forward(zq, zkv, w.params(), mask.bits, w.out_scale, w.use_ff)
    return Y.reshape(zq.shape[0], zq.shape[1], -1)


def attention_weights(zq, zkv, w: SyncModuleWeights, mask: EpipolarMask) -> np.ndarray:
    """Softmax matrix (queries x keys); masked entries are exactly zero."""
    _, cache = _forward(np.asarray(zq, float), np.asarray(zkv, float), w.params(), mask.bits, 1.0, False)
    return cache["P"]


def attention_op(mask: EpipolarMask, out_scale=1.0, use_ff=True):
    """Differentiable op over ``(zq, zkv, *params)`` for :func:`grad_check`.

    Calling it returns ``(output, backward)``; ``backward(g)`` gives the
    gradients of ``sum(g * output)`` with respect to every input.
    """

    def op(zq, zkv, *params):
        Y, cache = _forward(zq, zkv, params, mask.bits, out_scale, use_ff)
        out = Y.reshape(zq.shape[0], zq.shape[1], -1)

        def backward(g):
            gXq, gXk, gp = _backward(g.reshape(Y.shape), params, cache, out_scale, use_ff)
            return (gXq.reshape(zq.shape), gXk.reshape(zkv.shape), *gp)

        return out, backward

    return op


def apply_sync(za, zb, w: SyncModuleWeights, mask_ab: EpipolarMask, mask_ba: EpipolarMask, w_ba=None):
    """Residual update of both frames from the pre-update inputs.

    ``mask_ab`` has queries in ``za`` and keys in ``zb``. ``w_ba`` gives the
    reverse direction its own weights; by default both directions share ``w``.
    """
    w_ba = w if w_ba is None else w_ba
    da = masked_cross_attention(za, zb, w, mask_ab)
    db = masked_cross_attention(zb, za, w_ba, mask_ba)
    return za + da, zb + db


def grad_check(op, inputs, eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The loss is ``sum(op(*inputs))``. Per input the error is
    ``max|g_analytic - g_numeric| / max(max|g_analytic|, max|g_numeric|)``.
    """
    inputs = [np.array(x, dtype=float) for x in inputs]
    out, backward = op(*inputs)
    analytic = backward(np.ones_like(out))
    worst = 0.0
    for idx, (x, ga) in enumerate(zip(inputs, analytic)):
        gn = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = gn.reshape(-1)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + eps
            fp = op(*inputs)[0].sum()
            flat[e] = orig - eps
            fm = op(*inputs)[0].sum()
            flat[e] = orig
            gflat[e] = (fp - fm) / (2 * eps)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(ga - gn).max() / scale))
    return worst


def directional_fd_error(op, inputs, direction, eps: float) -> float:
    """|central difference along ``direction`` - analytic directional derivative|."""
    inputs = [np.asarray(x, dtype=float) for x in inputs]
    out, backward = op(*inputs)
    grads = backward(np.ones_like(out))
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    plus = [x + eps * d for x, d in zip(inputs, direction)]
    minus = [x - eps * d for x, d in zip(inputs, direction)]
    numeric = (op(*plus)[0].sum() - op(*minus)[0].sum()) / (2 * eps)
    return abs(numeric - analytic)


def save_weights(path, w: SyncModuleWeights) -> None:
    tensors = {n: getattr(w, n) for n in PARAM_NAMES}
    tensors["out_scale"] = np.array(w.out_scale)
    tensors["use_ff"] = np.array(float(w.use_ff))
    save_tensors_csv(path, tensors)


def load_weights(path) -> SyncModuleWeights:
    t = load_tensors_csv(path)
    return SyncModuleWeights(
        *(t[n] for n in PARAM_NAMES), out_scale=float(t["out_scale"]), use_ff=bool(t["use_ff"])
    )
