"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``LIPENS_DISABLE_NUMBA=1``
to force the numpy implementations (also used automatically when numba is
not importable). Both implementations of every kernel stay importable as
``numpy_kernels`` / ``numba_kernels`` so tests can compare them.

Dense matrix products are never routed through here; they go straight to
BLAS via ``numpy.matmul``. Power iteration is mat-vec bound for the same
reason and shares the numpy implementation on both backends.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

__all__ = ["BACKEND", "kernels", "numpy_kernels", "numba_kernels"]


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def _np_relu_forward(x):
    return np.maximum(x, 0.0)


def _np_relu_backward(grad, x):
    return np.where(x > 0.0, grad, 0.0)


def _np_adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _np_softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    losses = np.log(denom[:, 0]) - shifted[rows, labels]
    dlogits = expz / denom
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _np_linf_project(candidate, center, eps, lo, hi):
    out = np.clip(candidate, center - eps, center + eps)
    if lo < hi:
        np.clip(out, lo, hi, out=out)
    return out


def _np_row_l1_distance(a, b):
    return np.abs(a - b).sum(axis=1)


def _np_power_iteration(w, v0, tol, max_iter):
    v = v0 / np.linalg.norm(v0)
    rho = 0.0
    for it in range(1, max_iter + 1):
        u = w @ v
        rho = float(u @ u)
        if rho == 0.0:
            return 0.0, v, it
        z = w.T @ u
        resid = float(np.linalg.norm(z - rho * v))
        v = z / np.linalg.norm(z)
        if resid <= tol * rho:
            break
    return math.sqrt(rho), v, it


numpy_kernels = SimpleNamespace(
    name="numpy",
    relu_forward=_np_relu_forward,
    relu_backward=_np_relu_backward,
    adam_step=_np_adam_step,
    softmax_xent=_np_softmax_xent,
    linf_project=_np_linf_project,
    row_l1_distance=_np_row_l1_distance,
    power_iteration=_np_power_iteration,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def relu_forward(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            out[i] = flat[i] if flat[i] > 0.0 else 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def relu_backward(grad, x):
        g = grad.ravel()
        xf = x.ravel()
        out = np.empty_like(g)
        for i in range(g.size):
            out[i] = g[i] if xf[i] > 0.0 else 0.0
        return out.reshape(grad.shape)

    @njit(cache=True)
    def _adam_flat(p, g, m, v, lr, beta1, beta2, eps, t):
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(p.size):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)

    def adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
        # reshape(-1) on contiguous arrays is a view, so updates land in place
        _adam_flat(
            param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
            float(lr), float(beta1), float(beta2), float(eps), float(t),
        )

    @njit(cache=True)
    def softmax_xent(logits, labels):
        n, k = logits.shape
        losses = np.empty(n)
        dlogits = np.empty((n, k))
        for r in range(n):
            mx = logits[r, 0]
            for j in range(1, k):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            s = 0.0
            for j in range(k):
                e = math.exp(logits[r, j] - mx)
                dlogits[r, j] = e
                s += e
            for j in range(k):
                dlogits[r, j] /= s
            y = labels[r]
            losses[r] = math.log(s) - (logits[r, y] - mx)
            dlogits[r, y] -= 1.0
        return losses, dlogits

    @njit(cache=True)
    def _linf_project_flat(cand, center, eps, lo, hi):
        out = np.empty_like(cand)
        clamp = lo < hi
        for i in range(cand.size):
            a = center[i] - eps
            b = center[i] + eps
            c = cand[i]
            if c < a:
                c = a
            elif c > b:
                c = b
            if clamp:
                if c < lo:
                    c = lo
                elif c > hi:
                    c = hi
            out[i] = c
        return out

    def linf_project(candidate, center, eps, lo, hi):
        cand = np.ascontiguousarray(candidate)
        cent = np.ascontiguousarray(center)
        flat = _linf_project_flat(
            cand.reshape(-1), cent.reshape(-1), float(eps), float(lo), float(hi)
        )
        return flat.reshape(candidate.shape)

    @njit(cache=True)
    def row_l1_distance(a, b):
        n, k = a.shape
        out = np.zeros(n)
        for r in range(n):
            s = 0.0
            for j in range(k):
                s += abs(a[r, j] - b[r, j])
            out[r] = s
        return out

    return SimpleNamespace(
        name="numba",
        relu_forward=relu_forward,
        relu_backward=relu_backward,
        adam_step=adam_step,
        softmax_xent=softmax_xent,
        linf_project=linf_project,
        row_l1_distance=row_l1_distance,
        # two mat-vecs per iteration: BLAS beats a compiled loop here
        power_iteration=_np_power_iteration,
    )


def _numba_disabled() -> bool:
    return os.environ.get("LIPENS_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is optional
    numba_kernels = None

if numba_kernels is None or _numba_disabled():
    BACKEND = "numpy"
    kernels = numpy_kernels
else:
    BACKEND = "numba"
    kernels = numba_kernels
