"""LSTM cell and sequence machinery with exact analytic gradients.

Gate order inside the stacked 4h rows of W_x, W_h and b is fixed as
input i, forget f, output o, candidate g:

    a = W_x x_t + W_h h_prev + b
    i = sigmoid(a[0:h])    f = sigmoid(a[h:2h])
    o = sigmoid(a[2h:3h])  g = tanh(a[3h:4h])
    c = f * c_prev + i * g
    h = o * tanh(c)

Backward passes are hand-derived from these equations; no truncation is
applied anywhere (sequences stay short at this scale), so analytic
gradients can be held to finite-difference oracles at tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import LOG_EPS, Rng, cross_entropy, softmax


@dataclass
class LstmParams:
    """Stacked-gate parameters: W_x (4h, d), W_h (4h, h), b (4h,)."""

    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[1]

    def validate(self) -> None:
        h = self.hidden_size
        if self.W_x.shape[0] != 4 * h or self.W_h.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM shapes: W_x {self.W_x.shape}, "
                f"W_h {self.W_h.shape}, b {self.b.shape}"
            )


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


def zero_state(hidden_size: int) -> LstmState:
    return LstmState(np.zeros(hidden_size), np.zeros(hidden_size))


def new_lstm_params(input_size: int, hidden_size: int, rng: Rng) -> LstmParams:
    """Uniform [-0.08, 0.08) init with the forget-gate bias pinned at 1.0."""
    W_x = rng.init_weights((4 * hidden_size, input_size))
    W_h = rng.init_weights((4 * hidden_size, hidden_size))
    b = rng.init_weights((4 * hidden_size,))
    b[hidden_size : 2 * hidden_size] = 1.0
    return LstmParams(W_x, W_h, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class CellCache:
    """Forward intermediates needed by cell_backward."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray


def cell_forward(
    x_t: np.ndarray, prev: LstmState, p: LstmParams
) -> tuple[LstmState, CellCache]:
    x_t = np.asarray(x_t, dtype=np.float64)
    h = p.hidden_size
    if x_t.shape != (p.input_size,):
        raise ShapeError(
            f"cell input has shape {x_t.shape}, expected ({p.input_size},)"
        )
    if prev.h.shape != (h,) or prev.c.shape != (h,):
        raise ShapeError(
            f"cell state shapes {prev.h.shape}/{prev.c.shape} do not match hidden size {h}"
        )
    a = p.W_x @ x_t + p.W_h @ prev.h + p.b
    i = _sigmoid(a[0:h])
    f = _sigmoid(a[h : 2 * h])
    o = _sigmoid(a[2 * h : 3 * h])
    g = np.tanh(a[3 * h : 4 * h])
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h_out = o * tanh_c
    cache = CellCache(x_t, prev.h, prev.c, i, f, o, g, c, tanh_c)
    return LstmState(h_out, c), cache


def _gate_backward(dh: np.ndarray, dc: np.ndarray, cache: CellCache):
    """Core gate derivatives: upstream (dh, dc) -> (da, dc_prev)."""
    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    do = dh * cache.tanh_c
    dc_total = dc + dh * o * (1.0 - cache.tanh_c**2)
    di = dc_total * g
    df = dc_total * cache.c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    da = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g**2)]
    )
    return da, dc_prev


def cell_backward(
    dh: np.ndarray, dc: np.ndarray, cache: CellCache, p: LstmParams
) -> tuple[dict[str, np.ndarray], np.ndarray, LstmState]:
    """Exact gradients of one cell step.

    dh, dc are the upstream gradients on the step's outputs h and c.
    Returns ({W_x, W_h, b} grads, dL/dx_t, gradient state for the previous
    step as an LstmState carrying (dh_prev, dc_prev)).
    """
    h = p.hidden_size
    if dh.shape != (h,) or dc.shape != (h,):
        raise ShapeError(f"upstream shapes {dh.shape}/{dc.shape} do not match hidden size {h}")
    if cache.x.shape != (p.input_size,):
        raise ShapeError(
            f"cache input width {cache.x.shape} does not match params ({p.input_size})"
        )
    da, dc_prev = _gate_backward(dh, dc, cache)
    grads = {
        "W_x": np.outer(da, cache.x),
        "W_h": np.outer(da, cache.h_prev),
        "b": da,
    }
    dx = p.W_x.T @ da
    dh_prev = p.W_h.T @ da
    return grads, dx, LstmState(dh_prev, dc_prev)


def layer_forward(
    inputs: np.ndarray, p: LstmParams, init: LstmState | None = None
) -> tuple[np.ndarray, list[CellCache]]:
    """Unroll one layer over a whole input sequence.

    Step arithmetic is exactly cell_forward's, so incremental decoders
    produce bitwise-identical states. Returns the stacked hidden outputs
    (T, h) and the per-step caches for layer_backward.
    """
    state = init if init is not None else zero_state(p.hidden_size)
    caches: list[CellCache] = []
    H = np.empty((inputs.shape[0], p.hidden_size))
    for t in range(inputs.shape[0]):
        state, cache = cell_forward(inputs[t], state, p)
        caches.append(cache)
        H[t] = state.h
    return H, caches


def layer_backward(
    dH: np.ndarray, caches: list[CellCache], p: LstmParams
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Full-length backward through one layer.

    dH holds the per-step upstream gradients on the hidden outputs
    (recurrent flow is handled internally). Per-parameter accumulation over
    steps is batched into single matrix products, which is what makes long
    unrolls affordable. Returns ({W_x, W_h, b} grads, dL/dinputs).
    """
    T = len(caches)
    if dH.shape != (T, p.hidden_size):
        raise ShapeError(f"upstream shape {dH.shape} does not match ({T}, {p.hidden_size})")
    dA = np.empty((T, 4 * p.hidden_size))
    dh_rec = np.zeros(p.hidden_size)
    dc_rec = np.zeros(p.hidden_size)
    for t in range(T - 1, -1, -1):
        da, dc_rec = _gate_backward(dH[t] + dh_rec, dc_rec, caches[t])
        dA[t] = da
        dh_rec = p.W_h.T @ da
    X = np.stack([c.x for c in caches])
    Hprev = np.stack([c.h_prev for c in caches])
    grads = {"W_x": dA.T @ X, "W_h": dA.T @ Hprev, "b": dA.sum(axis=0)}
    return grads, dA @ p.W_x


def sequence_bptt(
    inputs: np.ndarray,
    targets: list[int],
    p: LstmParams,
    head: tuple[np.ndarray, np.ndarray],
    loss_weights: list[float] | None = None,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Unrolled forward + full-length backward for next-token prediction.

    inputs is a (T, d) array of already-embedded step inputs, targets the
    per-step token ids, head the output projection (W of shape (|V|, h),
    bias of shape (|V|,)). Per-step loss is cross-entropy of softmax(W h + b)
    against the target, optionally scaled by loss_weights. Returns
    (total loss, grads over {W_x, W_h, b, head_W, head_b}, dL/dinputs).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ShapeError(f"inputs must be a nonempty (T, d) array, got {inputs.shape}")
    T = inputs.shape[0]
    if len(targets) != T:
        raise ShapeError(f"{T} inputs but {len(targets)} targets")
    if loss_weights is None:
        loss_weights = [1.0] * T
    if len(loss_weights) != T:
        raise ShapeError(f"{T} inputs but {len(loss_weights)} loss weights")
    head_W, head_b = head
    h_size = p.hidden_size
    if head_W.ndim != 2 or head_W.shape[1] != h_size or head_b.shape != (head_W.shape[0],):
        raise ShapeError(
            f"head shapes {head_W.shape}/{head_b.shape} do not match hidden size {h_size}"
        )

    H, caches = layer_forward(inputs, p)
    total = 0.0
    dLogits = np.empty((T, head_W.shape[0]))
    for t in range(T):
        dist = softmax(head_W @ H[t] + head_b)
        total += loss_weights[t] * cross_entropy(dist, targets[t])
        p_target = float(dist[targets[t]])
        # d/dlogits of -w*ln(p_y + eps); the p/(p+eps) factor keeps the
        # analytic value exact under the epsilon floor.
        scale = loss_weights[t] * p_target / (p_target + LOG_EPS)
        dlogits = scale * dist
        dlogits[targets[t]] -= scale
        dLogits[t] = dlogits

    dH = dLogits @ head_W
    layer_grads, d_inputs = layer_backward(dH, caches, p)
    grads = {
        "W_x": layer_grads["W_x"],
        "W_h": layer_grads["W_h"],
        "b": layer_grads["b"],
        "head_W": dLogits.T @ H,
        "head_b": dLogits.sum(axis=0),
    }
    return total, grads, d_inputs
