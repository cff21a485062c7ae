"""Central finite-difference gradient oracle shared by the BPTT tests."""

import numpy as np

FD_STEP = 1e-5


def finite_difference(loss_fn, tensor: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. every entry of tensor.

    Mutates the tensor in place entry by entry and restores it, so loss_fn
    must read the same array object.
    """
    grad = np.zeros_like(tensor)
    it = np.nditer(tensor, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = tensor[idx]
        tensor[idx] = saved + step
        plus = loss_fn()
        tensor[idx] = saved - step
        minus = loss_fn()
        tensor[idx] = saved
        grad[idx] = (plus - minus) / (2.0 * step)
        it.iternext()
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries honest."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_grads(loss_fn, params: dict, analytic: dict, tol: float = 1e-4) -> dict:
    """Assert every named tensor's analytic gradient against finite differences."""
    errors = {}
    for name, tensor in params.items():
        numeric = finite_difference(loss_fn, tensor)
        err = max_rel_error(analytic[name], numeric)
        errors[name] = err
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol}"
    return errors
