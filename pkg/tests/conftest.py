import numpy as np
import pytest

from sagcn.numcore import Tape, Tensor, make_rng
from sagcn.skeleton import build_intra_adjacency, chain_topology

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
# entries whose gradient magnitude is below this are not compared
GRAD_FLOOR = 1e-8


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over entries where either side exceeds ``floor``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    keep = denom > floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[keep] / denom[keep]))


def numeric_grad(loss_fn, tensor: Tensor, h: float = FD_STEP, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``tensor``.

    Returns ``(flat indices, derivatives)``. With ``max_entries`` a random
    subset of entries is probed.
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or make_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn().data)
        flat[i] = old - h
        down = float(loss_fn().data)
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return idx, out


def grad_check(loss_fn, tensors, max_entries: int | None = None, rng=None) -> float:
    """Worst relative error between tape gradients and central differences."""
    tensors = list(tensors)
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        idx, num = numeric_grad(loss_fn, t, max_entries=max_entries, rng=rng)
        worst = max(worst, rel_error(g.reshape(-1)[idx], num))
    return worst


def grad_mismatch(loss_fn, tensors, max_entries: int | None = None, rng=None, rtol: float = GRAD_RTOL) -> float:
    """Worst ``|a - n| / (rtol * max(|a|, |n|) + noise)`` over probed entries.

    ``noise`` bounds the rounding error of a central difference of a float64
    loss, ``16 * eps * max(|L|, 1) / h``. Values <= 1 mean agreement up to
    ``rtol`` wherever the finite difference can resolve the gradient.
    """
    tensors = list(tensors)
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, tensors)
    noise = 16 * np.finfo(np.float64).eps * max(abs(float(loss.data)), 1.0) / FD_STEP
    worst = 0.0
    for t, g in zip(tensors, grads):
        idx, num = numeric_grad(loss_fn, t, max_entries=max_entries, rng=rng)
        a = g.reshape(-1)[idx]
        scale = rtol * np.maximum(np.abs(a), np.abs(num)) + noise
        worst = max(worst, float(np.max(np.abs(a - num) / scale)) if idx.size else 0.0)
    return worst


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def chain5():
    return chain_topology(5)


@pytest.fixture
def intra5(chain5):
    return build_intra_adjacency(chain5)


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
