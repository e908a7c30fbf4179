"""Layers built from tensor primitives: dense layers and the GRU cell.

Parameters live in flat ``dict[str, Tensor]`` mappings with dotted names,
which keeps checkpointing and the optimizer trivial.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError
from . import tensor as tn
from .tensor import Tensor

Params = dict[str, Tensor]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, prefix: str) -> Params:
    return {
        f"{prefix}.w": uniform_init(rng, (n_in, n_out), n_in),
        f"{prefix}.b": uniform_init(rng, (n_out,), n_in),
    }


def linear(params: Params, prefix: str, x) -> Tensor:
    return tn.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def init_gru(rng: np.random.Generator, n_in: int, n_hidden: int, prefix: str) -> Params:
    """GRU weights with gates stacked as [reset | update | candidate]."""
    return {
        f"{prefix}.w_x": uniform_init(rng, (n_in, 3 * n_hidden), n_in),
        f"{prefix}.w_h": uniform_init(rng, (n_hidden, 3 * n_hidden), n_hidden),
        f"{prefix}.b_x": uniform_init(rng, (3 * n_hidden,), n_hidden),
        f"{prefix}.b_h": uniform_init(rng, (3 * n_hidden,), n_hidden),
    }


def _gru_update(gx: Tensor, h_prev, params: Params, prefix: str) -> Tensor:
    return tn.gru_step(gx, h_prev, params[f"{prefix}.w_h"], params[f"{prefix}.b_h"])


def gru_cell(x_t, h_prev, params: Params, prefix: str = "gru") -> Tensor:
    """One GRU step: ``x_t`` is (B, I), ``h_prev`` is (B, H)."""
    x_t, h_prev = tn.as_tensor(x_t), tn.as_tensor(h_prev)
    w_x = params[f"{prefix}.w_x"]
    n_hidden = params[f"{prefix}.w_h"].shape[0]
    if x_t.shape[-1] != w_x.shape[0] or h_prev.shape[-1] != n_hidden:
        raise ShapeError(
            f"gru_cell: input {x_t.shape} / state {h_prev.shape} do not fit "
            f"weights ({w_x.shape[0]} -> {n_hidden})"
        )
    if x_t.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"gru_cell: batch shapes differ, {x_t.shape} vs {h_prev.shape}")
    gx = tn.matmul(x_t, w_x) + params[f"{prefix}.b_x"]
    return _gru_update(gx, h_prev, params, prefix)


def gru_sequence(xs, params: Params, prefix: str = "gru", h0=None) -> Tensor:
    """Run the GRU over ``xs`` of shape (B, T, I); returns all states (B, T, H)."""
    xs = tn.as_tensor(xs)
    w_x = params[f"{prefix}.w_x"]
    n_hidden = params[f"{prefix}.w_h"].shape[0]
    if xs.ndim != 3 or xs.shape[-1] != w_x.shape[0]:
        raise ShapeError(f"gru_sequence: expected (B, T, {w_x.shape[0]}) input, got {xs.shape}")
    batch = xs.shape[0]
    h = Tensor(np.zeros((batch, n_hidden))) if h0 is None else tn.as_tensor(h0)
    # input projections for all steps at once
    gx_all = tn.matmul(xs, w_x) + params[f"{prefix}.b_x"]
    return tn.gru_scan(gx_all, h, params[f"{prefix}.w_h"], params[f"{prefix}.b_h"])


@contextmanager
def frozen(params: Params):
    """Temporarily stop tracking gradients for ``params``."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]
