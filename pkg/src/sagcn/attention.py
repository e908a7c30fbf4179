"""Causal self-attention over frames and top-K pruning of the score matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numcore import Params, Tensor, uniform_init
from .numcore import ops as tn


def init_attention(rng: np.random.Generator, n_features: int, prefix: str = "att") -> Params:
    return {
        f"{prefix}.w_q": uniform_init(rng, (n_features, n_features), n_features),
        f"{prefix}.w_k": uniform_init(rng, (n_features, n_features), n_features),
        f"{prefix}.w_v": uniform_init(rng, (n_features, n_features), n_features),
    }


def causal_mask(t: int) -> np.ndarray:
    return np.tri(t, dtype=bool)


def self_attention(h, params: Params, prefix: str = "att", scaled: bool = True) -> tuple[Tensor, Tensor]:
    """Masked scaled dot-product attention across the frame axis.

    ``h`` is ``(T, N)`` or ``(B, T, N)``. Returns ``(h_in, scores)`` where
    ``scores`` is the causal row-stochastic ``(..., T, T)`` matrix and
    ``h_in = scores @ V``.
    """
    h = tn.as_tensor(h)
    if h.ndim not in (2, 3) or h.shape[-2] < 1:
        raise ShapeError(f"self_attention expects (T, N) or (B, T, N) with T >= 1, got {h.shape}")
    n = h.shape[-1]
    q = tn.matmul(h, params[f"{prefix}.w_q"])
    k = tn.matmul(h, params[f"{prefix}.w_k"])
    v = tn.matmul(h, params[f"{prefix}.w_v"])
    logits = tn.matmul(q, tn.transpose(k, _swap_last(k.ndim)))
    if scaled:
        logits = logits * (1.0 / np.sqrt(n))
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("self_attention: non-finite attention logits")
    scores = tn.masked_softmax(logits, causal_mask(h.shape[-2]))
    return tn.matmul(scores, v), scores


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class MaskedAttention:
    """Pruned causal scores.

    ``s_mask`` keeps the retained scores and is exactly zero elsewhere;
    ``keep`` is the boolean support with the same shape.
    """

    s_mask: Tensor
    keep: np.ndarray

    @property
    def support(self) -> list:
        """Sorted retained column indices per row (nested per batch element)."""
        def rows(k):
            return [np.flatnonzero(r).tolist() for r in k]

        if self.keep.ndim == 2:
            return rows(self.keep)
        return [rows(k) for k in self.keep]


def topk_select(values: np.ndarray, k: int) -> np.ndarray:
    """Support mask: the diagonal plus the ``k`` largest non-zero past entries of each row.

    Ties go to the smaller frame index. Rows with at most ``k`` non-zero past
    entries keep all of them.
    """
    if k < 0:
        raise ConfigError(f"top-K must be non-negative, got {k}")
    t = values.shape[-1]
    past = np.tri(t, k=-1, dtype=bool) & (values > 0)
    ranked = np.where(past, values, -np.inf)
    order = np.argsort(-ranked, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(t), order.shape), axis=-1)
    return (past & (rank < k)) | np.eye(t, dtype=bool)


def topk_prune(scores, k: int) -> MaskedAttention:
    """Zero all but the diagonal and the top-``k`` past scores of each row.

    Selection is treated as a constant: retained entries keep their full
    gradient path and pruned entries get zero gradient.
    """
    scores = tn.as_tensor(scores)
    keep = topk_select(scores.data, k)
    return MaskedAttention(tn.mul(scores, keep.astype(np.float64)), keep)
