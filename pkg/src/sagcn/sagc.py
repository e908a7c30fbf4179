"""Block-sparse sequence adjacency and the five-layer graph-convolution stack.

Nodes are indexed frame-major: node ``(t, i)`` sits at row ``t * N + i`` of
the dense ``(N*T, N*T)`` adjacency. The dense matrix is never formed on the
hot path; each block-row holds a weighted intra-frame block on the diagonal
and weighted identity blocks towards the retained past frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import MaskedAttention, self_attention, topk_prune
from .errors import ContractError, ShapeError
from .numcore import Params, Tensor, uniform_init
from .numcore import ops as tn

GC_WIDTHS = (32, 64, 64, 128, 128)


@dataclass
class SparseBlockAdjacency:
    """Attention-weighted block adjacency for one sequence or a batch.

    ``diag`` holds the weight of each diagonal block ``(..., T)``;
    ``past_idx``/``past_w`` list the retained past frames of each block-row
    padded to a common width ``(..., T, P)``, with ``past_valid`` marking
    real entries (padding weights are exactly zero).
    """

    intra: np.ndarray
    diag: Tensor
    past_idx: np.ndarray
    past_w: Tensor
    past_valid: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.diag.shape[-1]

    @property
    def n_joints(self) -> int:
        return self.intra.shape[0]

    @property
    def batched(self) -> bool:
        return self.diag.ndim == 2

    def blocks(self, b: int | None = None) -> list[list[tuple[int, float]]]:
        """Per block-row list of ``(column frame, weight)``, diagonal last."""
        diag, idx, w, valid = self.diag.data, self.past_idx, self.past_w.data, self.past_valid
        if self.batched:
            diag, idx, w, valid = diag[b], idx[b], w[b], valid[b]
        rows = []
        for t in range(diag.shape[0]):
            row = [(int(u), float(s)) for u, s, ok in zip(idx[t], w[t], valid[t]) if ok]
            row.append((t, float(diag[t])))
            rows.append(row)
        return rows

    def to_dense(self, b: int | None = None) -> np.ndarray:
        """Expand to the dense ``(N*T, N*T)`` matrix."""
        n, t = self.n_joints, self.n_frames
        dense = np.zeros((n * t, n * t))
        eye = np.eye(n)
        for row, blocks in enumerate(self.blocks(b)):
            for u, s in blocks:
                dense[row * n:(row + 1) * n, u * n:(u + 1) * n] += s * (self.intra if u == row else eye)
        return dense


def assemble_adjacency(att: MaskedAttention, intra: np.ndarray) -> SparseBlockAdjacency:
    keep = att.keep
    if keep.ndim not in (2, 3):
        raise ShapeError(f"attention support must be (T, T) or (B, T, T), got {keep.shape}")
    t = keep.shape[-1]
    if intra.ndim != 2 or intra.shape[0] != intra.shape[1]:
        raise ShapeError(f"intra-frame adjacency must be square, got {intra.shape}")
    diag_idx = np.arange(t)
    if not keep[..., diag_idx, diag_idx].all():
        raise ContractError("attention support is missing a diagonal entry")
    past = keep & np.tri(t, k=-1, dtype=bool)
    counts = past.sum(axis=-1)
    width = int(counts.max()) if counts.size else 0
    # stable argsort of ~past lists retained columns first, in frame order
    idx = np.argsort(~past, axis=-1, kind="stable")[..., :width]
    valid = np.arange(width) < counts[..., None]
    idx = np.where(valid, idx, 0)
    s = att.s_mask
    if keep.ndim == 2:
        diag = s[diag_idx, diag_idx]
        past_w = s[diag_idx[:, None], idx]
    else:
        bidx = np.arange(keep.shape[0])
        diag = s[bidx[:, None], diag_idx[None, :], diag_idx[None, :]]
        past_w = s[bidx[:, None, None], diag_idx[None, :, None], idx]
    past_w = past_w * valid.astype(np.float64)
    if np.any(diag.data <= 0):
        raise ContractError("diagonal attention weight must be positive")
    return SparseBlockAdjacency(np.asarray(intra, dtype=np.float64), diag, idx, past_w, valid)


def normalized_propagate(adj: SparseBlockAdjacency, h) -> Tensor:
    """Compute ``D^-1 A_s h`` for node features ``h`` of shape ``(..., T, N, C)``.

    Fused into one tape node; gradients reach ``h`` and both sets of
    attention weights, including their effect on the degrees.
    """
    h = tn.as_tensor(h)
    lead = 2 if adj.batched else 1
    if h.ndim != lead + 2 or h.shape[lead - 1:lead + 1] != (adj.n_frames, adj.n_joints):
        raise ShapeError(f"features {h.shape} do not match adjacency (T={adj.n_frames}, N={adj.n_joints})")
    t, n, c = h.shape[-3:]
    b = h.shape[0] if adj.batched else 1
    intra = adj.intra
    row_sum = intra.sum(axis=1)
    diag_t, past_t = adj.diag, adj.past_w
    diag = diag_t.data.reshape(b, t)
    past = past_t.data.reshape(b, t, -1)
    idx = adj.past_idx.reshape(b, t, -1)
    hd = h.data.reshape(b, t, n, c)

    spatial = intra @ hd
    agg = diag[..., None, None] * spatial
    deg = diag[..., None] * row_sum + past.sum(axis=-1, keepdims=True)
    hf = hd.reshape(b, t, n * c)
    mix = None
    if idx.shape[-1]:
        # per-sequence (T, T) frame-mixing weights; only retained pairs are non-zero
        valid = adj.past_valid.reshape(idx.shape)
        bi, ti, _ = np.nonzero(valid)
        mix = np.zeros((b, t, t))
        mix[bi, ti, idx[valid]] = past[valid]
        agg = agg + (mix @ hf).reshape(b, t, n, c)
    if np.any(deg <= 0):
        raise ContractError("graph convolution hit a node with non-positive degree")
    out = agg / deg[..., None]

    def backward(g):
        q = g.reshape(b, t, n, c) / deg[..., None]
        g_deg = -np.einsum("btnc,btnc->btn", q, out)
        g_h = g_diag = g_past = None
        if h.requires_grad:
            g_h = diag[..., None, None] * (intra.T @ q)
            if mix is not None:
                g_h = g_h + (mix.transpose(0, 2, 1) @ q.reshape(b, t, n * c)).reshape(b, t, n, c)
            g_h = g_h.reshape(h.shape)
        if diag_t.requires_grad:
            g_diag = (np.einsum("btnc,btnc->bt", q, spatial) + g_deg @ row_sum).reshape(diag_t.shape)
        if past_t.requires_grad:
            g_past = np.broadcast_to(g_deg.sum(axis=-1, keepdims=True), past.shape).copy()
            if mix is not None:
                # per-sequence frame-pair products, sampled at the retained pairs
                pair = q.reshape(b, t, n * c) @ hf.transpose(0, 2, 1)
                g_past += np.take_along_axis(pair, idx, axis=-1)
            g_past = g_past.reshape(past_t.shape)
        return g_diag, g_past, g_h

    return tn.record_op("normalized_propagate", out.reshape(h.shape), (diag_t, past_t, h), backward)


def gc_layer(adj: SparseBlockAdjacency, h, w, residual=None, activate: bool = True) -> Tensor:
    """One graph convolution ``relu(D^-1 A_s h W [+ residual])``."""
    w = tn.as_tensor(w)
    h = tn.as_tensor(h)
    if w.ndim != 2 or h.shape[-1] != w.shape[0]:
        raise ShapeError(f"gc_layer weight {w.shape} does not fit features {h.shape}")
    out = tn.matmul(normalized_propagate(adj, h), w)
    if residual is not None:
        out = out + residual
    return tn.relu(out) if activate else out


def init_gc_stack(rng: np.random.Generator, n_in: int = 1, widths=GC_WIDTHS, prefix: str = "gc") -> Params:
    if len(widths) != 5:
        raise ShapeError("the graph-convolution stack has exactly five layers")
    params: Params = {}
    prev = n_in
    for i, w in enumerate(widths, start=1):
        params[f"{prefix}.w{i}"] = uniform_init(rng, (prev, w), prev)
        prev = w
    params[f"{prefix}.res1"] = uniform_init(rng, (widths[0], widths[2]), widths[0])
    params[f"{prefix}.res2"] = uniform_init(rng, (widths[2], widths[4]), widths[2])
    return params


def gc_stack(adj: SparseBlockAdjacency, h_in, params: Params, prefix: str = "gc") -> Tensor:
    """Five GC layers sharing ``adj`` with skips 1 -> 3 and 3 -> 5."""
    h1 = gc_layer(adj, h_in, params[f"{prefix}.w1"])
    h2 = gc_layer(adj, h1, params[f"{prefix}.w2"])
    h3 = gc_layer(adj, h2, params[f"{prefix}.w3"], residual=tn.matmul(h1, params[f"{prefix}.res1"]))
    h4 = gc_layer(adj, h3, params[f"{prefix}.w4"])
    return gc_layer(adj, h4, params[f"{prefix}.w5"], residual=tn.matmul(h3, params[f"{prefix}.res2"]))


def sagc_forward(h, att_params: Params, intra: np.ndarray, params: Params, k: int,
                 att_prefix: str = "att", gc_prefix: str = "gc",
                 return_attention: bool = False):
    """Attention, pruning, adjacency assembly, then the GC stack.

    ``h`` is ``(T, N)`` or ``(B, T, N)``; output is ``(..., T, N, C_out)``.
    """
    h_in, scores = self_attention(h, att_params, att_prefix)
    att = topk_prune(scores, k)
    adj = assemble_adjacency(att, intra)
    out = gc_stack(adj, tn.reshape(h_in, h_in.shape + (1,)), params, gc_prefix)
    if return_attention:
        return out, att
    return out
