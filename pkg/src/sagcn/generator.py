"""Conditional action generator.

noise + label embedding -> GRU -> cumulative sum of the GRU outputs ->
three dense layers -> SA-GC stack -> per-joint coordinate head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import init_attention
from .errors import ConfigError, ContractError
from .numcore import Params, Tensor, gru_sequence, init_gru, init_linear, linear, uniform_init
from .numcore import ops as tn
from .sagc import GC_WIDTHS, init_gc_stack, sagc_forward
from .skeleton import ActionSequence


@dataclass
class GenConfig:
    n_classes: int
    n_joints: int
    coord_dims: int = 2
    seq_len: int = 50
    noise_dim: int = 64
    embed_dim: int = 32
    hidden: int = 128
    top_k: int = 5
    gc_widths: tuple[int, ...] = GC_WIDTHS
    per_step_noise: bool = False
    linear_widths: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.gc_widths = tuple(self.gc_widths)
        if not self.linear_widths:
            self.linear_widths = (self.n_joints, self.n_joints)
        self.linear_widths = tuple(self.linear_widths)
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")
        if self.n_classes < 1 or self.n_joints < 1 or self.coord_dims < 1:
            raise ConfigError("class count, joint count and coord dims must be positive")
        if len(self.linear_widths) != 2:
            raise ConfigError("linear_widths lists the two hidden widths of the three dense layers")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


def init_generator(cfg: GenConfig, rng: np.random.Generator) -> Params:
    n = cfg.n_joints
    params: Params = {"g.embed": uniform_init(rng, (cfg.n_classes, cfg.embed_dim), cfg.n_classes)}
    params.update(init_gru(rng, cfg.noise_dim + cfg.embed_dim, cfg.hidden, "g.rnn"))
    widths = (cfg.hidden,) + cfg.linear_widths + (n,)
    for i in range(3):
        params.update(init_linear(rng, widths[i], widths[i + 1], f"g.lin{i + 1}"))
    params.update(init_attention(rng, n, "g.att"))
    params.update(init_gc_stack(rng, 1, cfg.gc_widths, "g.gc"))
    params.update(init_linear(rng, cfg.gc_widths[-1], cfg.coord_dims, "g.head"))
    return params


def label_weights(labels, n_classes: int) -> np.ndarray:
    """One-hot rows for integer labels; float ``(B, C)`` rows pass through."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != n_classes:
            raise ContractError(f"label weights have {labels.shape[1]} columns, expected {n_classes}")
        return labels.astype(np.float64)
    labels = labels.astype(np.int64).reshape(-1)
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ContractError(f"labels {labels.tolist()} outside [0, {n_classes})")
    return np.eye(n_classes)[labels]


def mix_labels(y1: int, y2: int, lam: float, n_classes: int) -> np.ndarray:
    """``lam * onehot(y1) + (1 - lam) * onehot(y2)``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixing weight must lie in [0, 1], got {lam}")
    for y in (y1, y2):
        if not 0 <= y < n_classes:
            raise ContractError(f"label {y} outside [0, {n_classes})")
    if y1 == y2:
        raise ContractError("mixing needs two distinct labels")
    out = np.zeros(n_classes)
    out[y1] = lam
    out[y2] = 1.0 - lam
    return out


def sample_noise(cfg: GenConfig, rng: np.random.Generator, batch: int) -> np.ndarray:
    if cfg.per_step_noise:
        return rng.standard_normal((batch, cfg.seq_len, cfg.noise_dim))
    return rng.standard_normal((batch, cfg.noise_dim))


def generator_forward(params: Params, cfg: GenConfig, intra: np.ndarray, labels, z,
                      trace: dict | None = None) -> Tensor:
    """Batched generator pass returning coordinates ``(B, T, N, D)``.

    ``labels`` are integer classes or ``(B, C)`` label weights; ``z`` is
    ``(B, Z)`` (one code per sequence) or ``(B, T, Z)``. If ``trace`` is a
    dict it receives the GRU outputs and their running sums.
    """
    w = label_weights(labels, cfg.n_classes)
    z = np.asarray(z, dtype=np.float64)
    batch, t = w.shape[0], cfg.seq_len
    if z.shape[0] != batch:
        raise ContractError(f"{z.shape[0]} noise codes for {batch} labels")
    emb = tn.matmul(Tensor(w), params["g.embed"])  # (B, E)
    if z.ndim == 2:
        z = np.broadcast_to(z[:, None, :], (batch, t, z.shape[1]))
    emb_seq = tn.matmul(Tensor(np.ones((t, 1))), tn.reshape(emb, (batch, 1, -1)))  # (B, T, E)
    rnn_in = tn.concat([Tensor(z), emb_seq], axis=-1)
    o = gru_sequence(rnn_in, params, "g.rnn")
    c = tn.cumsum(o, axis=1)
    if trace is not None:
        trace["rnn_out"] = o
        trace["accumulated"] = c
    x = tn.relu(linear(params, "g.lin1", c))
    x = tn.relu(linear(params, "g.lin2", x))
    x = linear(params, "g.lin3", x)  # (B, T, N)
    feats = sagc_forward(x, params, intra, params, cfg.top_k, att_prefix="g.att", gc_prefix="g.gc")
    return linear(params, "g.head", feats)


def generate_batch(params: Params, cfg: GenConfig, intra: np.ndarray, labels,
                   rng: np.random.Generator) -> np.ndarray:
    w = label_weights(labels, cfg.n_classes)
    z = sample_noise(cfg, rng, w.shape[0])
    return generator_forward(params, cfg, intra, w, z).data


def generate(params: Params, cfg: GenConfig, intra: np.ndarray, label: int,
             rng: np.random.Generator) -> ActionSequence:
    """Sample one sequence conditioned on ``label``."""
    if not 0 <= label < cfg.n_classes:
        raise ContractError(f"label {label} outside [0, {cfg.n_classes})")
    return ActionSequence(generate_batch(params, cfg, intra, [label], rng)[0], label)
