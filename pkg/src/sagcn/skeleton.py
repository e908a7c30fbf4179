"""Skeleton topology, action sequences, on-disk formats and synthetic data."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

SASQ_MAGIC = b"SASQ"
SASQ_VERSION = 1
_HEADER = struct.Struct("<4s6I")
_LABEL = struct.Struct("<I")


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    coord_dims: int = 2

    def __post_init__(self):
        n = len(self.joint_names)
        if n < 1:
            raise ContractError("topology needs at least one joint")
        if self.coord_dims < 1:
            raise ContractError("coord_dims must be positive")
        seen = set()
        canon = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ContractError(f"edge ({i}, {j}) out of range for {n} joints")
            if i == j:
                raise ContractError(f"self-loop at joint {i} in edge list")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ContractError(f"duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "edges", tuple(canon))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if not _connected(n, canon):
            raise ContractError("skeleton graph is not connected")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_joints, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg


def _connected(n: int, edges) -> bool:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for k in nbrs[stack.pop()]:
            if k not in seen:
                seen.add(k)
                stack.append(k)
    return len(seen) == n


def chain_topology(n_joints: int = 5, coord_dims: int = 2) -> SkeletonTopology:
    """A simple kinematic chain ``0 - 1 - ... - n-1``."""
    names = tuple(f"j{i}" for i in range(n_joints))
    return SkeletonTopology(names, tuple((i, i + 1) for i in range(n_joints - 1)), coord_dims)


def h36m_style_topology(coord_dims: int = 2) -> SkeletonTopology:
    """15-joint tree in the spirit of the Human-3.6m 2D skeleton (joint 0 is the pelvis)."""
    names = (
        "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
        "thorax", "head", "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    )
    edges = (
        (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8),
        (7, 9), (9, 10), (10, 11), (7, 12), (12, 13), (13, 14),
    )
    return SkeletonTopology(names, edges, coord_dims)


PRESETS = {"chain5": chain_topology, "h36m15": h36m_style_topology}


def save_topology(topo: SkeletonTopology, path) -> None:
    doc = {
        "joints": list(topo.joint_names),
        "edges": [list(e) for e in topo.edges],
        "coord_dims": topo.coord_dims,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_topology(path) -> SkeletonTopology:
    """Read a topology file, or build a preset when ``path`` names one."""
    if str(path) in PRESETS:
        return PRESETS[str(path)]()
    try:
        doc = json.loads(Path(path).read_text())
        return SkeletonTopology(
            tuple(doc["joints"]),
            tuple(tuple(e) for e in doc["edges"]),
            int(doc.get("coord_dims", 2)),
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed topology file ({exc})") from None


def build_intra_adjacency(topo: SkeletonTopology) -> np.ndarray:
    """Bone adjacency plus self-loops, as a symmetric 0/1 ``(N, N)`` matrix."""
    a = np.eye(topo.n_joints)
    for i, j in topo.edges:
        a[i, j] = a[j, i] = 1.0
    return a


@dataclass
class ActionSequence:
    coords: np.ndarray  # (T, N, D)
    label: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[0] < 1:
            raise ContractError(f"sequence coords must be (T>=1, N, D), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ContractError("sequence contains non-finite coordinates")
        self.label = int(self.label)

    @property
    def length(self) -> int:
        return self.coords.shape[0]


@dataclass
class Dataset:
    sequences: list[ActionSequence]
    topology: SkeletonTopology
    class_names: list[str]
    train_idx: np.ndarray = field(default=None)
    test_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        n, d = self.topology.n_joints, self.topology.coord_dims
        c = len(self.class_names)
        for k, s in enumerate(self.sequences):
            if s.coords.shape[1:] != (n, d):
                raise ContractError(f"sequence {k} has shape {s.coords.shape}, topology wants (*, {n}, {d})")
            if not 0 <= s.label < c:
                raise ContractError(f"sequence {k} label {s.label} outside [0, {c})")
        if self.train_idx is None:
            self.train_idx = np.arange(len(self.sequences))
        if self.test_idx is None:
            self.test_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        both = np.concatenate([self.train_idx, self.test_idx])
        if np.intersect1d(self.train_idx, self.test_idx).size or set(both.tolist()) != set(range(len(self.sequences))):
            raise ContractError("train/test split must be disjoint and cover every sequence")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def coords(self) -> np.ndarray:
        """Stacked coordinates ``(M, T, N, D)``; requires equal lengths."""
        return np.stack([s.coords for s in self.sequences])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.sequences[i] for i in idx], self.topology, list(self.class_names))

    def train(self) -> "Dataset":
        return self.subset(self.train_idx)

    def test(self) -> "Dataset":
        return self.subset(self.test_idx)

    def centered(self, root: int = 0) -> "Dataset":
        """Copy with every sequence translated by :func:`center_on_root`."""
        seqs = [ActionSequence(center_on_root(s.coords, root), s.label) for s in self.sequences]
        return Dataset(seqs, self.topology, list(self.class_names), self.train_idx.copy(), self.test_idx.copy())

    def with_split(self, test_fraction: float, rng: np.random.Generator) -> "Dataset":
        perm = rng.permutation(len(self.sequences))
        n_test = int(round(test_fraction * len(perm)))
        return Dataset(self.sequences, self.topology, list(self.class_names),
                       np.sort(perm[n_test:]), np.sort(perm[:n_test]))


def center_on_root(coords: np.ndarray, root: int = 0) -> np.ndarray:
    """Translate ``(..., T, N, D)`` so the root joint of frame 0 sits at the origin."""
    return coords - coords[..., :1, root:root + 1, :]


# ---------------------------------------------------------------------------
# SASQ binary format
# ---------------------------------------------------------------------------


def save_sequences(path, sequences, n_classes: int, topo: SkeletonTopology, seq_len: int | None = None) -> None:
    """Write sequences as little-endian SASQ (float32 coordinates)."""
    sequences = list(sequences)
    if seq_len is None:
        if not sequences:
            raise ContractError("seq_len is required when writing an empty file")
        seq_len = sequences[0].length
    n, d = topo.n_joints, topo.coord_dims
    chunks = [_HEADER.pack(SASQ_MAGIC, SASQ_VERSION, n_classes, n, d, seq_len, len(sequences))]
    for k, s in enumerate(sequences):
        if s.coords.shape != (seq_len, n, d):
            raise ContractError(f"sequence {k} has shape {s.coords.shape}, expected {(seq_len, n, d)}")
        chunks.append(_LABEL.pack(s.label))
        chunks.append(s.coords.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_sasq_header(path) -> dict:
    raw = Path(path).read_bytes()[: _HEADER.size]
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, c, n, d, t, count = _HEADER.unpack(raw)
    if magic != SASQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    return {"version": version, "n_classes": c, "n_joints": n, "coord_dims": d, "seq_len": t, "count": count}


def load_sequences(path, topo: SkeletonTopology, class_names: list[str] | None = None) -> Dataset:
    """Parse a SASQ file; every sequence lands in the training split."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, c, n, d, t, count = _HEADER.unpack_from(raw)
    if magic != SASQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SASQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if (n, d) != (topo.n_joints, topo.coord_dims):
        raise FormatError(f"{path}: file has N={n}, D={d}; topology has N={topo.n_joints}, D={topo.coord_dims}")
    if class_names is None:
        class_names = [f"class_{i}" for i in range(c)]
    elif len(class_names) != c:
        raise FormatError(f"{path}: file declares {c} classes, {len(class_names)} names given")
    rec_size = _LABEL.size + 4 * t * n * d
    if len(raw) != _HEADER.size + count * rec_size:
        raise FormatError(f"{path}: expected {count} records of {rec_size} bytes, body is "
                          f"{len(raw) - _HEADER.size} bytes")
    if count and t < 1:
        raise FormatError(f"{path}: sequence length must be positive")
    sequences = []
    bad_label, bad_value = [], []
    off = _HEADER.size
    for k in range(count):
        (label,) = _LABEL.unpack_from(raw, off)
        coords = np.frombuffer(raw, dtype="<f4", count=t * n * d, offset=off + _LABEL.size)
        off += rec_size
        ok = True
        if label >= c:
            bad_label.append(k)
            ok = False
        if not np.all(np.isfinite(coords)):
            bad_value.append(k)
            ok = False
        if ok:
            sequences.append(ActionSequence(coords.reshape(t, n, d).astype(np.float64), label))
    problems = []
    if bad_label:
        problems.append(f"label out of range in records {bad_label}")
    if bad_value:
        problems.append(f"non-finite coordinates in records {bad_value}")
    if problems:
        raise FormatError(f"{path}: " + "; ".join(problems))
    return Dataset(sequences, topo, list(class_names))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_classes: int = 3
    n_joints: int = 5
    seq_len: int = 16
    coord_dims: int = 2
    train_per_class: int = 100
    test_per_class: int = 100
    noise: float = 0.05
    amplitude: float = 0.5
    bone_length: float = 0.3
    # class c swings at omega0 + c * omega_step rad/frame with joint phase lag phase0 + c * phase_step
    omega0: float = 0.1
    omega_step: float = 0.1
    phase0: float = 0.4
    phase_step: float = 0.5

    def omega(self, c: int) -> float:
        return self.omega0 + self.omega_step * c

    def phase(self, c: int) -> float:
        return self.phase0 + self.phase_step * c


def synth_mean_trajectory(cfg: SynthConfig, c: int) -> np.ndarray:
    """Noise-free ``(T, N, D)`` motion of class ``c``.

    A vertical chain whose joint ``j`` swings sideways by
    ``amplitude * sin(omega_c * t + phase_c * j)`` and bobs vertically by
    half that amplitude in quadrature.
    """
    t = np.arange(cfg.seq_len)[:, None]
    j = np.arange(cfg.n_joints)[None, :]
    arg = cfg.omega(c) * t + cfg.phase(c) * j
    out = np.zeros((cfg.seq_len, cfg.n_joints, cfg.coord_dims))
    out[..., 0] = cfg.amplitude * np.sin(arg)
    if cfg.coord_dims > 1:
        out[..., 1] = cfg.bone_length * j + 0.5 * cfg.amplitude * np.cos(arg)
    return out


def synth_dataset(cfg: SynthConfig, rng: np.random.Generator) -> Dataset:
    if cfg.noise < 0:
        raise ConfigError(f"noise level must be non-negative, got {cfg.noise}")
    if cfg.n_classes < 1 or cfg.seq_len < 1 or cfg.n_joints < 1:
        raise ConfigError("synthetic dataset needs positive class count, length and joint count")
    topo = chain_topology(cfg.n_joints, cfg.coord_dims)
    means = [synth_mean_trajectory(cfg, c) for c in range(cfg.n_classes)]
    per_class = cfg.train_per_class + cfg.test_per_class
    sequences, train_idx, test_idx = [], [], []
    for c in range(cfg.n_classes):
        for k in range(per_class):
            noise = rng.normal(0.0, cfg.noise, size=means[c].shape) if cfg.noise > 0 else 0.0
            (train_idx if k < cfg.train_per_class else test_idx).append(len(sequences))
            sequences.append(ActionSequence(means[c] + noise, c))
    names = [f"motion_{c}" for c in range(cfg.n_classes)]
    return Dataset(sequences, topo, names, np.array(train_idx), np.array(test_idx))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_sequence(seq: ActionSequence, topo: SkeletonTopology, out_dir, size: int = 256,
                    extent: float | None = None, prefix: str = "frame") -> list[Path]:
    """Write one SVG per frame; returns the file paths in frame order.

    Coordinates in ``[-extent, extent]`` map onto the central 90% of the
    canvas (y up). ``extent`` defaults to the sequence's largest absolute
    coordinate, so all frames share one viewport.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create render directory {out_dir}: {exc}") from None
    xy = seq.coords[..., :2] if seq.coords.shape[-1] >= 2 else np.pad(seq.coords, ((0, 0), (0, 0), (0, 1)))
    if extent is None:
        extent = float(np.abs(xy).max())
    scale = 0.45 * size / extent if extent > 0 else 0.0
    half = size / 2.0
    width = len(str(seq.length - 1))
    paths = []
    for t in range(seq.length):
        px = half + scale * xy[t, :, 0]
        py = half - scale * xy[t, :, 1]
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
            f'viewBox="0 0 {size} {size}">',
            f'<rect width="{size}" height="{size}" fill="white"/>',
        ]
        for i, j in topo.edges:
            parts.append(f'<line x1="{px[i]:.3f}" y1="{py[i]:.3f}" x2="{px[j]:.3f}" y2="{py[j]:.3f}" '
                         'stroke="black" stroke-width="2"/>')
        for i in range(topo.n_joints):
            parts.append(f'<circle cx="{px[i]:.3f}" cy="{py[i]:.3f}" r="3" fill="red"/>')
        parts.append("</svg>")
        path = out_dir / f"{prefix}_{t:0{width}d}.svg"
        path.write_text("\n".join(parts) + "\n")
        paths.append(path)
    return paths
