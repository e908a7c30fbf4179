"""MMD two-sample statistics, the recognition classifier and mixing sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import softmax
from scipy.stats import spearmanr

from .errors import ConfigError, ContractError, ShapeError
from .generator import GenConfig, generator_forward, mix_labels, sample_noise
from .numcore import (AdamState, Params, Tape, Tensor, adam_step, gru_sequence, init_gru, init_linear,
                      linear, make_rng)
from .numcore import ops as tn
from .skeleton import Dataset

BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def _as_samples(x) -> np.ndarray:
    if isinstance(x, Dataset):
        x = x.coords()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def median_bandwidths(x: np.ndarray, y: np.ndarray, scales=BANDWIDTH_SCALES) -> tuple[float, ...]:
    """Median pairwise distance of the pooled sample times each scale.

    Falls back to a unit median when every pooled point coincides.
    """
    med = float(np.median(np.sqrt(pdist(np.concatenate([x, y]), "sqeuclidean"))))
    if not med > 0:
        med = 1.0
    return tuple(med * s for s in scales)


def rbf_mixture(d2: np.ndarray, bandwidths) -> np.ndarray:
    """Mean of ``exp(-d2 / (2 sigma^2))`` over the bandwidths; values in (0, 1]."""
    out = np.zeros_like(d2)
    for s in bandwidths:
        out += np.exp(-d2 / (2.0 * s * s))
    return out / len(bandwidths)


def mmd_unbiased(x, y, bandwidths=None, gamma: float | None = None) -> float:
    """Unbiased U-statistic estimate of squared MMD between samples ``x`` and ``y``.

    Rows are samples. The kernel is a mixture of RBFs with median-heuristic
    bandwidths unless ``bandwidths`` is given; ``gamma`` selects a single
    ``exp(-gamma * d^2)`` kernel instead. The estimate can be slightly
    negative. Swapping ``x`` and ``y`` gives the identical float.
    """
    x, y = _as_samples(x), _as_samples(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"mmd_unbiased expects 2-d sample matrices, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"sample dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractError(f"mmd_unbiased needs at least two samples per set, got {m} and {n}")
    if gamma is not None:
        def kern(d2):
            return np.exp(-gamma * d2)
    else:
        if bandwidths is None:
            bandwidths = median_bandwidths(x, y)

        def kern(d2):
            return rbf_mixture(d2, bandwidths)

    # (a-b)^2 == (b-a)^2 in floating point, and fsum is order independent,
    # so each term is invariant under swapping the arguments
    def offdiag_mean(a):
        k = kern(cdist(a, a, "sqeuclidean"))
        np.fill_diagonal(k, 0.0)
        return math.fsum(k.ravel()) / (len(a) * (len(a) - 1))

    kxy = math.fsum(kern(cdist(x, y, "sqeuclidean")).ravel()) / (m * n)
    kxx, kyy = offdiag_mean(x), offdiag_mean(y)
    return (min(kxx, kyy) + max(kxx, kyy)) - 2.0 * kxy


def _sequence_arrays(real, gen) -> tuple[np.ndarray, np.ndarray]:
    real, gen = _as_samples(real), _as_samples(gen)
    if real.ndim != 4 or gen.ndim != 4:
        raise ShapeError(f"expected (M, T, N, D) sequence stacks, got {real.shape} and {gen.shape}")
    if real.shape[1] != gen.shape[1]:
        raise ShapeError(f"sequence lengths differ: T={real.shape[1]} vs T={gen.shape[1]}")
    if real.shape[2:] != gen.shape[2:]:
        raise ShapeError(f"frame shapes differ: {real.shape[2:]} vs {gen.shape[2:]}")
    return real, gen


def mmd_frames(real, gen) -> tuple[list[float], list[tuple[float, ...]]]:
    """Per-frame MMD values and the bandwidths used for each frame."""
    real, gen = _sequence_arrays(real, gen)
    values, bws = [], []
    for t in range(real.shape[1]):
        a = real[:, t].reshape(len(real), -1)
        b = gen[:, t].reshape(len(gen), -1)
        bw = median_bandwidths(a, b)
        values.append(mmd_unbiased(a, b, bw))
        bws.append(bw)
    return values, bws


def mmd_avg(real, gen) -> float:
    """Mean over frame indices of the MMD between flattened ``N*D`` frames."""
    values, _ = mmd_frames(real, gen)
    return float(np.mean(values))


def mmd_seq(real, gen) -> float:
    """MMD between whole sequences flattened to ``T*N*D`` vectors."""
    real, gen = _sequence_arrays(real, gen)
    return mmd_unbiased(real.reshape(len(real), -1), gen.reshape(len(gen), -1))


@dataclass
class MMDReport:
    mmd_avg: float
    mmd_seq: float
    n_real: int
    n_gen: int
    bandwidths_seq: tuple[float, ...]
    bandwidths_frame: list[tuple[float, ...]] = field(default_factory=list)

    def to_kv(self) -> str:
        lines = [
            f"mmd_avg={self.mmd_avg!r}",
            f"mmd_seq={self.mmd_seq!r}",
            f"n_real={self.n_real}",
            f"n_gen={self.n_gen}",
            "bandwidths_seq=" + ",".join(repr(b) for b in self.bandwidths_seq),
        ]
        return "\n".join(lines) + "\n"


def mmd_report(real, gen) -> MMDReport:
    real, gen = _sequence_arrays(real, gen)
    values, bws = mmd_frames(real, gen)
    flat_r, flat_g = real.reshape(len(real), -1), gen.reshape(len(gen), -1)
    bw_seq = median_bandwidths(flat_r, flat_g)
    return MMDReport(float(np.mean(values)), mmd_unbiased(flat_r, flat_g, bw_seq),
                     len(real), len(gen), bw_seq, bws)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; other lines are ignored."""
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def noise_baseline(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal coordinates, the reference a generator has to beat."""
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# recognition classifier
# ---------------------------------------------------------------------------


@dataclass
class ClassifierConfig:
    hidden: int = 64
    steps: int = 500
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.hidden < 1:
            raise ConfigError("classifier needs steps >= 0, batch >= 1, hidden >= 1 and lr > 0")


@dataclass
class Classifier:
    params: Params
    n_classes: int
    test_accuracy: float | None = None


def init_classifier(rng: np.random.Generator, n_feat: int, n_classes: int, hidden: int = 64,
                    prefix: str = "cls") -> Params:
    """GRU over frames and a dense layer, then a C-way head.

    The head starts at zero so an untrained classifier is exactly uniform.
    """
    params = init_gru(rng, n_feat, hidden, f"{prefix}.rnn")
    params.update(init_linear(rng, hidden, hidden, f"{prefix}.fc"))
    params.update(init_linear(rng, hidden, n_classes, f"{prefix}.out"))
    params[f"{prefix}.out.w"].data[...] = 0.0
    params[f"{prefix}.out.b"].data[...] = 0.0
    return params


def classifier_logits(params: Params, x, prefix: str = "cls") -> Tensor:
    x = tn.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"classifier expects (B, T, N, D) input, got {x.shape}")
    b, t = x.shape[:2]
    expect = params[f"{prefix}.rnn.w_x"].shape[0]
    frames = tn.reshape(x, (b, t, -1))
    if frames.shape[2] != expect:
        raise ShapeError(f"classifier expects {expect} features per frame, got {frames.shape[2]}")
    h = gru_sequence(frames, params, f"{prefix}.rnn")[:, -1]
    h = tn.relu(linear(params, f"{prefix}.fc", h))
    return linear(params, f"{prefix}.out", h)


def predict_proba(clf: Classifier, x) -> np.ndarray:
    return softmax(classifier_logits(clf.params, np.asarray(x, dtype=np.float64)).data, axis=-1)


def train_classifier(dataset: Dataset, cfg: ClassifierConfig | None = None) -> Classifier:
    """Cross-entropy training on the train split; accuracy measured on the test split."""
    cfg = cfg or ClassifierConfig()
    if dataset.n_classes < 2:
        raise ContractError("a recognition classifier needs at least two classes")
    train = dataset.train()
    if len(train) == 0:
        raise ContractError("training split is empty")
    x, y = train.coords(), train.labels()
    if len(np.unique(y)) < 2:
        raise ContractError("training split holds a single class")
    rng = make_rng(cfg.seed)
    n_feat = x.shape[2] * x.shape[3]
    params = init_classifier(rng, n_feat, dataset.n_classes, cfg.hidden)
    opt = AdamState.for_params(params, lr=cfg.lr, beta1=0.9, beta2=0.999)
    names = list(params)
    for _ in range(cfg.steps):
        pick = rng.choice(len(x), size=cfg.batch, replace=cfg.batch > len(x))
        with Tape() as tape:
            loss = tn.cross_entropy(classifier_logits(params, x[pick]), y[pick])
        grads = tape.gradient(loss, [params[n] for n in names])
        adam_step(params, dict(zip(names, grads)), opt)
    clf = Classifier(params, dataset.n_classes)
    test = dataset.test()
    if len(test):
        clf.test_accuracy = recognition_accuracy(clf, test.coords(), test.labels()).overall
    return clf


@dataclass
class RecognitionReport:
    per_class: dict[int, float]
    mean: float
    overall: float


def recognition_accuracy(clf: Classifier, x, labels) -> RecognitionReport:
    """Fraction of sequences classified as their conditioning label.

    ``mean`` averages the per-class accuracies; ``overall`` pools all
    sequences.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise ContractError("recognition_accuracy needs at least one sequence")
    if np.any((labels < 0) | (labels >= clf.n_classes)):
        raise ContractError(f"labels outside the classifier's {clf.n_classes} classes")
    x = np.asarray(x, dtype=np.float64)
    if len(x) != labels.size:
        raise ShapeError(f"{len(x)} sequences for {labels.size} labels")
    pred = np.argmax(classifier_logits(clf.params, x).data, axis=-1)
    hit = pred == labels
    per_class = {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}
    return RecognitionReport(per_class, float(np.mean(list(per_class.values()))), float(hit.mean()))


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


@dataclass
class MixingSweep:
    y1: int
    y2: int
    lambdas: list[float]
    p_y1: list[float]

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.lambdas, self.p_y1))

    def spearman(self) -> float:
        if len(set(self.p_y1)) < 2 or len(set(self.lambdas)) < 2:
            return 0.0
        return float(spearmanr(self.lambdas, self.p_y1).statistic)


def mixing_sweep(gen_params: Params, cfg: GenConfig, intra: np.ndarray, y1: int, y2: int, lambdas,
                 n_per_lambda: int, clf: Classifier, rng: np.random.Generator) -> MixingSweep:
    """Mean classifier probability of ``y1`` for sequences generated at each mixing weight."""
    if y1 == y2:
        raise ContractError("mixing needs two distinct labels")
    if n_per_lambda < 1:
        raise ConfigError("n_per_lambda must be positive")
    lambdas = [float(v) for v in lambdas]
    p = []
    for lam in lambdas:
        w = np.tile(mix_labels(y1, y2, lam, cfg.n_classes), (n_per_lambda, 1))
        x = generator_forward(gen_params, cfg, intra, w, sample_noise(cfg, rng, n_per_lambda)).data
        p.append(float(predict_proba(clf, x)[:, y1].mean()))
    return MixingSweep(y1, y2, lambdas, p)
