"""Dual discriminators, adversarial losses and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, ShapeError, TrainingDivergence
from .generator import GenConfig, generator_forward, init_generator, label_weights, sample_noise
from .numcore import (AdamState, Params, Tape, Tensor, adam_step, frozen, gru_sequence, init_gru,
                      init_linear, linear, make_rng, uniform_init)
from .numcore import ops as tn
from .skeleton import Dataset, SkeletonTopology, build_intra_adjacency, center_on_root

LOG_HEADER = "step\tloss_G\tloss_DV\tloss_DF\tobjective"


@dataclass
class TrainConfig:
    batch: int = 100
    steps: int = 1000
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    k_frame: int = 20
    seed: int = 0
    checkpoint_every: int = 0
    disc_hidden: int = 64
    disc_embed: int = 16
    center: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.steps < 0 or self.k_frame < 1 or self.lr <= 0:
            raise ConfigError("batch and k_frame must be positive, steps non-negative, lr > 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------


def init_video_disc(rng: np.random.Generator, n_feat: int, n_classes: int, embed: int = 16,
                    hidden: int = 64, prefix: str = "dv") -> Params:
    params: Params = {f"{prefix}.embed": uniform_init(rng, (n_classes, embed), n_classes)}
    params.update(init_gru(rng, n_feat + embed, hidden, f"{prefix}.rnn"))
    params.update(init_linear(rng, hidden, hidden, f"{prefix}.fc"))
    params.update(init_linear(rng, hidden, 1, f"{prefix}.out"))
    return params


def init_frame_disc(rng: np.random.Generator, n_feat: int, n_classes: int, embed: int = 16,
                    hidden: int = 64, prefix: str = "df") -> Params:
    params: Params = {f"{prefix}.embed": uniform_init(rng, (n_classes, embed), n_classes)}
    params.update(init_linear(rng, n_feat + embed, hidden, f"{prefix}.fc1"))
    params.update(init_linear(rng, hidden, hidden, f"{prefix}.fc2"))
    params.update(init_linear(rng, hidden, 1, f"{prefix}.out"))
    return params


def _flat_frames(x) -> Tensor:
    x = tn.as_tensor(x)
    if x.ndim == 3:
        x = tn.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"expected (B, T, N, D) sequences, got {x.shape}")
    b, t = x.shape[:2]
    return tn.reshape(x, (b, t, -1))


def _label_frames(params: Params, prefix: str, labels, n_frames: int, batch: int) -> Tensor:
    n_classes = params[f"{prefix}.embed"].shape[0]
    w = label_weights(labels, n_classes)
    if w.shape[0] != batch:
        raise ShapeError(f"{w.shape[0]} labels for {batch} sequences")
    emb = tn.matmul(Tensor(w), params[f"{prefix}.embed"])
    return tn.matmul(Tensor(np.ones((n_frames, 1))), tn.reshape(emb, (batch, 1, -1)))


def disc_video(params: Params, x, labels, prefix: str = "dv") -> Tensor:
    """Sequence-level logits ``(B,)``: GRU over frames, MLP on the time-averaged state."""
    frames = _flat_frames(x)
    b, t = frames.shape[:2]
    expect = params[f"{prefix}.rnn.w_x"].shape[0] - params[f"{prefix}.embed"].shape[1]
    if frames.shape[2] != expect:
        raise ShapeError(f"disc_video expects {expect} features per frame, got {frames.shape[2]}")
    inp = tn.concat([frames, _label_frames(params, prefix, labels, t, b)], axis=-1)
    h = tn.mean(gru_sequence(inp, params, f"{prefix}.rnn"), axis=1)
    h = tn.relu(linear(params, f"{prefix}.fc", h))
    return tn.reshape(linear(params, f"{prefix}.out", h), (b,))


def select_frames(rng: np.random.Generator, batch: int, n_frames: int, k: int) -> np.ndarray:
    """``k`` distinct frame indices per sequence, uniformly at random."""
    if k > n_frames:
        raise ConfigError(f"k_frame={k} exceeds sequence length {n_frames}")
    if k < 1:
        raise ConfigError("k_frame must be positive")
    return np.argsort(rng.random((batch, n_frames)), axis=1)[:, :k]


def disc_frame(params: Params, x, labels, frame_idx: np.ndarray, prefix: str = "df") -> Tensor:
    """Mean per-frame logit over the frames listed in ``frame_idx`` ``(B, k)``."""
    frames = _flat_frames(x)
    b, t = frames.shape[:2]
    frame_idx = np.asarray(frame_idx)
    if frame_idx.ndim != 2 or frame_idx.shape[0] != b:
        raise ShapeError(f"frame_idx must be (B, k) with B={b}, got {frame_idx.shape}")
    if np.any((frame_idx < 0) | (frame_idx >= t)):
        raise ShapeError("frame index out of range")
    picked = frames[np.arange(b)[:, None], frame_idx]  # (B, k, F)
    inp = tn.concat([picked, _label_frames(params, prefix, labels, frame_idx.shape[1], b)], axis=-1)
    h = tn.relu(linear(params, f"{prefix}.fc1", inp))
    h = tn.relu(linear(params, f"{prefix}.fc2", h))
    logits = tn.reshape(linear(params, f"{prefix}.out", h), frame_idx.shape)
    return tn.mean(logits, axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def disc_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """BCE(real -> 1) + BCE(fake -> 0), each averaged over the batch."""
    return tn.bce_with_logits(real_logits, 1.0) + tn.bce_with_logits(fake_logits, 0.0)


def gen_loss(fake_v: Tensor, fake_f: Tensor) -> Tensor:
    """Non-saturating generator loss summed over both discriminators."""
    return tn.bce_with_logits(fake_v, 1.0) + tn.bce_with_logits(fake_f, 1.0)


@dataclass
class Models:
    gen: Params
    dv: Params
    df: Params
    gen_cfg: GenConfig
    intra: np.ndarray


def init_models(gen_cfg: GenConfig, train_cfg: TrainConfig, intra: np.ndarray,
                rng: np.random.Generator) -> Models:
    n_feat = gen_cfg.n_joints * gen_cfg.coord_dims
    gen = init_generator(gen_cfg, rng)
    dv = init_video_disc(rng, n_feat, gen_cfg.n_classes, train_cfg.disc_embed, train_cfg.disc_hidden)
    df = init_frame_disc(rng, n_feat, gen_cfg.n_classes, train_cfg.disc_embed, train_cfg.disc_hidden)
    return Models(gen, dv, df, gen_cfg, intra)


def gan_losses(models: Models, real_x: np.ndarray, real_labels, k_frame: int,
               rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """``(loss_G, loss_DV, loss_DF)`` on one real batch and one fresh fake batch.

    Fake labels are drawn uniformly over classes. All three losses share
    the same fake batch; run under a :class:`Tape` to differentiate.
    """
    cfg = models.gen_cfg
    b, t = real_x.shape[:2]
    fake_labels = rng.integers(0, cfg.n_classes, size=b)
    z = sample_noise(cfg, rng, b)
    fake = generator_forward(models.gen, cfg, models.intra, fake_labels, z)
    idx_real = select_frames(rng, b, t, k_frame)
    idx_fake = select_frames(rng, b, t, k_frame)
    fake_v = disc_video(models.dv, fake, fake_labels)
    fake_f = disc_frame(models.df, fake, fake_labels, idx_fake)
    loss_dv = disc_loss(disc_video(models.dv, real_x, real_labels), fake_v)
    loss_df = disc_loss(disc_frame(models.df, real_x, real_labels, idx_real), fake_f)
    return gen_loss(fake_v, fake_f), loss_dv, loss_df


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    models: Models
    log_lines: list[str]
    timings_ms: list[float]


def _check_finite(step: int, name: str, loss: Tensor) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergence(f"step {step}: non-finite {name} loss ({value})")
    return value


def _grads(tape: Tape, loss: Tensor, params: Params) -> dict[str, np.ndarray]:
    names = list(params)
    return dict(zip(names, tape.gradient(loss, [params[n] for n in names])))


def checkpoint_meta(models: Models, train_cfg: TrainConfig, step: int,
                    topology: SkeletonTopology | None = None) -> dict:
    meta = {
        "kind": "sagcn-gan",
        "step": step,
        "gen_config": models.gen_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "intra": models.intra.tolist(),
    }
    if topology is not None:
        meta["topology"] = {"joints": list(topology.joint_names), "edges": [list(e) for e in topology.edges],
                            "coord_dims": topology.coord_dims}
    return meta


def all_params(models: Models) -> Params:
    return {**models.gen, **models.dv, **models.df}


def train(dataset: Dataset, gen_cfg: GenConfig, train_cfg: TrainConfig, out_dir=None,
          on_step: Callable[[int, str], None] | None = None) -> TrainResult:
    """Alternating D_V, D_F and G Adam updates on the training split.

    Returns the trained models and the metrics log lines (header first).
    With ``out_dir`` set, writes ``metrics.tsv``, ``timing.tsv`` and
    checkpoints ``ckpt_<step>.bin`` (always step 0 and the final step).
    """
    train_set = dataset.train()
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    real_all = train_set.coords()
    if real_all.shape[1] != gen_cfg.seq_len:
        raise ConfigError(f"dataset sequences have T={real_all.shape[1]}, generator T={gen_cfg.seq_len}")
    if train_cfg.k_frame > gen_cfg.seq_len:
        raise ConfigError(f"k_frame={train_cfg.k_frame} exceeds sequence length {gen_cfg.seq_len}")
    if train_cfg.center:
        real_all = center_on_root(real_all)
    labels_all = train_set.labels()

    rng = make_rng(train_cfg.seed)
    intra = build_intra_adjacency(dataset.topology)
    models = init_models(gen_cfg, train_cfg, intra, rng)
    opt_kw = dict(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2)
    opt_g = AdamState.for_params(models.gen, **opt_kw)
    opt_v = AdamState.for_params(models.dv, **opt_kw)
    opt_f = AdamState.for_params(models.df, **opt_kw)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "ckpt_0.bin", all_params(models), checkpoint_meta(models, train_cfg, 0, dataset.topology))

    lines = [LOG_HEADER]
    timings = []
    b, t = train_cfg.batch, gen_cfg.seq_len
    n_real = len(real_all)
    for step in range(1, train_cfg.steps + 1):
        t0 = time.perf_counter()
        pick = rng.choice(n_real, size=b, replace=b > n_real)
        real_x, real_y = real_all[pick], labels_all[pick]
        fake_y = rng.integers(0, gen_cfg.n_classes, size=b)
        z = sample_noise(gen_cfg, rng, b)

        # the generator graph is kept open and reused for the G update,
        # G parameters do not change during the D updates
        with Tape() as g_tape:
            fake = generator_forward(models.gen, gen_cfg, intra, fake_y, z)
        fake_const = fake.detach()

        # real and fake go through each discriminator as one stacked batch
        both_x = np.concatenate([real_x, fake_const.data])
        both_y = np.concatenate([real_y, fake_y])
        with Tape() as tape:
            logits = disc_video(models.dv, both_x, both_y)
            loss_dv = disc_loss(logits[:b], logits[b:])
        lv = _check_finite(step, "D_V", loss_dv)
        adam_step(models.dv, _grads(tape, loss_dv, models.dv), opt_v)

        with Tape() as tape:
            logits = disc_frame(models.df, both_x, both_y, select_frames(rng, 2 * b, t, train_cfg.k_frame))
            loss_df = disc_loss(logits[:b], logits[b:])
        lf = _check_finite(step, "D_F", loss_df)
        adam_step(models.df, _grads(tape, loss_df, models.df), opt_f)

        with g_tape, frozen(models.dv), frozen(models.df):
            loss_g = gen_loss(disc_video(models.dv, fake, fake_y),
                              disc_frame(models.df, fake, fake_y, select_frames(rng, b, t, train_cfg.k_frame)))
        lg = _check_finite(step, "G", loss_g)
        adam_step(models.gen, _grads(g_tape, loss_g, models.gen), opt_g)

        line = f"{step}\t{lg!r}\t{lv!r}\t{lf!r}\t{-(lv + lf)!r}"
        lines.append(line)
        timings.append((time.perf_counter() - t0) * 1000.0)
        if on_step is not None:
            on_step(step, line)
        if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{step}.bin", all_params(models), checkpoint_meta(models, train_cfg, step, dataset.topology))

    if out is not None:
        final = train_cfg.steps
        save_checkpoint(out / "ckpt_final.bin", all_params(models), checkpoint_meta(models, train_cfg, final, dataset.topology))
        (out / "metrics.tsv").write_text("\n".join(lines) + "\n")
        (out / "timing.tsv").write_text("step\tms\n" + "".join(f"{i + 1}\t{ms:.3f}\n" for i, ms in enumerate(timings)))
    return TrainResult(models, lines, timings)


def topology_from_meta(meta: dict) -> SkeletonTopology:
    doc = meta["topology"]
    return SkeletonTopology(tuple(doc["joints"]), tuple(tuple(e) for e in doc["edges"]), int(doc["coord_dims"]))


def models_from_checkpoint(params: Params, meta: dict) -> tuple[Models, TrainConfig]:
    gen_cfg = GenConfig.from_dict(meta["gen_config"])
    train_cfg = TrainConfig(**meta["train_config"])
    intra = np.asarray(meta["intra"], dtype=np.float64)

    def part(prefix):
        return {k: v for k, v in params.items() if k.startswith(prefix + ".")}

    return Models(part("g"), part("dv"), part("df"), gen_cfg, intra), train_cfg
