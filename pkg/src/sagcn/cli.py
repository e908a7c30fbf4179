"""Command-line entry point: ``sagcn train|generate|eval|mix|render|synth``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime or
numeric failure. Messages go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .eval import ClassifierConfig, mixing_sweep, mmd_report, recognition_accuracy, train_classifier
from .gan import TrainConfig, models_from_checkpoint, topology_from_meta, train
from .generator import GenConfig, generate_batch
from .numcore import make_rng
from .skeleton import (ActionSequence, SynthConfig, load_sequences, load_topology, read_sasq_header,
                       render_sequence, save_sequences, synth_dataset)

# flag name -> (type, default, help) for the training run
MODEL_FLAGS = {
    "seed": (int, 0, "random seed"),
    "steps": (int, 1000, "training iterations"),
    "seq-len": (int, 50, "frames per sequence"),
    "top-k": (int, 5, "past frames kept per frame after pruning"),
    "batch": (int, 100, "sequences per batch"),
    "lr": (float, 0.0002, "Adam learning rate"),
    "k-frame": (int, 20, "frames sampled by the frame discriminator"),
}


class UsageError(Exception):
    """Bad flags or unreadable inputs; maps to exit code 1."""


@dataclass
class RunConfig:
    """Merged settings of a train run: defaults < config file < flags."""

    data: Path
    topology: str
    out: Path
    seed: int = 0
    steps: int = 1000
    seq_len: int = 50
    top_k: int = 5
    batch: int = 100
    lr: float = 0.0002
    k_frame: int = 20
    checkpoint_every: int = 0

    def gen_config(self, n_classes: int, n_joints: int, coord_dims: int) -> GenConfig:
        return GenConfig(n_classes, n_joints, coord_dims, seq_len=self.seq_len, top_k=self.top_k)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch=self.batch, steps=self.steps, lr=self.lr, k_frame=self.k_frame,
                           seed=self.seed, checkpoint_every=self.checkpoint_every)


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{no}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def _merged(args, name: str, kind, default):
    """Explicit flag, else config-file value, else the default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    file_cfg = getattr(args, "_file_cfg", {})
    if name in file_cfg:
        try:
            return kind(file_cfg[name])
        except ValueError:
            raise UsageError(f"--config: {name}={file_cfg[name]!r} is not a valid {kind.__name__}") from None
    return default


def _require_file(args, flag: str) -> Path:
    value = _merged(args, flag, str, None)
    if value is None:
        raise UsageError(f"--{flag} is required")
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"--{flag}: no such file {path}")
    return path


def _topology(args):
    name = _merged(args, "topology", str, None)
    if name is None:
        raise UsageError("--topology is required (a preset name or a JSON file)")
    try:
        return load_topology(name)
    except FileNotFoundError:
        raise UsageError(f"--topology: no such file or preset {name!r}") from None


def _load(args, flag: str, topo):
    path = _require_file(args, flag)
    try:
        return load_sequences(path, topo)
    except FormatError as exc:
        raise UsageError(f"--{flag}: {exc}") from None


def _load_models(args):
    # a missing file is a usage error; a corrupt or mismatched one is a runtime failure
    params, meta = load_checkpoint(_require_file(args, "checkpoint"))
    models, train_cfg = models_from_checkpoint(params, meta)
    return models, topology_from_meta(meta), train_cfg


def run_config(args) -> RunConfig:
    vals = {n: _merged(args, n, k, d) for n, (k, d, _) in MODEL_FLAGS.items()}
    out = _merged(args, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    return RunConfig(
        data=_require_file(args, "data"),
        topology=_merged(args, "topology", str, None),
        out=Path(out),
        checkpoint_every=_merged(args, "checkpoint-every", int, 0),
        **{n.replace("-", "_"): v for n, v in vals.items()},
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = run_config(args)
    topo = _topology(args)
    data = _load(args, "data", topo)
    if len(data) == 0:
        raise UsageError(f"--data: {cfg.data} holds no sequences")
    header = read_sasq_header(cfg.data)
    if header["seq_len"] != cfg.seq_len:
        raise UsageError(f"--seq-len {cfg.seq_len} does not match the data (T={header['seq_len']})")
    gen_cfg = cfg.gen_config(data.n_classes, topo.n_joints, topo.coord_dims)
    result = train(data, gen_cfg, cfg.train_config(), out_dir=cfg.out)
    print(f"trained {cfg.steps} steps; checkpoints and metrics.tsv in {cfg.out}")
    if len(result.log_lines) > 1:
        print(result.log_lines[-1])
    return 0


def cmd_generate(args) -> int:
    models, topo, _ = _load_models(args)
    out = _merged(args, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    n = _merged(args, "n", int, 1)
    label = _merged(args, "label", int, 0)
    if n < 0:
        raise UsageError("--n must be non-negative")
    cfg = models.gen_cfg
    if not 0 <= label < cfg.n_classes:
        raise UsageError(f"--label {label} outside [0, {cfg.n_classes})")
    rng = make_rng(_merged(args, "seed", int, 0))
    coords = generate_batch(models.gen, cfg, models.intra, [label] * n, rng) if n else []
    seqs = [ActionSequence(c, label) for c in coords]
    save_sequences(out, seqs, cfg.n_classes, topo, seq_len=cfg.seq_len)
    print(f"wrote {n} sequences of label {label} to {out}")
    return 0


def cmd_eval(args) -> int:
    topo = _topology(args)
    real = _load(args, "real", topo)
    gen = _load(args, "gen", topo)
    if len(real) < 2 or len(gen) < 2:
        raise UsageError("--real and --gen need at least two sequences each")
    if _merged(args, "center", int, 0):
        real, gen = real.centered(), gen.centered()
    x_real, x_gen = real.coords(), gen.coords()
    if x_real.shape[1] != x_gen.shape[1]:
        raise UsageError(f"sequence lengths differ: --real T={x_real.shape[1]}, --gen T={x_gen.shape[1]}")
    report = mmd_report(x_real, x_gen)
    text = report.to_kv()
    clf_steps = _merged(args, "classifier-steps", int, 300)
    if clf_steps > 0 and real.n_classes >= 2:
        clf = train_classifier(real, ClassifierConfig(steps=clf_steps, seed=_merged(args, "seed", int, 0)))
        if gen.n_classes > clf.n_classes:
            raise UsageError("--gen declares more classes than --real")
        acc = recognition_accuracy(clf, x_gen, gen.labels())
        text += f"recognition_mean={acc.mean!r}\n"
        text += "".join(f"recognition_class_{c}={v!r}\n" for c, v in sorted(acc.per_class.items()))
    sys.stdout.write(text)
    out = _merged(args, "out", str, None)
    if out is not None:
        Path(out).write_text(text)
    return 0


def _parse_lambdas(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambdas: expected comma-separated numbers, got {text!r}") from None


def cmd_mix(args) -> int:
    models, topo, train_cfg = _load_models(args)
    real = _load(args, "real", topo)
    if train_cfg.center:
        # the classifier must see data in the frame the generator was trained in
        real = real.centered()
    y1, y2 = _merged(args, "y1", int, 0), _merged(args, "y2", int, 1)
    lambdas = _parse_lambdas(_merged(args, "lambdas", str, "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"))
    n = _merged(args, "n", int, 20)
    seed = _merged(args, "seed", int, 0)
    clf = train_classifier(real, ClassifierConfig(steps=_merged(args, "classifier-steps", int, 300), seed=seed))
    try:
        sweep = mixing_sweep(models.gen, models.gen_cfg, models.intra, y1, y2, lambdas, n, clf, make_rng(seed))
    except (ContractError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    text = "lambda\tp_y1\n" + "".join(f"{lam!r}\t{p!r}\n" for lam, p in sweep.rows())
    text += f"spearman={sweep.spearman()!r}\n"
    sys.stdout.write(text)
    out = _merged(args, "out", str, None)
    if out is not None:
        Path(out).write_text(text)
    return 0


def cmd_render(args) -> int:
    topo = _topology(args)
    data = _load(args, "input", topo)
    index = _merged(args, "index", int, 0)
    if not 0 <= index < len(data):
        raise UsageError(f"--index {index} outside [0, {len(data)})")
    out = _merged(args, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    paths = render_sequence(data.sequences[index], topo, out, size=_merged(args, "size", int, 256))
    print(f"wrote {len(paths)} frames to {out}")
    return 0


def cmd_synth(args) -> int:
    out = _merged(args, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    cfg = SynthConfig(seq_len=_merged(args, "seq-len", int, 16),
                      train_per_class=_merged(args, "n", int, 100), test_per_class=0)
    data = synth_dataset(cfg, make_rng(_merged(args, "seed", int, 0)))
    save_sequences(out, data.sequences, data.n_classes, data.topology)
    print(f"wrote {len(data)} synthetic sequences ({data.n_classes} classes, T={cfg.seq_len}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _flag(p, name, kind, default, help_text):
    p.add_argument(f"--{name}", type=kind, default=None, help=f"{help_text} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sagcn", description="Skeleton action generation with self-attention graph convolutions.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(p, config=True):
        if config:
            _flag(p, "config", str, None, "key=value settings file; flags override it")
        _flag(p, "seed", int, 0, "random seed")
        _flag(p, "out", str, None, "output path")

    p = sub.add_parser("train", help="train the generator and both discriminators")
    common(p)
    _flag(p, "data", str, None, "SASQ training data")
    _flag(p, "topology", str, None, "topology JSON file or preset name (chain5, h36m15)")
    for name, (kind, default, text) in MODEL_FLAGS.items():
        if name != "seed":
            _flag(p, name, kind, default, text)
    _flag(p, "checkpoint-every", int, 0, "steps between intermediate checkpoints, 0 for none")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample sequences for one label into a SASQ file")
    common(p)
    _flag(p, "checkpoint", str, None, "checkpoint file")
    _flag(p, "label", int, 0, "conditioning class")
    _flag(p, "n", int, 1, "number of sequences")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="MMD report and recognition accuracy of generated data")
    common(p)
    _flag(p, "real", str, None, "SASQ reference data")
    _flag(p, "gen", str, None, "SASQ generated data")
    _flag(p, "topology", str, None, "topology JSON file or preset name")
    _flag(p, "classifier-steps", int, 300, "recognition classifier training steps, 0 to skip")
    _flag(p, "center", int, 0, "1 to center both files on the root joint first")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix", help="classifier response to mixed-label conditioning")
    common(p)
    _flag(p, "checkpoint", str, None, "checkpoint file")
    _flag(p, "real", str, None, "SASQ data for the recognition classifier")
    _flag(p, "y1", int, 0, "first label")
    _flag(p, "y2", int, 1, "second label")
    _flag(p, "lambdas", str, "0,0.1,...,1", "comma-separated mixing weights of y1")
    _flag(p, "n", int, 20, "sequences per mixing weight")
    _flag(p, "classifier-steps", int, 300, "recognition classifier training steps")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("render", help="write one SVG per frame of a stored sequence")
    common(p)
    _flag(p, "input", str, None, "SASQ file")
    _flag(p, "topology", str, None, "topology JSON file or preset name")
    _flag(p, "index", int, 0, "sequence index in the file")
    _flag(p, "size", int, 256, "canvas size in pixels")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="write the synthetic chain dataset")
    common(p, config=False)
    _flag(p, "n", int, 100, "sequences per class")
    _flag(p, "seq-len", int, 16, "sequence length")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            args._file_cfg = read_config_file(args.config)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sagcn {args.command}: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ContractError, ShapeError, FormatError, KeyError, OSError) as exc:
        print(f"sagcn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
