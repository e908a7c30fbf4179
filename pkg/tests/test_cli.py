import hashlib
import subprocess
import sys

import numpy as np
import pytest

from sagcn.cli import MODEL_FLAGS, build_parser, main, read_config_file
from sagcn.eval import parse_kv
from sagcn.generator import generate_batch
from sagcn.gan import models_from_checkpoint
from sagcn.checkpoint import load_checkpoint
from sagcn.numcore import make_rng
from sagcn.skeleton import chain_topology, load_sequences, read_sasq_header

FAST = ["--seq-len", "4", "--batch", "4", "--k-frame", "2", "--top-k", "2"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data.sasq"), "--n", "8", "--seq-len", "4"]) == 0
    assert main(["train", "--data", str(root / "data.sasq"), "--topology", "chain5", "--out", str(root / "run"),
                 "--steps", "2", *FAST]) == 0
    return root


class TestHelp:
    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as ex:
            main(["train", "--help"])
        assert ex.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for name, (_, default, _) in MODEL_FLAGS.items():
            assert f"--{name}" in text
            assert f"(default: {default})" in text
        for flag in ("--config", "--out", "--data", "--topology"):
            assert flag in text

    def test_top_level_help(self):
        proc = subprocess.run([sys.executable, "-m", "sagcn.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("train", "generate", "eval", "mix", "render"):
            assert cmd in proc.stdout

    def test_unknown_flag_exits_1(self, capsys):
        with pytest.raises(SystemExit) as ex:
            main(["train", "--bogus"])
        assert ex.value.code == 1


class TestTrain:
    def test_zero_steps(self, workspace, tmp_path):
        rc = main(["train", "--data", str(workspace / "data.sasq"), "--topology", "chain5",
                   "--out", str(tmp_path / "r"), "--steps", "0", *FAST])
        assert rc == 0
        assert (tmp_path / "r" / "ckpt_0.bin").exists()

    def test_missing_data_names_flag(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope.sasq"), "--topology", "chain5",
                   "--out", str(tmp_path / "r")])
        assert rc == 1
        assert "--data" in capsys.readouterr().err

    def test_data_flag_required(self, tmp_path, capsys):
        assert main(["train", "--topology", "chain5", "--out", str(tmp_path / "r")]) == 1
        assert "--data" in capsys.readouterr().err

    def test_same_seed_identical_metrics(self, workspace, tmp_path):
        rc = main(["train", "--data", str(workspace / "data.sasq"), "--topology", "chain5",
                   "--out", str(tmp_path / "again"), "--steps", "2", *FAST])
        assert rc == 0
        assert (tmp_path / "again" / "metrics.tsv").read_bytes() == (workspace / "run" / "metrics.tsv").read_bytes()

    def test_config_file_and_precedence(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# desk run\ndata = {workspace / 'data.sasq'}\ntopology = chain5\n"
                       "seq_len = 4\nbatch = 4\nk-frame = 2\ntop-k = 2\nsteps = 3\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a"), "--steps", "1"]) == 0
        assert (tmp_path / "a" / "metrics.tsv").read_text().count("\n") == 2
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "metrics.tsv").read_text().count("\n") == 4

    def test_bad_config_value(self, workspace, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("steps = many\n")
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "data.sasq"),
                     "--topology", "chain5", "--out", str(tmp_path / "r")]) == 1

    def test_read_config_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("a_b = 1\n\n# note\nc = x=y\n")
        assert read_config_file(tmp_path / "c.cfg") == {"a-b": "1", "c": "x=y"}

    def test_seq_len_mismatch(self, workspace, tmp_path):
        rc = main(["train", "--data", str(workspace / "data.sasq"), "--topology", "chain5",
                   "--out", str(tmp_path / "r"), "--steps", "1", "--seq-len", "5", "--k-frame", "2"])
        assert rc == 1

    def test_k_frame_too_large_is_config_error(self, workspace, tmp_path):
        rc = main(["train", "--data", str(workspace / "data.sasq"), "--topology", "chain5",
                   "--out", str(tmp_path / "r"), "--steps", "1", "--seq-len", "4"])
        assert rc == 1


class TestGenerate:
    def test_empty_file(self, workspace, tmp_path):
        out = tmp_path / "empty.sasq"
        assert main(["generate", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"),
                     "--out", str(out), "--n", "0"]) == 0
        assert len(load_sequences(out, chain_topology(5))) == 0
        assert read_sasq_header(out)["seq_len"] == 4

    def test_five_of_label_two(self, workspace, tmp_path):
        out = tmp_path / "g.sasq"
        assert main(["generate", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"),
                     "--out", str(out), "--n", "5", "--label", "2", "--seed", "7"]) == 0
        ds = load_sequences(out, chain_topology(5))
        assert len(ds) == 5 and set(ds.labels().tolist()) == {2}

        params, meta = load_checkpoint(workspace / "run" / "ckpt_final.bin")
        models, _ = models_from_checkpoint(params, meta)
        ref = generate_batch(models.gen, models.gen_cfg, models.intra, [2] * 5, make_rng(7))
        np.testing.assert_array_equal(ds.coords(), ref.astype(np.float32).astype(np.float64))

    def test_missing_checkpoint(self, tmp_path):
        assert main(["generate", "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path / "o")]) == 1

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"SAGK\x01\x00")
        assert main(["generate", "--checkpoint", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "o")]) == 2

    def test_label_out_of_range(self, workspace, tmp_path):
        assert main(["generate", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"),
                     "--out", str(tmp_path / "o"), "--label", "3"]) == 1


class TestEval:
    def test_same_vs_same(self, tmp_path, capsys):
        data = tmp_path / "d.sasq"
        assert main(["synth", "--out", str(data), "--n", "70", "--seq-len", "4"]) == 0
        capsys.readouterr()
        report = tmp_path / "report.txt"
        assert main(["eval", "--real", str(data), "--gen", str(data), "--topology", "chain5",
                     "--classifier-steps", "0", "--out", str(report)]) == 0
        printed = parse_kv(capsys.readouterr().out)
        assert abs(float(printed["mmd_avg"])) < 0.05 and abs(float(printed["mmd_seq"])) < 0.05
        assert int(printed["n_real"]) == 210
        assert parse_kv(report.read_text()) == printed

    def test_recognition_lines(self, workspace, tmp_path, capsys):
        gen = tmp_path / "g.sasq"
        main(["generate", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"), "--out", str(gen), "--n", "3"])
        capsys.readouterr()
        assert main(["eval", "--real", str(workspace / "data.sasq"), "--gen", str(gen), "--topology", "chain5",
                     "--classifier-steps", "2"]) == 0
        kv = parse_kv(capsys.readouterr().out)
        assert "recognition_mean" in kv and "recognition_class_0" in kv

    def test_center_flag(self, tmp_path, capsys):
        data = tmp_path / "d.sasq"
        main(["synth", "--out", str(data), "--n", "10", "--seq-len", "4"])
        shifted = tmp_path / "s.sasq"
        ds = load_sequences(data, chain_topology(5))
        for seq in ds.sequences:
            seq.coords += 3.0
        from sagcn.skeleton import save_sequences
        save_sequences(shifted, ds.sequences, 3, ds.topology)
        capsys.readouterr()
        args = ["eval", "--real", str(data), "--gen", str(shifted), "--topology", "chain5", "--classifier-steps", "0"]
        main(args)
        raw = float(parse_kv(capsys.readouterr().out)["mmd_seq"])
        main(args + ["--center", "1"])
        centered = float(parse_kv(capsys.readouterr().out)["mmd_seq"])
        assert raw > 0.5 and abs(centered) < 0.05

    def test_missing_file(self, workspace, tmp_path):
        assert main(["eval", "--real", str(workspace / "data.sasq"), "--gen", str(tmp_path / "nope"),
                     "--topology", "chain5"]) == 1

    def test_length_mismatch(self, workspace, tmp_path):
        other = tmp_path / "t5.sasq"
        main(["synth", "--out", str(other), "--n", "2", "--seq-len", "5"])
        assert main(["eval", "--real", str(workspace / "data.sasq"), "--gen", str(other), "--topology", "chain5",
                     "--classifier-steps", "0"]) == 1

    def test_topology_mismatch(self, workspace, tmp_path):
        assert main(["eval", "--real", str(workspace / "data.sasq"), "--gen", str(workspace / "data.sasq"),
                     "--topology", "h36m15"]) == 1


class TestMixAndRender:
    def test_mix_table(self, workspace, capsys):
        capsys.readouterr()
        assert main(["mix", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"),
                     "--real", str(workspace / "data.sasq"), "--lambdas", "1,0.5,0", "--n", "2",
                     "--classifier-steps", "2"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "lambda\tp_y1"
        assert [float(r.split("\t")[0]) for r in lines[1:4]] == [1.0, 0.5, 0.0]
        assert lines[4].startswith("spearman=")

    def test_mix_same_labels(self, workspace):
        assert main(["mix", "--checkpoint", str(workspace / "run" / "ckpt_final.bin"),
                     "--real", str(workspace / "data.sasq"), "--y1", "1", "--y2", "1",
                     "--classifier-steps", "1"]) == 1

    def test_render(self, workspace, tmp_path):
        assert main(["render", "--input", str(workspace / "data.sasq"), "--topology", "chain5",
                     "--out", str(tmp_path / "frames"), "--index", "3"]) == 0
        assert len(list((tmp_path / "frames").glob("*.svg"))) == 4

    def test_render_bad_index(self, workspace, tmp_path):
        assert main(["render", "--input", str(workspace / "data.sasq"), "--topology", "chain5",
                     "--out", str(tmp_path / "f"), "--index", "99"]) == 1


def test_commands_do_not_touch_inputs(workspace, tmp_path):
    data, ckpt = workspace / "data.sasq", workspace / "run" / "ckpt_final.bin"
    before = (digest(data), digest(ckpt))
    main(["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path / "g.sasq"), "--n", "2"])
    main(["eval", "--real", str(data), "--gen", str(tmp_path / "g.sasq"), "--topology", "chain5",
          "--classifier-steps", "1"])
    main(["mix", "--checkpoint", str(ckpt), "--real", str(data), "--lambdas", "0,1", "--n", "1",
          "--classifier-steps", "1"])
    main(["render", "--input", str(data), "--topology", "chain5", "--out", str(tmp_path / "f")])
    main(["train", "--data", str(data), "--topology", "chain5", "--out", str(tmp_path / "t"), "--steps", "1", *FAST])
    assert (digest(data), digest(ckpt)) == before


def test_parser_builds_all_commands():
    parser = build_parser()
    for cmd in ("train", "generate", "eval", "mix", "render", "synth"):
        assert parser.parse_args([cmd]).command == cmd
