import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_mismatch
from sagcn.checkpoint import load_checkpoint
from sagcn.errors import ConfigError, ShapeError, TrainingDivergence
from sagcn.gan import (LOG_HEADER, TrainConfig, disc_frame, disc_loss, disc_video, gan_losses, gen_loss,
                       init_frame_disc, init_models, init_video_disc, models_from_checkpoint, select_frames,
                       topology_from_meta, train)
from sagcn.generator import GenConfig
from sagcn.numcore import AdamState, Tape, Tensor, adam_step, frozen, make_rng
from sagcn.skeleton import SynthConfig, build_intra_adjacency, chain_topology, synth_dataset

TWO_LN2 = 2 * math.log(2)


def small_gen(**kw):
    base = dict(n_classes=3, n_joints=5, seq_len=6, noise_dim=4, embed_dim=3, hidden=8,
                gc_widths=(4, 5, 5, 6, 6), top_k=2)
    base.update(kw)
    return GenConfig(**base)


def small_train(**kw):
    base = dict(batch=4, steps=3, k_frame=3, disc_hidden=6, disc_embed=3)
    base.update(kw)
    return TrainConfig(**base)


def zeroed(params):
    return {k: Tensor(np.zeros_like(v.data), requires_grad=True) for k, v in params.items()}


@pytest.fixture
def tiny_data():
    return synth_dataset(SynthConfig(seq_len=6, train_per_class=4, test_per_class=2), make_rng(0))


class TestDiscriminators:
    def test_zero_params_logit_zero(self, rng):
        x = rng.standard_normal((3, 6, 5, 2))
        assert np.all(disc_video(zeroed(init_video_disc(rng, 10, 3)), x, [0, 1, 2]).data == 0.0)
        idx = select_frames(rng, 3, 6, 4)
        assert np.all(disc_frame(zeroed(init_frame_disc(rng, 10, 3)), x, [0, 1, 2], idx).data == 0.0)

    def test_video_deterministic(self, rng):
        params = init_video_disc(rng, 10, 3)
        x = rng.standard_normal((2, 6, 5, 2))
        np.testing.assert_array_equal(disc_video(params, x, [0, 2]).data, disc_video(params, x, [0, 2]).data)

    def test_video_order_sensitive(self, rng):
        params = init_video_disc(rng, 10, 3)
        x = rng.standard_normal((1, 6, 5, 2))
        a = disc_video(params, x, [1]).data
        b = disc_video(params, x[:, ::-1], [1]).data
        assert np.abs(a - b).max() > 0

    def test_video_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            disc_video(init_video_disc(rng, 10, 3), np.zeros((1, 6, 4, 2)), [0])

    def test_frame_all_frames_deterministic(self, rng):
        params = init_frame_disc(rng, 10, 3)
        x = rng.standard_normal((2, 6, 5, 2))
        a = disc_frame(params, x, [0, 1], select_frames(make_rng(1), 2, 6, 6)).data
        b = disc_frame(params, x, [0, 1], select_frames(make_rng(2), 2, 6, 6)).data
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_frame_constant_sequence(self, rng):
        params = init_frame_disc(rng, 10, 3)
        x = np.broadcast_to(rng.standard_normal((1, 1, 5, 2)), (1, 6, 5, 2))
        vals = [float(disc_frame(params, x, [2], select_frames(make_rng(s), 1, 6, 3)).data[0]) for s in range(5)]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-14)

    def test_select_frames_distinct_in_range(self):
        idx = select_frames(make_rng(0), 1000, 50, 20)
        assert idx.shape == (1000, 20)
        assert idx.min() >= 0 and idx.max() < 50
        assert all(len(set(row)) == 20 for row in idx.tolist())

    def test_select_frames_uniform(self):
        idx = select_frames(make_rng(1), 4000, 10, 3)
        counts = np.bincount(idx.ravel(), minlength=10)
        # each frame is picked with probability 0.3
        assert np.all(np.abs(counts / 4000 - 0.3) < 0.03)

    def test_k_frame_too_large(self, rng):
        with pytest.raises(ConfigError):
            select_frames(rng, 2, 5, 6)


class TestLosses:
    def test_closed_form_symmetric_point(self, rng, intra5, tiny_data):
        models = init_models(small_gen(), small_train(), intra5, rng)
        models.dv = zeroed(models.dv)
        models.df = zeroed(models.df)
        x = tiny_data.coords()[:4]
        lg, lv, lf = gan_losses(models, x, tiny_data.labels()[:4], 3, rng)
        for val in (lg, lv, lf):
            assert abs(float(val.data) - TWO_LN2) < 1e-12

    def test_perfect_discriminator(self):
        real, fake = Tensor(np.full(4, 30.0)), Tensor(np.full(4, -30.0))
        assert float(disc_loss(real, fake).data) < 1e-12

    def test_generator_gradient_near_equilibrium(self, intra5, tiny_data):
        models = init_models(small_gen(), small_train(), intra5, make_rng(2))
        # shrink the output layers so both discriminators sit at D ~ 0.5
        for p in (models.dv, models.df):
            name = "dv.out" if "dv.out.w" in p else "df.out"
            p[f"{name}.w"].data *= 1e-3
            p[f"{name}.b"].data[:] = 0.0
        x, y = tiny_data.coords()[:4], tiny_data.labels()[:4]

        def loss():
            return gan_losses(models, x, y, 3, make_rng(4))[0]

        assert abs(float(loss().data) - TWO_LN2) < 1e-2
        with Tape() as tape:
            lg = loss()
        (g_head,) = tape.gradient(lg, [models.gen["g.head.w"]])
        assert np.abs(g_head).max() > 0
        assert grad_mismatch(loss, [models.gen["g.head.w"], models.gen["g.head.b"]]) <= 1.0

    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_non_negative(self, seed):
        rng = make_rng(seed)
        logits = [Tensor(rng.standard_normal(5) * 20) for _ in range(4)]
        assert float(disc_loss(logits[0], logits[1]).data) >= 0
        assert float(gen_loss(logits[2], logits[3]).data) >= 0

    def test_composed_gradient(self, intra5):
        rng = make_rng(3)
        models = init_models(small_gen(), small_train(), intra5, rng)
        x, y = rng.standard_normal((2, 6, 5, 2)) * 0.5, np.array([1, 0])

        def loss():
            lg, lv, lf = gan_losses(models, x, y, 3, make_rng(5))
            return lg + lv + lf

        params = [*models.gen.values(), *models.dv.values(), *models.df.values()]
        assert grad_mismatch(loss, params, max_entries=6, rng=make_rng(0)) <= 1.0


class TestTrain:
    def test_zero_steps(self, tmp_path, tiny_data):
        res = train(tiny_data, small_gen(), small_train(steps=0), tmp_path)
        assert res.log_lines == [LOG_HEADER]
        p0, _ = load_checkpoint(tmp_path / "ckpt_0.bin")
        pf, meta = load_checkpoint(tmp_path / "ckpt_final.bin")
        for k in p0:
            np.testing.assert_array_equal(p0[k].data, pf[k].data)
        assert meta["step"] == 0

    def test_same_seed_same_log(self, tmp_path, tiny_data):
        a = train(tiny_data, small_gen(), small_train(), tmp_path / "a")
        b = train(tiny_data, small_gen(), small_train(), tmp_path / "b")
        assert a.log_lines == b.log_lines
        assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
        assert (tmp_path / "a" / "ckpt_final.bin").read_bytes() == (tmp_path / "b" / "ckpt_final.bin").read_bytes()

    def test_different_seed_differs(self, tiny_data):
        a = train(tiny_data, small_gen(), small_train(seed=0))
        b = train(tiny_data, small_gen(), small_train(seed=1))
        assert a.log_lines[1:] != b.log_lines[1:]

    def test_log_format(self, tiny_data):
        res = train(tiny_data, small_gen(), small_train())
        assert len(res.log_lines) == 4
        for k, line in enumerate(res.log_lines[1:], start=1):
            step, lg, lv, lf, obj = line.split("\t")
            assert int(step) == k
            assert min(float(lg), float(lv), float(lf)) >= 0
            assert float(obj) == -(float(lv) + float(lf))

    def test_checkpoint_cadence(self, tmp_path, tiny_data):
        train(tiny_data, small_gen(), small_train(steps=4, checkpoint_every=2), tmp_path)
        names = sorted(p.name for p in tmp_path.glob("ckpt_*.bin"))
        assert names == ["ckpt_0.bin", "ckpt_2.bin", "ckpt_4.bin", "ckpt_final.bin"]
        assert (tmp_path / "timing.tsv").read_text().count("\n") == 5

    def test_models_from_checkpoint(self, tmp_path, tiny_data):
        res = train(tiny_data, small_gen(), small_train(steps=1), tmp_path)
        params, meta = load_checkpoint(tmp_path / "ckpt_final.bin")
        models, tc = models_from_checkpoint(params, meta)
        assert models.gen_cfg == small_gen() and tc == small_train(steps=1)
        assert topology_from_meta(meta) == chain_topology(5)
        for k, v in res.models.gen.items():
            np.testing.assert_array_equal(models.gen[k].data, v.data)

    def test_divergence_names_step_and_component(self, tiny_data):
        bad = tiny_data.subset(range(len(tiny_data)))
        for seq in bad.sequences:
            seq.coords[2, 0, 0] = np.nan
        with pytest.raises(TrainingDivergence, match=r"step 1: non-finite D_V"):
            train(bad, small_gen(), small_train(batch=len(bad), center=False))

    def test_k_frame_exceeds_length(self, tiny_data):
        with pytest.raises(ConfigError):
            train(tiny_data, small_gen(), small_train(k_frame=7))

    def test_sequence_length_mismatch(self, tiny_data):
        with pytest.raises(ConfigError):
            train(tiny_data, small_gen(seq_len=8), small_train())

    def test_invalid_train_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch=0)


class TestIsolation:
    def test_d_update_leaves_generator(self, intra5, tiny_data):
        models = init_models(small_gen(), small_train(), intra5, make_rng(2))
        before = {k: v.data.copy() for k, v in models.gen.items()}
        x, y = tiny_data.coords()[:4], tiny_data.labels()[:4]
        with Tape() as tape:
            _, lv, _ = gan_losses(models, x, y, 3, make_rng(0))
        grads = dict(zip(models.dv, tape.gradient(lv, list(models.dv.values()))))
        adam_step(models.dv, grads, AdamState.for_params(models.dv))
        for k, v in models.gen.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_g_update_leaves_discriminators(self, intra5, tiny_data):
        models = init_models(small_gen(), small_train(), intra5, make_rng(2))
        before = {k: v.data.copy() for k, v in {**models.dv, **models.df}.items()}
        x, y = tiny_data.coords()[:4], tiny_data.labels()[:4]
        with frozen(models.dv), frozen(models.df), Tape() as tape:
            lg, _, _ = gan_losses(models, x, y, 3, make_rng(0))
        grads = dict(zip(models.gen, tape.gradient(lg, list(models.gen.values()))))
        adam_step(models.gen, grads, AdamState.for_params(models.gen))
        for k, v in {**models.dv, **models.df}.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_intra_matches_topology(self, intra5):
        np.testing.assert_array_equal(intra5, build_intra_adjacency(chain_topology(5)))
