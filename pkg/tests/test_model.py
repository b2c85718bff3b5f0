"""Model tests: positions, layer contracts, forward invariants, ablation knobs."""

import numpy as np
import pytest

from fsdetr import matching, ndgrad, rng as rngmod, synthworld
from fsdetr.errors import ConfigError
from fsdetr.model import FSDetr, ModelConfig, sinusoidal_positions
from fsdetr.ndgrad import Tape, Tensor, backward
from fsdetr.prompts import assign_pseudo_classes


def tiny_cfg(**kw):
    base = dict(d=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, n_queries=8,
                bank_size=8, ffn_dim=48, head_hidden=32, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def world():
    ds = synthworld.generate_dataset(lambda i: rngmod.stream(3, "w", i), 50,
                                     synthworld.DEFAULT_BASE_CLASSES)
    return ds


def make_episode(ds, m=2, k=2, seed=0, include_absent=True):
    return synthworld.sample_episode(ds, m=m, k=k, rng=rngmod.stream(seed, "ep"),
                                     include_absent=include_absent)


def run_forward(det, ds, m=2, k=2, seed=0, **fw):
    ep = make_episode(ds, m=m, k=k, seed=seed)
    r = rngmod.stream(seed, "fw")
    assignment = assign_pseudo_classes(ep.m, det.bank, r)
    ps = det.encode_prompts(ep.templates, assignment, training=False)
    return ep, ps, det.forward(ep.scene.image, ps, **fw)


class TestSinusoidalPositions:
    def test_range(self):
        enc = sinusoidal_positions(12, 12, 64)
        assert enc.shape == (144, 64)
        assert enc.min() >= -1.0 and enc.max() <= 1.0

    def test_injective_on_grid(self):
        enc = sinusoidal_positions(12, 12, 64)
        diffs = np.linalg.norm(enc[:, None, :] - enc[None, :, :], axis=-1)
        np.fill_diagonal(diffs, np.inf)
        assert diffs.min() > 1e-6

    def test_origin_first_channel_is_zero(self):
        enc = sinusoidal_positions(4, 4, 16)
        assert enc[0, 0] == 0.0  # sin(0)

    def test_d_not_divisible_by_four(self):
        with pytest.raises(ConfigError):
            sinusoidal_positions(4, 4, 18)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=30, n_heads=4).validate()

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout_p=1.0).validate()

    def test_pooling_name(self):
        with pytest.raises(ConfigError):
            ModelConfig(pooling="max").validate()


class TestEncoderLayer:
    def test_zero_weights_is_identity(self):
        det = FSDetr.init(tiny_cfg(), seed=0)
        for k, p in det.params.items():
            if k.startswith("enc0/"):
                p.data = np.zeros_like(p.data)
        z = Tensor(np.random.default_rng(0).standard_normal((9, 32)))
        xs = Tensor(np.random.default_rng(1).standard_normal((4, 32)))
        out, _ = det.encoder_layer(0, z, xs, drop=lambda t: t)
        np.testing.assert_array_equal(out.data, z.data)

    def test_no_mhca_output_independent_of_prompts(self):
        det = FSDetr.init(tiny_cfg(use_encoder_mhca=False), seed=0)
        z = Tensor(np.random.default_rng(2).standard_normal((9, 32)))
        xs_a = Tensor(np.random.default_rng(3).standard_normal((4, 32)))
        xs_b = Tensor(np.random.default_rng(4).standard_normal((6, 32)))
        out_a, attn_a = det.encoder_layer(0, z, xs_a, drop=lambda t: t)
        out_b, _ = det.encoder_layer(0, z, xs_b, drop=lambda t: t)
        assert attn_a is None
        assert np.array_equal(out_a.data, out_b.data)

    def test_mhca_attention_shape(self):
        det = FSDetr.init(tiny_cfg(), seed=0)
        z = Tensor(np.random.default_rng(5).standard_normal((9, 32)))
        xs = Tensor(np.random.default_rng(6).standard_normal((4, 32)))
        _, attn = det.encoder_layer(0, z, xs, drop=lambda t: t)
        assert attn.shape == (4, 9, 4)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)


class TestDecoderLayer:
    def test_zero_weights_is_identity(self):
        det = FSDetr.init(tiny_cfg(), seed=0)
        for k, p in det.params.items():
            if k.startswith("dec0/"):
                p.data = np.zeros_like(p.data)
        v = Tensor(np.random.default_rng(7).standard_normal((12, 32)))
        o = Tensor(np.random.default_rng(8).standard_normal((12, 32)))
        z = Tensor(np.random.default_rng(9).standard_normal((9, 32)))
        out = det.decoder_layer(0, v, o, z, mk=4, drop=lambda t: t)
        np.testing.assert_array_equal(out.data, v.data)

    def test_type_specific_mlp_boundary(self):
        # identical row content on both sides of the boundary: with TS-MLP the
        # template row transforms differently from the query row
        det_ts = FSDetr.init(tiny_cfg(use_ts_mlp=True), seed=0)
        det_sh = FSDetr.init(tiny_cfg(use_ts_mlp=False), seed=0)
        row = np.random.default_rng(10).standard_normal(32)
        v = Tensor(np.tile(row, (4, 1)))
        o = Tensor(np.zeros((4, 32)))
        z = Tensor(np.random.default_rng(11).standard_normal((9, 32)))
        out_ts = det_ts.decoder_layer(0, v, o, z, mk=2, drop=lambda t: t)
        out_sh = det_sh.decoder_layer(0, v, o, z, mk=2, drop=lambda t: t)
        assert not np.allclose(out_ts.data[1], out_ts.data[2])
        np.testing.assert_allclose(out_sh.data[1], out_sh.data[2], atol=1e-12)


class TestForward:
    def test_output_shapes_and_ranges(self, world):
        det = FSDetr.init(tiny_cfg(), seed=1)
        ep, ps, out = run_forward(det, world, m=2, k=2)
        n = det.cfg.n_queries
        assert out.probs.shape == (n, 3)
        assert out.boxes.shape == (n, 4)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-6)
        assert out.boxes.data.min() >= 0.0 and out.boxes.data.max() <= 1.0

    def test_prompt_row_permutation_invariance(self, world):
        det = FSDetr.init(tiny_cfg(), seed=2)
        ep, ps, out = run_forward(det, world, m=2, k=2, seed=5)
        rng = np.random.default_rng(0)
        perm = rng.permutation(ps.stamped.shape[0])
        from fsdetr.prompts import PromptSet
        ps_perm = PromptSet(stamped=Tensor(ps.stamped.data[perm]),
                            pseudo_ids=ps.pseudo_ids[perm],
                            class_of_row=ps.class_of_row[perm],
                            assignment=ps.assignment, m=ps.m, k=ps.k)
        out_perm = det.forward(ep.scene.image, ps_perm)
        assert np.abs(out_perm.probs.data - out.probs.data).max() < 1e-5
        assert np.abs(out_perm.boxes.data - out.boxes.data).max() < 1e-5

    def test_variable_m_k_same_weights(self, world):
        det = FSDetr.init(tiny_cfg(), seed=3)
        for m, k in ((1, 1), (2, 1), (2, 3), (3, 5)):
            ep, ps, out = run_forward(det, world, m=m, k=k, seed=10 + m * 7 + k)
            assert out.probs.shape == (det.cfg.n_queries, m + 1)

    def test_bank_gradient_flows(self, world):
        det = FSDetr.init(tiny_cfg(), seed=4)
        ep = make_episode(world, m=2, k=1, seed=20)
        r = rngmod.stream(0, "g")
        assignment = assign_pseudo_classes(ep.m, det.bank, r)
        with Tape():
            ps = det.encode_prompts(ep.templates, assignment, training=False)
            out = det.forward(ep.scene.image, ps)
            loss = matching.set_loss(out, [(c, b.to_array()) for c, b in ep.targets])
        backward(loss)
        grad = det.params["bank/emb"].grad
        assert grad is not None and np.linalg.norm(grad) > 0

    def test_attention_maps_exported(self, world):
        det = FSDetr.init(tiny_cfg(), seed=5)
        ep, ps, out = run_forward(det, world, m=2, k=1, seed=30, want_attn=True)
        assert len(out.attn_maps) == det.cfg.n_enc_layers
        s = (world.image_size // 8) ** 2
        assert out.attn_maps[-1].shape == (det.cfg.n_heads, s, 2)

    def test_no_attention_maps_without_mhca(self, world):
        det = FSDetr.init(tiny_cfg(use_encoder_mhca=False), seed=5)
        ep, ps, out = run_forward(det, world, m=2, k=1, seed=31, want_attn=True)
        assert out.attn_maps == []

    def test_m_exceeding_bank_rejected(self, world):
        det = FSDetr.init(tiny_cfg(bank_size=2), seed=6)
        ep = make_episode(world, m=3, k=1, seed=40)
        with pytest.raises(ConfigError):
            assignment = np.array([0, 1, 2])
            ps = det.encode_prompts(ep.templates, assignment, training=False)
            det.forward(ep.scene.image, ps)

    def test_dropout_needs_rng_in_training(self, world):
        det = FSDetr.init(tiny_cfg(), seed=7)
        ep, ps, _ = run_forward(det, world, m=1, k=1, seed=50)
        with pytest.raises(ConfigError):
            det.forward(ep.scene.image, ps, training=True)

    def test_inference_deterministic(self, world):
        det = FSDetr.init(tiny_cfg(), seed=8)
        ep, ps, out1 = run_forward(det, world, m=2, k=2, seed=60)
        out2 = det.forward(ep.scene.image, ps)
        assert np.array_equal(out1.probs.data, out2.probs.data)
        assert np.array_equal(out1.boxes.data, out2.boxes.data)
