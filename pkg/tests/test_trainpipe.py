"""Training pipeline: config validation, checkpoints, determinism, firewall."""

import numpy as np
import pytest

from fsdetr import rng as rngmod, synthworld, trainpipe
from fsdetr.errors import ConfigError, ContaminationError, NumericAbort
from fsdetr.model import FSDetr, ModelConfig
from fsdetr.synthworld import DEFAULT_BASE_CLASSES, DEFAULT_NOVEL_CLASSES
from fsdetr.trainpipe import (
    Checkpoint,
    TrainConfig,
    build_model,
    fit,
    load_checkpoint,
    pretrain_step,
    save_checkpoint,
    snapshot,
    train_step,
)

SPLIT = {"base": list(DEFAULT_BASE_CLASSES), "novel": list(DEFAULT_NOVEL_CLASSES)}


def tiny_model(seed=0, **kw):
    cfg = dict(d=32, n_heads=4, n_enc_layers=1, n_dec_layers=1, n_queries=8,
               bank_size=8, ffn_dim=32, head_hidden=16)
    cfg.update(kw)
    return FSDetr.init(ModelConfig(**cfg), seed)


def tiny_cfg(**kw):
    base = dict(seed=0, lr=0.01, epochs=1, lr_decay_epoch=0, batch_size=2,
                episodes_per_epoch=4, pretrain_steps=2, pretrain_interleave_period=2,
                m_max=2, k_max=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def world():
    train = synthworld.generate_dataset(lambda i: rngmod.stream(50, "t", i), 50,
                                        DEFAULT_BASE_CLASSES)
    pre = synthworld.generate_dataset(lambda i: rngmod.stream(50, "p", i), 20, range(36))
    return {"train": train, "pretrain": pre}


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    @pytest.mark.parametrize("kw", [
        dict(lr=0.0), dict(momentum=1.0), dict(epochs=-1),
        dict(epochs=5, lr_decay_epoch=5), dict(batch_size=0),
        dict(pretrain_interleave_period=0), dict(m_min=0),
        dict(k_min=3, k_max=2), dict(optimizer="rmsprop"), dict(clip_norm=-1.0),
    ])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestSteps:
    def test_pretrain_step_loss_finite_positive(self, world):
        det = tiny_model()
        cfg = tiny_cfg()
        loss = pretrain_step(det, world["pretrain"].scenes[0], rngmod.stream(0, "s"),
                             cfg, opt_state={})
        assert np.isfinite(loss) and loss > 0

    def test_pretrain_single_proposal(self, world):
        det = tiny_model()
        cfg = tiny_cfg(pretrain_proposals=1)
        loss = pretrain_step(det, world["pretrain"].scenes[1], rngmod.stream(0, "s1"),
                             cfg, opt_state={})
        assert np.isfinite(loss)

    def test_train_step_updates_params(self, world):
        det = tiny_model()
        cfg = tiny_cfg()
        ep = synthworld.sample_episode(world["train"], m=2, k=1, rng=rngmod.stream(1, "e"))
        before = det.params["bank/emb"].data.copy()
        train_step(det, ep, rngmod.stream(1, "r"), cfg, opt_state={}, split=SPLIT)
        assert not np.array_equal(before, det.params["bank/emb"].data)

    def test_every_group_receives_gradient(self, world):
        det = tiny_model()
        cfg = tiny_cfg()
        ep = synthworld.sample_episode(world["train"], m=2, k=1, rng=rngmod.stream(2, "e"),
                                       include_absent=False)
        det.zero_grad()
        trainpipe.episode_loss(det, ep, rngmod.stream(2, "r"), cfg)
        norms = {}
        for name, g in det.grads().items():
            group = name.split("/")[0]
            norms[group] = norms.get(group, 0.0) + float(np.sum(g.astype(np.float64) ** 2))
        for group in ("backbone", "bank", "queries", "pool", "featnorm",
                      "enc0", "dec0", "head_cls", "head_box"):
            assert norms.get(group, 0.0) > 0, f"no gradient reached {group}"

    def test_contamination_hard_fail(self, world):
        det = tiny_model()
        cfg = tiny_cfg()
        ep = synthworld.sample_episode(world["train"], m=1, k=1, rng=rngmod.stream(3, "e"))
        ep.class_ids[0] = DEFAULT_NOVEL_CLASSES[0]
        with pytest.raises(ContaminationError):
            train_step(det, ep, rngmod.stream(3, "r"), cfg, opt_state={}, split=SPLIT)

    def test_same_seed_same_loss(self, world):
        losses = []
        for _ in range(2):
            det = tiny_model(seed=4)
            ep = synthworld.sample_episode(world["train"], m=2, k=2, rng=rngmod.stream(4, "e"))
            loss = train_step(det, ep, rngmod.stream(4, "r"), tiny_cfg(), opt_state={}, split=SPLIT)
            losses.append(loss)
        assert losses[0] == losses[1]

    def test_numeric_abort_on_divergence(self, world):
        det = tiny_model()
        cfg = tiny_cfg(lr=1e9, clip_norm=0.0, backbone_lr_scale=1.0)
        state = {}
        with pytest.raises(NumericAbort):
            for i in range(30):
                ep = synthworld.sample_episode(world["train"], m=1, k=1, rng=rngmod.stream(5, i))
                train_step(det, ep, rngmod.stream(6, i), cfg, opt_state=state, split=SPLIT)


class TestFit:
    def test_zero_work_returns_initial_params(self, world):
        det = tiny_model(seed=7)
        before = {k: p.data.copy() for k, p in det.params.items()}
        ck = fit(det, world, tiny_cfg(epochs=0, pretrain_steps=0), SPLIT)
        for k, arr in before.items():
            assert np.array_equal(arr.astype(np.float32), ck.params[k])
        assert ck.epoch == 0 and ck.step == 0

    def test_bit_reproducible(self, world, tmp_path):
        outs = []
        for run in range(2):
            det = tiny_model(seed=8)
            out = tmp_path / f"run{run}"
            fit(det, world, tiny_cfg(seed=8), SPLIT, out_dir=out)
            outs.append((out / "checkpoint.fsdt").read_bytes())
        assert outs[0] == outs[1]

    def test_lr_decay_schedule(self, world):
        det = tiny_model(seed=9)
        cfg = tiny_cfg(epochs=3, lr_decay_epoch=2, pretrain_steps=0, episodes_per_epoch=2,
                       batch_size=1, m_max=1, k_max=1)
        ck = fit(det, world, cfg, SPLIT)
        lrs = [rec["lr"] for rec in ck.metrics if rec["phase"] == "train"]
        assert lrs[0] == lrs[1] == cfg.lr
        assert abs(lrs[2] - cfg.lr * 0.1) < 1e-12

    def test_resume_is_step_exact(self, world, tmp_path):
        cfg_full = tiny_cfg(seed=10, epochs=2)
        det_a = tiny_model(seed=10)
        ck_a = fit(det_a, world, cfg_full, SPLIT, out_dir=tmp_path / "full")

        cfg_half = tiny_cfg(seed=10, epochs=1)
        det_b = tiny_model(seed=10)
        ck_half = fit(det_b, world, cfg_half, SPLIT, out_dir=tmp_path / "half")
        loaded = load_checkpoint(tmp_path / "half" / "checkpoint.fsdt")
        det_c = build_model(loaded)
        ck_b = fit(det_c, world, cfg_full, SPLIT, resume=loaded, out_dir=tmp_path / "resumed")

        for name, arr in ck_a.params.items():
            assert np.array_equal(arr, ck_b.params[name]), f"param {name} diverged after resume"
        for name, arr in ck_a.opt_state.items():
            assert np.array_equal(arr, ck_b.opt_state[name]), f"velocity {name} diverged"

    def test_metrics_log_format(self, world, tmp_path):
        import json
        det = tiny_model(seed=11)
        fit(det, world, tiny_cfg(seed=11), SPLIT, out_dir=tmp_path / "m")
        lines = (tmp_path / "m" / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) >= 2  # pretrain record + 1 epoch
        for line in lines:
            rec = json.loads(line)
            assert {"phase", "epoch", "loss", "lr", "seconds"} <= set(rec.keys())

    @pytest.mark.slow
    def test_pretrain_200_steps_reduces_smoothed_loss(self, world):
        det = tiny_model(seed=12, d=64, bank_size=16)
        cfg = TrainConfig(seed=12, optimizer="adamw", lr=1e-3, clip_norm=1.0,
                          epochs=0, pretrain_steps=200)
        losses = []
        state = {}
        for s in range(cfg.pretrain_steps):
            pick = rngmod.stream(cfg.seed, "pretrain-pick", s)
            scene = world["pretrain"].scenes[int(pick.integers(len(world["pretrain"].scenes)))]
            losses.append(pretrain_step(det, scene, rngmod.stream(cfg.seed, "pretrain", s),
                                        cfg, state))
        first = np.mean(losses[:30])
        last = np.mean(losses[-30:])
        assert last < 0.7 * first, f"smoothed pretrain loss {first:.3f} -> {last:.3f}"


class TestCheckpointFormat:
    def reference(self, tmp_path):
        det = tiny_model(seed=13)
        cfg = tiny_cfg(seed=13)
        ck = snapshot(det, cfg, {"queries": np.ones((8, 32), np.float32)}, SPLIT,
                      epoch=3, pretrain_done=2, step=14, metrics=[{"phase": "train", "epoch": 0}])
        path = tmp_path / "ck.fsdt"
        save_checkpoint(path, ck)
        return ck, path

    def test_magic_and_version(self, tmp_path):
        _, path = self.reference(tmp_path)
        blob = path.read_bytes()
        assert blob[:4] == b"FSDT"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_roundtrip_bit_exact(self, tmp_path):
        ck, path = self.reference(tmp_path)
        loaded = load_checkpoint(path)
        assert set(loaded.params) == set(ck.params)
        for name, arr in ck.params.items():
            assert np.array_equal(arr, loaded.params[name])
            assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.opt_state["queries"], ck.opt_state["queries"])
        assert loaded.epoch == 3 and loaded.pretrain_done == 2 and loaded.step == 14
        assert loaded.split == ck.split
        assert loaded.model_config == ck.model_config
        assert loaded.train_config == ck.train_config

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.fsdt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(IOError):
            load_checkpoint(path)

    def test_build_model_runs(self, tmp_path, world):
        ck, path = self.reference(tmp_path)
        det = build_model(load_checkpoint(path))
        ep = synthworld.sample_episode(world["train"], m=1, k=1, rng=rngmod.stream(14, "e"))
        from fsdetr.prompts import assign_pseudo_classes
        a = assign_pseudo_classes(1, det.bank, rngmod.stream(14, "a"))
        ps = det.encode_prompts(ep.templates, a, training=False)
        out = det.forward(ep.scene.image, ps)
        assert out.probs.shape == (8, 2)
