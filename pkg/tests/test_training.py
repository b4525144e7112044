"""Training harness tests: Adam oracle, schedules, checkpointing,
stage mechanics, determinism."""

import os

import numpy as np
import pytest

from dynslim.checkpoint import load_checkpoint
from dynslim.config import (LossConfig, MixtureSpec, ModelConfig,
                            RouterConfig, RunConfig, TrainConfig)
from dynslim.data import synth_corpus
from dynslim.errors import DataError
from dynslim.losses import dynslim_loss, combine_outputs
from dynslim.model import SlimDenoiser, build_model
from dynslim.router import gumbel_noise, st_select, upsample_decisions
from dynslim.tensor import Tensor, backward
from dynslim.training import (Adam, adam_update, clip_global_norm,
                              stage1_train, stage2_train, validate_dynamic,
                              validate_static, _soft_occurrence)


def tiny_run_config(**train_kw):
    train = dict(batch_size=4, max_epochs=2, val_fraction=0.25, lr=1e-3)
    train.update(train_kw)
    return RunConfig(
        model=ModelConfig(depth=2, hidden=4, gru_groups=2, resample=2,
                          dtype="float32",
                          router=RouterConfig(kernel=256, hidden=8)),
        loss=LossConfig(stft_win=128, stft_hop=64, target_utilization=0.25),
        data=MixtureSpec(segment_seconds=0.5, utterance_seconds=0.5),
        train=TrainConfig(**train),
        seed=5,
    )


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    cfg = tiny_run_config()
    root = tmp_path_factory.mktemp("corpus")
    return synth_corpus(str(root), 8, cfg.data, seed=5)


class TestAdam:
    def test_hand_executed_single_step(self):
        """f = theta^2 from theta=1, lr=0.1: m=0.2, v=0.004, bias-corrected
        update lands at 0.9 (up to the eps term)."""
        theta = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        adam_update(theta, np.array([2.0]), m, v, t=1, lr=0.1)
        assert abs(theta[0] - 0.9) < 1e-8

    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam([("p", p)])
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_nonfinite_gradient_skips_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        opt = Adam([("p", p)])
        assert opt.step(0.1) is False
        assert opt.skipped == 1
        np.testing.assert_array_equal(p.data, [1.0])
        assert opt.t == 0

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(3)
            p = Tensor(rng.standard_normal(5), requires_grad=True)
            opt = Adam([("p", p)])
            for step in range(10):
                p.grad = np.sin(p.data * (step + 1))
                opt.step(1e-2)
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestClipping:
    def test_large_gradients_scaled_to_max_norm(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 10.0)
        norm = clip_global_norm([p], 5.0)
        assert abs(norm - 20.0) < 1e-9
        assert abs(np.linalg.norm(p.grad) - 5.0) < 1e-6

    def test_small_gradients_untouched(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.full(4, 0.1)
        clip_global_norm([p], 5.0)
        np.testing.assert_array_equal(p.grad, np.full(4, 0.1))


class TestStage1:
    def test_runs_j_forwards_per_step(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config(max_epochs=1)
        model = build_model(cfg.model, seed=1)
        model.static_forwards = 0
        stage1_train(model, tiny_corpus, cfg, str(tmp_path), max_epochs=1)
        j = len(cfg.model.uset)
        # 6 train utts / batch 4 -> 1 full batch; 2 val utts -> 1 val batch
        assert model.static_forwards == j * (1 + 1)

    def test_lr_halves_after_plateau_epochs(self, tiny_corpus, tmp_path):
        """With an infinitesimal lr nothing improves after the first
        epoch, so the plateau rule fires every `plateau_epochs`."""
        cfg = tiny_run_config(lr=1e-30, max_epochs=4)
        cfg.train.plateau_epochs = 1
        model = build_model(cfg.model, seed=1)
        state = stage1_train(model, tiny_corpus, cfg, str(tmp_path),
                             max_epochs=4)
        lrs = []
        with open(tmp_path / "train_slim.log") as fh:
            for line in fh:
                fields = dict(kv.split("=", 1)
                              for kv in line.strip().split(" "))
                lrs.append(float(fields["lr"]))
        assert lrs[0] == pytest.approx(1e-30)
        assert lrs[1] == pytest.approx(5e-31)
        assert lrs[2] == pytest.approx(2.5e-31)

    def test_early_stop_on_patience(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config(lr=1e-30, max_epochs=50)
        cfg.train.patience = 2
        model = build_model(cfg.model, seed=1)
        state = stage1_train(model, tiny_corpus, cfg, str(tmp_path),
                             max_epochs=50)
        assert state.epoch == 2  # epoch 0 improves, then 2 stale epochs

    def test_checkpoint_roundtrip_validation_bit_exact(self, tiny_corpus,
                                                       tmp_path):
        cfg = tiny_run_config(max_epochs=1)
        model = build_model(cfg.model, seed=2)
        stage1_train(model, tiny_corpus, cfg, str(tmp_path), max_epochs=1)
        _, val_entries = [], None
        from dynslim.data import split_corpus
        _, val_entries = split_corpus(tiny_corpus, cfg.train.val_fraction,
                                      cfg.seed)
        before = validate_static(model, tiny_corpus, val_entries, cfg)
        config_flat, meta, arrays = load_checkpoint(
            str(tmp_path / "slim_last.ckpt"))
        clone = build_model(cfg.model, seed=99)
        clone.load_state_arrays(
            {k: v for k, v in arrays.items() if not k.startswith("adam.")})
        after = validate_static(clone, tiny_corpus, val_entries, cfg)
        assert before["loss"] == after["loss"]
        assert before["si_sdr_out"] == after["si_sdr_out"]

    def test_rejects_model_with_router(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config()
        model = build_model(cfg.model, seed=0, with_router=True)
        with pytest.raises(DataError):
            stage1_train(model, tiny_corpus, cfg, str(tmp_path))

    def test_resume_continues_epoch_numbering(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config(max_epochs=1)
        model = build_model(cfg.model, seed=2)
        stage1_train(model, tiny_corpus, cfg, str(tmp_path), max_epochs=1)
        _, meta, arrays = load_checkpoint(str(tmp_path / "slim_last.ckpt"))
        assert meta["epoch"] == 0
        state = stage1_train(model, tiny_corpus, cfg, str(tmp_path),
                             max_epochs=1, resume_from=(meta, arrays))
        assert state.epoch == 1


class TestStage2:
    def test_router_gets_nonzero_gradients(self, tiny_corpus):
        """One end-to-end step on a toy batch leaves nonzero gradients on
        every router parameter."""
        cfg = tiny_run_config()
        model = build_model(cfg.model, seed=3, with_router=True)
        dtype = np.float32
        from dynslim.data import batch_segments
        x, s = next(batch_segments(tiny_corpus, tiny_corpus.entries,
                                   cfg.data, np.random.default_rng(0), 4,
                                   model.valid_length))
        x_t = Tensor(x.astype(dtype))
        s_t = Tensor(s.astype(dtype))
        t_pad = x.shape[-1]
        scores = model.router.forward(x_t.reshape((4, 1, t_pad)))
        noise = gumbel_noise(scores.shape,
                             np.random.default_rng(1)).astype(dtype)
        onehot = st_select(scores, noise, mode="train")
        gating = upsample_decisions(onehot,
                                    model.bottleneck_frames(t_pad), t_pad)
        outs = [model.forward_static(x_t, uf) for uf in cfg.model.uset]
        est = combine_outputs(outs, gating)
        occ = _soft_occurrence(scores)
        loss = dynslim_loss(s_t, est, occ, cfg.loss, cfg.model.uset)
        model.zero_grad()
        backward(loss, params=model.parameters())
        for name, p in model.named_parameters():
            if name.startswith("router"):
                assert p.grad is not None and np.abs(p.grad).max() > 0, name

    def test_requires_router(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config()
        model = build_model(cfg.model, seed=0)
        with pytest.raises(DataError):
            stage2_train(model, tiny_corpus, cfg, str(tmp_path))

    def test_validation_noise_free_and_deterministic(self, tiny_corpus,
                                                     tmp_path):
        cfg = tiny_run_config(max_epochs=1)
        model = build_model(cfg.model, seed=4, with_router=True)
        from dynslim.data import split_corpus
        _, val_entries = split_corpus(tiny_corpus, cfg.train.val_fraction,
                                      cfg.seed)
        v1 = validate_dynamic(model, tiny_corpus, val_entries, cfg)
        v2 = validate_dynamic(model, tiny_corpus, val_entries, cfg)
        assert v1["loss"] == v2["loss"]
        assert np.array_equal(v1["occurrence"], v2["occurrence"])
        assert abs(v1["occurrence"].sum() - 1.0) < 1e-12

    def test_full_stage_logs_occurrence(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config(max_epochs=1)
        model = build_model(cfg.model, seed=4, with_router=True)
        stage2_train(model, tiny_corpus, cfg, str(tmp_path), max_epochs=1)
        log = open(tmp_path / "train_dyn.log").read()
        assert "val_occ=" in log and "train_occ=" in log
        assert os.path.isfile(tmp_path / "dyn_best.ckpt")

    def test_constant_router_validation_matches_static_quality(
            self, tiny_corpus, tmp_path):
        """Forcing the router to a constant decision makes routed
        validation SI-SDR match the static forward's."""
        cfg = tiny_run_config()
        model = build_model(cfg.model, seed=6, with_router=True)
        # bias the last pointwise conv hard toward factor index 2
        model.router.pw.weight.data[...] = 0.0
        model.router.pw.bias.data[...] = np.array([0., 0., 50., 0.],
                                                  dtype=np.float32)
        from dynslim.data import split_corpus
        _, val_entries = split_corpus(tiny_corpus, cfg.train.val_fraction,
                                      cfg.seed)
        v = validate_dynamic(model, tiny_corpus, val_entries, cfg)
        assert v["mean_utilization"] == pytest.approx(0.5)
        seg = int(cfg.data.segment_seconds * cfg.data.sample_rate)
        from dynslim import tensor as dt
        from dynslim.metrics import si_sdr
        outs = []
        for e in val_entries:
            noisy, clean = tiny_corpus.load_pair(e)
            with dt.no_grad():
                y = model.forward_static(
                    Tensor(noisy[:seg].astype(np.float32)), 0.5).data
            outs.append(si_sdr(clean[:seg], y))
        assert v["si_sdr"] == pytest.approx(float(np.mean(outs)), abs=1e-4)
