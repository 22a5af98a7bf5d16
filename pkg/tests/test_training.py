import json
import math

import numpy as np
import pytest

from fiih.channel import AttackSpec
from fiih.imageio import write_png
from fiih.inn import CouplingStack
from fiih.numerics import backward
from fiih.training import (
    DatasetSplit,
    TrainConfig,
    TrainingError,
    TrainState,
    attack_for_epoch,
    center_crop,
    eval_to_csv,
    evaluate,
    learning_rate,
    log_to_csv,
    synthetic_images,
    train,
    train_step,
)


def tiny_config(**kw):
    base = dict(
        epochs=3,
        batch_size=4,
        lr0=1e-3,
        blocks=2,
        image_size=16,
        n_layers=2,
        growth=4,
        seed=5,
        invertibility_check_every=1,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return synthetic_images(8, 16, seed=1)


class TestConfig:
    def test_learning_rate_schedule(self):
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == 1e-4
        assert learning_rate(cfg, 29) == 1e-4
        assert learning_rate(cfg, 30) == 5e-5
        assert learning_rate(cfg, 60) == 2.5e-5

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.blocks, cfg.image_size) == (130, 8, 16, 224)
        w = cfg.weights
        assert (w.hide_mse, w.hide_ssim, w.reveal_mse, w.reveal_ssim) == (50, 50, 1, 1)

    def test_unknown_key(self):
        with pytest.raises(TrainingError, match="unknown config key 'learning_rate'"):
            TrainConfig.from_dict({"learning_rate": 0.1})

    @pytest.mark.parametrize(
        "bad", [{"batch_size": 3}, {"lr0": 0}, {"mode": "xor"}, {"dtype": "float16"}, {"image_size": 15}]
    )
    def test_invalid_values(self, bad):
        with pytest.raises(Exception):
            TrainConfig.from_dict(bad)

    def test_file_formats(self, tmp_path):
        toml = tmp_path / "c.toml"
        toml.write_text('epochs = 7\nchannel_curriculum = [{kind = "jpeg", qf = 40}]\n[weights]\nhide_mse = 2.0\n')
        cfg = TrainConfig.from_file(toml)
        assert cfg.epochs == 7 and cfg.weights.hide_mse == 2.0
        assert cfg.channel_curriculum == [AttackSpec.jpeg(40)]
        js = tmp_path / "c.json"
        js.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_file(js) == cfg

    def test_curriculum_and_ramp(self):
        cfg = TrainConfig(epochs=4, channel_curriculum=[{"kind": "gaussian", "sigma": 10}, {"kind": "jpeg", "qf": 80}])
        kinds = [attack_for_epoch(cfg, e).kind for e in range(4)]
        assert kinds == ["gaussian", "gaussian", "jpeg", "jpeg"]
        cfg = TrainConfig(epochs=5, dropout_ramp=(0.1, 0.9))
        ratios = [attack_for_epoch(cfg, e).ratio for e in range(5)]
        np.testing.assert_allclose(ratios, [0.1, 0.3, 0.5, 0.7, 0.9])
        assert attack_for_epoch(TrainConfig(), 3) is None


class TestData:
    def test_synthetic_range_and_grid(self):
        ds = synthetic_images(3, 8, seed=0)
        for im in ds.images:
            assert im.shape == (3, 8, 8)
            assert im.min() >= 0.1 - 1e-9 and im.max() <= 0.9 + 1e-9
            np.testing.assert_allclose(im * 255, np.rint(im * 255), atol=1e-9)
        assert len(ds.pairs()) == 1

    def test_center_crop(self):
        im = np.arange(3 * 6 * 8).reshape(3, 6, 8)
        np.testing.assert_array_equal(center_crop(im, 4), im[:, 1:5, 2:6])
        with pytest.raises(TrainingError):
            center_crop(im, 7)

    def test_from_dir(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (10, 12, 3), dtype=np.uint8)
        write_png(tmp_path / "b.png", px)
        write_png(tmp_path / "a.png", px[::-1].copy())
        ds = DatasetSplit.from_dir(tmp_path, size=8)
        assert len(ds) == 2 and ds.images[0].shape == (3, 8, 8)
        np.testing.assert_array_equal(ds.images[1], center_crop(px.transpose(2, 0, 1) / 255.0, 8))


class TestStep:
    @pytest.mark.parametrize(
        "attack",
        [None, AttackSpec.gaussian(10), AttackSpec.jpeg(40), AttackSpec.dropout(0.5)],
        ids=["clean", "gaussian", "jpeg", "dropout"],
    )
    @pytest.mark.parametrize("mode", ["subtract", "add"])
    def test_step_produces_gradients(self, data, attack, mode):
        cfg = tiny_config(mode=mode)
        stack = CouplingStack.init(2, seed=1, n_layers=2, growth=4, zero_final=False, final_scale=0.3)
        images = np.stack(data.images[:4])
        loss, ps, pr = train_step(stack, images[2:], images[:2], cfg, attack, np.random.default_rng(0))
        backward(loss)
        grads = [p.grad for p in stack.parameters()]
        assert all(g is not None and np.isfinite(g).all() for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)
        assert float(loss.data) > 0 and ps > 0 and pr > 0

    def test_clean_unquantized_recovery_is_exact(self, data):
        # without the 8-bit rounding a clean channel returns the secret exactly
        cfg = tiny_config(quantize_stego=False)
        stack = CouplingStack.init(2, seed=1, n_layers=2, growth=4, zero_final=False, final_scale=0.3)
        images = np.stack(data.images[:4])
        _, _, pr = train_step(stack, images[2:], images[:2], cfg, None, np.random.default_rng(0))
        assert pr > 100


class TestTrain:
    def test_zero_epochs_leaves_model(self, data):
        cfg = tiny_config(epochs=0)
        state = train(cfg, data)
        assert state.epoch == 0 and state.log == []
        assert state.stack.digest() == cfg.new_stack().digest()

    def test_loss_decreases_and_logs(self, data):
        state = train(tiny_config(epochs=6, lr0=3e-3), data)
        losses = [r.loss for r in state.log]
        assert len(losses) == 6 and losses[-1] < losses[0]
        assert all(r.invertibility_error < 1e-6 for r in state.log)
        csv_text = log_to_csv(state.log)
        assert csv_text.splitlines()[0] == "epoch,lr,L_total,psnr_stego,psnr_recovery"
        assert len(csv_text.splitlines()) == 7

    def test_deterministic(self, data):
        cfg = tiny_config(channel_curriculum=[{"kind": "gaussian", "sigma": 10}])
        a, b = train(cfg, data), train(cfg, data)
        assert a.stack.digest() == b.stack.digest()
        assert a.log == b.log

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        cfg = tiny_config(epochs=4, dropout_ramp=(0.1, 0.5))
        full = train(cfg, data)
        ck = tmp_path / "ck.bin"
        partial = train(cfg, data, checkpoint=ck, stop_after=2)
        assert partial.epoch == 2
        state, saved = TrainState.load(ck)
        assert TrainConfig.from_dict(saved) == cfg
        resumed = train(cfg, data, state=state)
        assert resumed.epoch == 4
        assert resumed.stack.digest() == full.stack.digest()
        assert resumed.log == full.log

    def test_too_few_images(self):
        with pytest.raises(TrainingError):
            train(tiny_config(batch_size=8), synthetic_images(4, 16))

    def test_float32_training(self, data):
        state = train(tiny_config(epochs=1, dtype="float32"), data)
        assert state.stack.dtype == np.float32


@pytest.fixture(scope="module")
def stack():
    return CouplingStack.init(2, seed=3, n_layers=2, growth=4, zero_final=False, final_scale=0.1)


class TestEvaluate:
    def test_rows_and_csv(self, stack, data):
        attacks = [AttackSpec.gaussian(s) for s in (10, 20)] + [AttackSpec.jpeg(40), AttackSpec.dropout(0.3)]
        rows = evaluate(stack, data, attacks)
        assert [r.attack for r in rows] == ["clean", "gaussian", "gaussian", "jpeg", "dropout"]
        assert [r.level for r in rows] == [None, 10.0, 20.0, 40.0, 0.3]
        lines = eval_to_csv(rows).splitlines()
        assert lines[0] == "attack,level,psnr_stego,ssim_stego,psnr_recovery,ssim_recovery"
        assert len(lines) == 6

    def test_float_mode_clean_is_lossless(self, stack, data):
        rows = evaluate(stack, data, float_mode=True)
        assert rows[0].recovery.psnr_db >= 100

    def test_fill_beats_no_fill(self, stack, data):
        attacks = [AttackSpec.dropout(r) for r in (0.1, 0.5, 0.9)]
        filled = evaluate(stack, data, attacks)
        raw = evaluate(stack, data, attacks, fill=None)
        for f, r in zip(filled[1:], raw[1:]):
            assert f.recovery.psnr_db > r.recovery.psnr_db

    def test_same_seed_same_rows(self, stack, data):
        attacks = [AttackSpec.gaussian(20), AttackSpec.dropout(0.5)]
        assert eval_to_csv(evaluate(stack, data, attacks, seed=4)) == eval_to_csv(evaluate(stack, data, attacks, seed=4))

    def test_zero_noise_is_lossless_in_float_mode(self, data):
        identity = CouplingStack.init(1, n_layers=2, growth=4)
        rows = evaluate(identity, data, [AttackSpec.gaussian(0)], float_mode=True)
        assert math.isinf(rows[1].recovery.psnr_db) or rows[1].recovery.psnr_db > 250
