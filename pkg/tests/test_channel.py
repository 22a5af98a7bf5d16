import json

import numpy as np
import pytest

from fiih import channel, quality
from fiih.channel import (
    AttackError,
    AttackSpec,
    Neighborhood,
    apply_attack,
    attack_dropout,
    attack_gaussian,
    attack_jpeg,
    attack_jpeg_differentiable,
    detect_mask,
    field_fill,
    fill_holes,
    scaled_tables,
)
from fiih.numerics import Tensor, backward, mean, mul, square, total
from fiih.pipeline import HideMode
from oracles import brute_force_fill, photo_crops, pillow_round_trip, smooth_field


class TestAttackSpec:
    def test_json_round_trip(self):
        for spec in [AttackSpec.gaussian(10, seed=3), AttackSpec.dropout(0.5), AttackSpec.jpeg(80)]:
            assert AttackSpec.from_json(spec.to_json()) == spec
        assert json.loads(AttackSpec.jpeg(80).to_json()) == {"kind": "jpeg", "qf": 80}

    @pytest.mark.parametrize(
        "bad",
        [
            {"kind": "gaussian", "sigma": -1},
            {"kind": "dropout", "ratio": 1.5},
            {"kind": "jpeg", "qf": 0},
            {"kind": "jpeg", "qf": 101},
            {"kind": "jpeg", "qf": 80, "sigma": 2},
            {"kind": "blur"},
            {"sigma": 3},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(AttackError):
            AttackSpec.from_dict(bad)


class TestGaussian:
    def test_zero_sigma_is_identity(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_array_equal(attack_gaussian(x, 0, seed=1), x)

    def test_empirical_std(self):
        x = np.full((3, 200, 200), 0.5)
        diff = attack_gaussian(x, 10, seed=7) - x
        assert diff.size >= 1e5
        assert abs(diff.std() / (10 / 255) - 1) < 0.05

    def test_deterministic_and_clamped(self):
        x = np.random.default_rng(0).random((3, 16, 16))
        a = attack_gaussian(x, 30, seed=5)
        np.testing.assert_array_equal(a, attack_gaussian(x, 30, seed=5))
        assert not np.array_equal(a, attack_gaussian(x, 30, seed=6))
        assert a.min() >= 0 and a.max() <= 1

    def test_negative_sigma(self):
        with pytest.raises(AttackError):
            attack_gaussian(np.zeros((3, 2, 2)), -1)


class TestDropout:
    def test_ratio_zero_and_one(self):
        x = np.random.default_rng(0).random((3, 10, 10)) + 0.1
        out, mask = attack_dropout(x, 0.0, seed=1)
        np.testing.assert_array_equal(out, x)
        assert mask.all()
        out, mask = attack_dropout(x, 1.0, seed=1)
        assert not out.any() and not mask.any()

    def test_exact_count(self):
        x = np.ones((3, 10, 10))
        out, mask = attack_dropout(x, 0.5, seed=2)
        assert (mask == 0).sum() == 50
        # all three channels go together
        assert ((out == 0).all(axis=0) == (mask == 0)).all()

    def test_nested_across_ratios(self):
        x = np.ones((3, 12, 12))
        _, m3 = attack_dropout(x, 0.3, seed=4)
        _, m7 = attack_dropout(x, 0.7, seed=4)
        assert np.all(m7 <= m3)

    def test_detect_mask_recovers_attack_mask(self):
        x = np.random.default_rng(1).integers(1, 256, (3, 16, 16)) / 255.0
        out, mask = attack_dropout(x, 0.4, seed=9)
        np.testing.assert_array_equal(detect_mask(out), mask)

    def test_detect_mask_trivial(self):
        assert detect_mask(np.full((3, 4, 4), 0.2)).all()
        assert not detect_mask(np.zeros((3, 4, 4))).any()
        x = np.zeros((3, 2, 2))
        x[1, 0, 0] = 0.5  # one non-zero channel is enough to survive
        np.testing.assert_array_equal(detect_mask(x), [[1, 0], [0, 0]])

    def test_out_of_range(self):
        with pytest.raises(AttackError):
            attack_dropout(np.zeros((3, 2, 2)), -0.1)


class TestFill:
    def test_full_mask_unchanged(self):
        s = np.random.default_rng(0).random((3, 6, 6))
        out, _ = fill_holes(s, np.ones((6, 6)))
        np.testing.assert_array_equal(out, s)

    def test_hand_computed_center(self):
        s = np.array([[[0, 2, 0], [4, 0, 6], [0, 8, 0]]], dtype=float)
        mask = np.ones((3, 3))
        mask[1, 1] = 0
        out, m = fill_holes(s, mask, Neighborhood.FOUR, passes=1)
        assert out[0, 1, 1] == 5.0
        assert m.all()

    def test_nine_gives_neighbour_mean(self):
        s = np.random.default_rng(2).random((3, 3, 3))
        s[:, 1, 1] = 0
        mask = np.ones((3, 3))
        mask[1, 1] = 0
        out, _ = fill_holes(s, mask, Neighborhood.NINE, passes=1)
        expected = (s.sum(axis=(1, 2))) / 8
        np.testing.assert_allclose(out[:, 1, 1], expected, rtol=1e-15)

    @pytest.mark.parametrize("neighborhood", list(Neighborhood))
    @pytest.mark.parametrize("passes", [1, 3])
    def test_matches_brute_force(self, neighborhood, passes):
        rng = np.random.default_rng(3)
        for _ in range(10):
            h, w = rng.integers(3, 12, 2)
            mask = (rng.random((h, w)) > rng.uniform(0.2, 0.9)).astype(float)
            s = rng.standard_normal((3, h, w)) * mask
            got, got_m = fill_holes(s, mask, neighborhood, passes)
            want, want_m = brute_force_fill(s, mask, neighborhood.offsets, passes)
            np.testing.assert_array_equal(got, want)
            np.testing.assert_array_equal(got_m, want_m)

    def test_unreachable_holes_stay_zero(self):
        s = np.zeros((3, 4, 4))
        res = field_fill(s, s, np.zeros((4, 4)), passes=3)
        assert res.unfilled == 16 and not res.encoded.any()

    @pytest.mark.parametrize("mode", list(HideMode))
    def test_field_fill_on_smooth_residual(self, mode):
        rng = np.random.default_rng(4)
        s_e = smooth_field(rng)
        cover = rng.uniform(0.3, 0.7, s_e.shape)
        stego = cover - s_e if mode is HideMode.SUBTRACT else cover + s_e
        received, mask = attack_dropout(stego, 0.5, seed=1)
        res = field_fill(received, cover, mask, mode=mode)
        holes = np.where(mask == 0, 0.0, 1.0)
        unfilled = s_e * holes
        assert quality.mse(res.encoded, s_e) < quality.mse(unfilled, s_e)
        assert res.unfilled == 0

    def test_on_tape_matches_array(self):
        rng = np.random.default_rng(5)
        mask = (rng.random((6, 6)) > 0.5).astype(float)
        s = rng.standard_normal((3, 6, 6)) * mask
        t = Tensor(s.copy(), requires_grad=True)
        out, _ = fill_holes(t, mask)
        np.testing.assert_array_equal(out.data, fill_holes(s, mask)[0])
        backward(total(out))
        assert t.grad.shape == s.shape


class TestJpeg:
    def test_table_scaling(self):
        luma, chroma = scaled_tables(50)
        np.testing.assert_array_equal(luma, channel.LUMA_TABLE)
        np.testing.assert_array_equal(chroma, channel.CHROMA_TABLE)
        luma, _ = scaled_tables(100)
        assert (luma == 1).all()
        # IJG: qf 20 -> scale 250, 16 * 2.5 = 40
        assert scaled_tables(20)[0][0, 0] == 40

    def test_qf100_near_lossless(self):
        x = photo_crops(1)[0]
        assert quality.psnr(x, attack_jpeg(x, 100)) > 50

    @pytest.mark.parametrize("qf", [20, 40, 80])
    def test_close_to_reference_codec(self, qf):
        for x in photo_crops(3):
            ours = quality.psnr(x, attack_jpeg(x, qf))
            ref = quality.psnr(x, pillow_round_trip(x, qf))
            assert abs(ours - ref) < 1.0

    def test_lower_qf_more_distortion(self):
        x = photo_crops(1)[0]
        p = [quality.psnr(x, attack_jpeg(x, qf)) for qf in (10, 20, 40, 80)]
        assert p == sorted(p)

    @pytest.mark.parametrize("qf", [20, 40, 80])
    def test_idempotent(self, qf):
        for x in photo_crops(2):
            # away from the clamp the quantizer is a projection
            mid = attack_jpeg(0.25 + 0.5 * x, qf)
            assert np.abs(attack_jpeg(mid, qf) - mid).max() * 255 < 1.0
            # clamping at black/white perturbs a few pixels (the reference codec does too)
            once = attack_jpeg(x, qf)
            assert np.abs(attack_jpeg(once, qf) - once).mean() * 255 < 1.0

    def test_padding_for_non_multiple_of_8(self):
        x = photo_crops(1, size=64)[0][:, :20, :30]
        out = attack_jpeg(x, 80)
        assert out.shape == x.shape and quality.psnr(x, out) > 25

    def test_invalid_qf(self):
        with pytest.raises(AttackError):
            attack_jpeg(np.zeros((3, 8, 8)), 0)
        with pytest.raises(AttackError):
            attack_jpeg_differentiable(np.zeros((3, 8, 8)), 101)

    def test_differentiable_forward_identical(self):
        x = photo_crops(1)[0]
        np.testing.assert_array_equal(attack_jpeg_differentiable(x, 40).data, attack_jpeg(x, 40))

    def test_straight_through_gradient(self):
        # mid-range smooth input: no clamping in either pipeline
        rng = np.random.default_rng(0)
        x = 0.5 + 0.1 * smooth_field(rng, 16, 16)
        a = Tensor(x.copy(), requires_grad=True)
        backward(total(attack_jpeg_differentiable(a, 30)))
        b = Tensor(x.copy(), requires_grad=True)
        backward(total(channel._jpeg(b, 30, lambda t: t)))
        np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12, atol=1e-12)

    def test_toy_training_reduces_loss(self):
        x = 0.25 + 0.5 * photo_crops(1, size=32)[0]
        target = attack_jpeg(0.8 * x, 50)
        scale = Tensor(np.array(0.3), requires_grad=True)

        def loss():
            return mean(square(attack_jpeg_differentiable(mul(x, scale), 50) - target))

        start = float(loss().data)
        for _ in range(30):
            scale.zero_grad()
            backward(loss())
            scale.data -= 0.5 / np.mean(x**2) * scale.grad
        assert float(loss().data) < 0.1 * start
        assert abs(float(scale.data) - 0.8) < 0.05


def test_apply_attack_dispatch():
    x = np.random.default_rng(0).random((3, 8, 8))
    np.testing.assert_array_equal(apply_attack(x, AttackSpec.gaussian(5, seed=1)), attack_gaussian(x, 5, 1))
    out, mask = apply_attack(x, AttackSpec.dropout(0.25), seed=3)
    np.testing.assert_array_equal(mask, attack_dropout(x, 0.25, 3)[1])
    np.testing.assert_array_equal(apply_attack(x, AttackSpec.jpeg(40)), attack_jpeg(x, 40))
