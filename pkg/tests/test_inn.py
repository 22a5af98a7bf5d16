import math

import numpy as np
import pytest

from fiih.inn import (
    ConfigurationError,
    CouplingStack,
    block_forward,
    block_inverse,
    scaled_sigmoid,
    stack_forward,
    stack_inverse,
)
from fiih.numerics import DenseBlock, Tensor, backward, mean, square
from gradcheck import numeric_grad, rel_error


def random_stack(n, seed=0, variant="centered", **kw):
    kw.setdefault("n_layers", 3)
    kw.setdefault("growth", 8)
    return CouplingStack.init(n, seed=seed, zero_final=False, final_scale=0.3, sigma_variant=variant, **kw)


@pytest.fixture
def halves():
    rng = np.random.default_rng(0)
    return rng.standard_normal((6, 8, 8)), rng.standard_normal((6, 8, 8))


class TestBlock:
    def test_zero_init_is_identity(self, halves):
        u1, u2 = halves
        block = CouplingStack.init(1, n_layers=3, growth=8).blocks[0]
        a, b = block_forward(u1, u2, block)
        np.testing.assert_array_equal(a.data, u1)
        np.testing.assert_array_equal(b.data, u2)
        a, b = block_inverse(u1, u2, block)
        np.testing.assert_array_equal(a.data, u1)
        np.testing.assert_array_equal(b.data, u2)

    def test_zero_u2_substitution(self, halves):
        u1, _ = halves
        block = random_stack(1, seed=3).blocks[0]
        zero = np.zeros_like(u1)
        a, b = block_forward(u1, zero, block)
        np.testing.assert_allclose(a.data, block.phi(zero).data + u1, atol=1e-14)
        np.testing.assert_allclose(b.data, block.theta(a).data, atol=1e-14)

    @pytest.mark.parametrize("variant", ["centered", "plain"])
    def test_round_trip(self, halves, variant):
        u1, u2 = halves
        block = random_stack(1, seed=4, variant=variant).blocks[0]
        a, b = block_forward(u1, u2, block)
        r1, r2 = block_inverse(a, b, block)
        assert max(np.abs(r1.data - u1).max(), np.abs(r2.data - u2).max()) < 1e-8
        f1, f2 = block_forward(*block_inverse(u1, u2, block), block)
        assert max(np.abs(f1.data - u1).max(), np.abs(f2.data - u2).max()) < 1e-8

    def test_naive_inverse_order_is_wrong(self, halves):
        # undoing phi first with the *output* u2' does not invert the block
        u1, u2 = halves
        block = random_stack(1, seed=5).blocks[0]
        a, b = block_forward(u1, u2, block)
        naive_u1 = a.data - block.phi(b).data
        assert np.abs(naive_u1 - u1).max() > 1e-3

    @pytest.mark.parametrize("k", [0.5, 2.0, 4.0])
    def test_scale_range(self, k):
        x = np.linspace(-50, 50, 1001)
        s = np.exp(scaled_sigmoid(x, k).data)
        assert s.min() >= math.exp(-k / 2) and s.max() <= math.exp(k / 2)
        assert scaled_sigmoid(np.zeros(1), k).data[0] == 0.0

    def test_shape_checks(self):
        block = CouplingStack.init(1, n_layers=2, growth=4).blocks[0]
        with pytest.raises(ConfigurationError):
            block_forward(np.zeros((6, 4, 4)), np.zeros((6, 4, 2)), block)
        with pytest.raises(ConfigurationError):
            block_forward(np.zeros((5, 4, 4)), np.zeros((5, 4, 4)), block)

    def test_bad_params(self):
        rng = np.random.default_rng(0)
        nets = [DenseBlock.init(6, 6, rng, n_layers=2, growth=2) for _ in range(3)]
        with pytest.raises(ConfigurationError):
            from fiih.inn import CouplingBlockParams

            CouplingBlockParams(*nets, clamp_k=0.0)


class TestStack:
    def test_empty_stack_is_identity(self):
        x = np.random.default_rng(0).standard_normal((12, 4, 4))
        np.testing.assert_array_equal(stack_forward(x, CouplingStack([])).data, x)
        np.testing.assert_array_equal(stack_inverse(x, CouplingStack([])).data, x)

    def test_zero_init_stack_is_identity(self):
        x = np.random.default_rng(0).standard_normal((12, 4, 4))
        st = CouplingStack.init(3, n_layers=2, growth=4)
        np.testing.assert_array_equal(stack_forward(x, st).data, x)

    def test_sixteen_block_round_trip(self):
        x = np.random.default_rng(1).standard_normal((12, 16, 16))
        st = random_stack(16, seed=2)
        y = stack_forward(x, st).data
        assert np.abs(y - x).max() > 0.1
        assert np.abs(stack_inverse(y, st).data - x).max() < 1e-6
        assert np.abs(stack_forward(stack_inverse(x, st), st).data - x).max() < 1e-6

    def test_channel_count_rejected(self):
        with pytest.raises(ConfigurationError):
            stack_forward(np.zeros((6, 4, 4)), CouplingStack([]))

    def test_batched(self):
        x = np.random.default_rng(3).standard_normal((2, 12, 8, 8))
        st = random_stack(2, seed=1)
        y = stack_forward(x, st).data
        np.testing.assert_allclose(y[1], stack_forward(x[1], st).data, atol=1e-12)

    def test_gradient_through_stack(self):
        rng = np.random.default_rng(4)
        st = random_stack(2, seed=6, n_layers=2, growth=3)
        x = rng.standard_normal((12, 4, 4))
        target = rng.standard_normal((12, 4, 4))
        params = st.parameters()

        def loss():
            return mean(square(stack_forward(x, st) - target))

        backward(loss())
        for p in params[:4] + params[-2:]:
            idx, num = numeric_grad(lambda: float(loss().data), p.data, max_coords=20)
            assert rel_error(p.grad.ravel()[idx], num) < 1e-3

    def test_serialization_round_trip(self, tmp_path):
        st = random_stack(3, seed=7, variant="plain", clamp_k=1.5)
        path = tmp_path / "m.bin"
        st.save(path)
        back = CouplingStack.load(path)
        assert back.digest() == st.digest()
        assert back.blocks[0].sigma_variant == "plain" and back.blocks[0].clamp_k == 1.5
        x = np.random.default_rng(0).standard_normal((12, 4, 4))
        np.testing.assert_array_equal(stack_forward(x, back).data, stack_forward(x, st).data)

    def test_forward_and_inverse_share_parameters(self):
        st = random_stack(2, seed=8)
        x = np.random.default_rng(0).standard_normal((12, 4, 4))
        y = stack_forward(x, st).data
        st.blocks[0].phi.layers[-1].bias.data += 0.1
        # any edit to the shared parameters affects the reverse pass too
        assert np.abs(stack_inverse(y, st).data - x).max() > 1e-3
