import numpy as np
import pytest

import volsr.autodiff as ad
from volsr.errors import ShapeError, ValidationError

from gradcases import PRIMITIVES, SEEDS, conv_error, primitive_error
from oracles import brute_conv3d


def grads_of(f, *arrays):
    ts = [ad.Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    ad.backward(f(*ts))
    return [t.grad for t in ts]


class TestForwardSemantics:
    def test_relu(self):
        x = ad.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        ad.backward(ad.sum(ad.relu(x)))
        np.testing.assert_array_equal(ad.relu(x).value, [0, 0, 2])
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_mul_backward(self):
        da, db = grads_of(lambda a, b: ad.mul(a, b), 2.0, 3.0)
        assert (float(da), float(db)) == (3.0, 2.0)

    def test_mean(self):
        x = ad.Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
        m = ad.mean(x)
        ad.backward(m)
        assert m.item() == 2.5
        np.testing.assert_array_equal(x.grad, 0.25)

    def test_square_scalar(self):
        (g,) = grads_of(lambda x: ad.square(x), 3.0)
        assert float(g) == 6.0

    def test_diamond(self):
        # y = x*x + 3x reuses x on two paths
        (g,) = grads_of(lambda x: ad.add(ad.mul(x, x), ad.scale(x, 3.0)), 2.0)
        assert float(g) == 7.0

    def test_concat_split(self):
        a = ad.Tensor(np.ones((1, 2, 2, 2, 2)), requires_grad=True)
        b = ad.Tensor(np.ones((1, 3, 2, 2, 2)), requires_grad=True)
        c = ad.concat_channels(a, b)
        assert c.shape == (1, 5, 2, 2, 2)
        w = np.arange(5.0)[None, :, None, None, None] * np.ones(c.shape)
        ad.backward(ad.sum(ad.mul(c, ad.Tensor(w))))
        np.testing.assert_array_equal(a.grad[0, :, 0, 0, 0], [0, 1])
        np.testing.assert_array_equal(b.grad[0, :, 0, 0, 0], [2, 3, 4])

    def test_crop_center_backward_pads(self):
        x = ad.Tensor(np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8)), requires_grad=True)
        y = ad.crop_center(x, (6, 6, 6))
        assert y.shape == (1, 1, 6, 6, 6)
        np.testing.assert_array_equal(y.value, x.value[..., 1:7, 1:7, 1:7])
        ad.backward(ad.sum(y))
        expected = np.zeros((1, 1, 8, 8, 8))
        expected[..., 1:7, 1:7, 1:7] = 1
        np.testing.assert_array_equal(x.grad, expected)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
        with pytest.raises(ShapeError):
            ad.concat_channels(ad.Tensor(np.ones((1, 1, 2, 2, 2))), ad.Tensor(np.ones((1, 1, 2, 2, 3))))
        with pytest.raises(ShapeError):
            ad.global_skip_add(ad.Tensor(np.ones((1, 1, 2, 2, 2))), ad.Tensor(np.ones((1, 2, 2, 2, 2))))

    def test_scalar_broadcast(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        s = ad.Tensor(2.0, requires_grad=True)
        ad.backward(ad.sum(ad.mul(x, s)))
        np.testing.assert_array_equal(x.grad, 2.0)
        assert float(s.grad) == 3.0

    def test_non_scalar_backward(self):
        with pytest.raises(ValidationError):
            ad.backward(ad.Tensor(np.ones(2), requires_grad=True))

    def test_no_grad(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad

    def test_deterministic_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4, 3))
        w = rng.standard_normal((3, 2, 3, 3, 3))

        def run():
            return grads_of(lambda a, b: ad.sum(ad.square(ad.relu(ad.conv3d(a, b, None, 1)))), x, w)

        for g1, g2 in zip(run(), run()):
            np.testing.assert_array_equal(g1, g2)


class TestConv:
    def test_scalar(self):
        out = ad.conv3d(ad.Tensor(np.full((1, 1, 1, 1, 1), 3.0)), ad.Tensor(np.full((1, 1, 1, 1, 1), 2.0)),
                        ad.Tensor([1.0]))
        assert out.item() == 7.0

    def test_tap_counts(self):
        out = ad.conv3d(ad.Tensor(np.ones((1, 1, 5, 5, 5))), ad.Tensor(np.ones((1, 1, 3, 3, 3))), None, 1).value
        assert out[0, 0, 2, 2, 2] == 27
        assert out[0, 0, 0, 0, 0] == 8

    @pytest.mark.parametrize("pad", [0, 1, (1, 0, 1)])
    def test_against_direct_sum(self, pad):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 4, 4, 3))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), pad).value
        np.testing.assert_allclose(out, brute_conv3d(x, w, b, pad), rtol=0, atol=1e-12)

    def test_batch_and_1x1(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 3, 4, 2))
        w = rng.standard_normal((2, 3, 1, 1, 1))
        out = ad.conv3d(ad.Tensor(x), ad.Tensor(w)).value
        np.testing.assert_allclose(out, brute_conv3d(x, w), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ShapeError):
            ad.conv3d(ad.Tensor(np.ones((1, 2, 4, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3, 3))))
        with pytest.raises(ShapeError):
            ad.conv3d(ad.Tensor(np.ones((1, 1, 2, 2, 2))), ad.Tensor(np.ones((1, 1, 3, 3, 3))))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for seed in SEEDS:
        err = primitive_error(name, seed)
        assert err < 1e-6, (name, seed, err)


def test_conv_gradients():
    for seed in SEEDS:
        assert conv_error(seed) < 1e-6


def test_grad_check_linear():
    x = np.random.default_rng(0).standard_normal(10)
    assert ad.grad_check(lambda ts: ad.sum(ts[0]), x) < 1e-10


def test_gradient_linearity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 1, 3, 3, 3))

    def f(t):
        return ad.sum(ad.mul(t, t))

    def g(t):
        return ad.sum(ad.relu(ad.scale(t, 2.0)))

    (gf,) = grads_of(f, x)
    (gg,) = grads_of(g, x)
    (gc,) = grads_of(lambda t: ad.add(ad.scale(f(t), 0.3), ad.scale(g(t), -1.2)), x)
    np.testing.assert_allclose(gc, 0.3 * gf - 1.2 * gg, atol=1e-10)
