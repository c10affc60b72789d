import numpy as np
import pytest

from nodulediag.nn import AdamW, CosineRamp, LinearLayer, LrSchedule, ProjectionHead, SGDMomentum
from nodulediag.tensor import ParameterError, Tensor, UsageError, backward

from gradcheck import check_gradients

rng = np.random.default_rng(7)


class TestLinear:
    def test_identity_weight(self):
        layer = LinearLayer(np.eye(4))
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(layer(Tensor(x)).data, x)

    def test_zero_weight_gives_bias(self):
        layer = LinearLayer(np.zeros((2, 4)), np.array([1.5, -0.5]))
        out = layer(Tensor(rng.standard_normal((5, 4)))).data
        np.testing.assert_allclose(out, np.tile([1.5, -0.5], (5, 1)))

    def test_gradient(self):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        probe = rng.standard_normal((3, 2))

        def f(wt, bt):
            layer = LinearLayer.__new__(LinearLayer)
            layer.weight, layer.bias = wt, bt
            return (layer(Tensor(x)) * probe).sum()

        check_gradients(f, [w, b], tol=1e-4)


class TestProjectionHead:
    def test_bottleneck_unit_norm(self):
        head = ProjectionHead(8, 16, 4, 12, np.random.default_rng(0))
        z = head.bottleneck(Tensor(rng.standard_normal((6, 8)))).data
        np.testing.assert_allclose(np.linalg.norm(z, axis=-1), 1.0, atol=1e-6)

    def test_output_shape(self):
        head = ProjectionHead(4, 8, 3, 8, np.random.default_rng(0))
        out = head(Tensor(rng.standard_normal((5, 4))))
        assert out.shape == (5, 8)

    def test_scale_invariance_with_identity_mlp(self):
        head = ProjectionHead(4, 4, 4, 6, np.random.default_rng(0), activation="identity")
        for layer in (head.fc1, head.fc2, head.fc3):
            layer.weight.data = np.eye(4)
            layer.bias.data = np.zeros(4)
        f = rng.standard_normal((3, 4))
        a = head(Tensor(f)).data
        b = head(Tensor(10.0 * f)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_renormalize_unit_rows(self):
        head = ProjectionHead(4, 8, 3, 8, np.random.default_rng(0))
        head.out_weight.data *= 3.7
        head.renormalize()
        np.testing.assert_allclose(np.linalg.norm(head.out_weight.data, axis=1), 1.0, atol=1e-12)


class TestSGD:
    def test_plain_step(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([1.0])
        SGDMomentum([p], lr=1.0, momentum=0.0).step()
        np.testing.assert_allclose(p.data, [1.0])

    def test_two_momentum_steps(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGDMomentum([p], lr=0.1, momentum=0.9)
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1])
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.29])  # second delta 0.19

    def test_zero_grad_is_identity(self):
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        before = p.data.copy()
        p.grad = np.zeros(4)
        SGDMomentum([p], lr=0.5, momentum=0.9).step()
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(UsageError):
            SGDMomentum([p], lr=0.1).step()


class TestAdamW:
    def test_zero_grad_zero_wd_identity(self):
        p = Tensor(rng.standard_normal(3), requires_grad=True)
        before = p.data.copy()
        p.grad = np.zeros(3)
        AdamW([p], lr=1e-3, weight_decay=0.0).step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.array([1.0])
        AdamW([p], lr=1e-3, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.5 - 1e-3], atol=1e-8)

    def test_decoupled_decay_with_zero_grads(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.5)])


class TestSchedules:
    def test_warmup_end_value(self):
        s = LrSchedule(base_lr=0.00025, warmup_epochs=10, final_lr=1e-6, total_epochs=300)
        assert s.at(10) == pytest.approx(0.00025)

    def test_final_value(self):
        s = LrSchedule(base_lr=0.00025, warmup_epochs=10, final_lr=1e-6, total_epochs=300)
        assert s.at(300) == pytest.approx(1e-6)

    def test_cosine_midpoint(self):
        s = LrSchedule(base_lr=0.00025, warmup_epochs=10, final_lr=1e-6, total_epochs=300)
        assert s.at(155) == pytest.approx((0.00025 + 1e-6) / 2)

    def test_continuous_and_monotone_after_warmup(self):
        s = LrSchedule(base_lr=0.1, warmup_epochs=5, final_lr=0.001, total_epochs=50)
        grid = np.linspace(0, 50, 2001)
        vals = np.array([s.at(e) for e in grid])
        assert np.max(np.abs(np.diff(vals))) < 0.1 * (grid[1] - grid[0]) * 10  # no jumps
        after = vals[grid >= 5]
        assert np.all(np.diff(after) <= 1e-12)

    def test_out_of_range(self):
        s = LrSchedule(base_lr=0.1, warmup_epochs=5, final_lr=0.001, total_epochs=50)
        with pytest.raises(ParameterError):
            s.at(-1)
        with pytest.raises(ParameterError):
            s.at(51)

    def test_momentum_ramp_endpoints_and_midpoint(self):
        m = CosineRamp(start=0.996, end=1.0, total_epochs=100)
        assert m.at(0) == pytest.approx(0.996)
        assert m.at(100) == pytest.approx(1.0)
        assert m.at(50) == pytest.approx(0.998)


class TestHeadGradients:
    def test_head_backward_matches_fd(self):
        head = ProjectionHead(3, 5, 4, 6, np.random.default_rng(3))
        f = rng.standard_normal((2, 3))
        probe = rng.standard_normal((2, 6))

        def loss_fn(w1, b1, w2, b2, w3, b3, wout):
            h = ProjectionHead.__new__(ProjectionHead)
            h.activation = "gelu"
            h.fc1 = LinearLayer.__new__(LinearLayer); h.fc1.weight, h.fc1.bias = w1, b1
            h.fc2 = LinearLayer.__new__(LinearLayer); h.fc2.weight, h.fc2.bias = w2, b2
            h.fc3 = LinearLayer.__new__(LinearLayer); h.fc3.weight, h.fc3.bias = w3, b3
            h.out_weight = wout
            return (h(Tensor(f)) * probe).sum()

        # O(1) weights keep the norm in the bottleneck well conditioned for FD
        r = np.random.default_rng(3)
        args = [r.standard_normal((5, 3)) * 0.6, r.standard_normal(5) * 0.2,
                r.standard_normal((5, 5)) * 0.6, r.standard_normal(5) * 0.2,
                r.standard_normal((4, 5)) * 0.6, r.standard_normal(4) * 0.2,
                head.out_weight.data]
        check_gradients(loss_fn, args, tol=1e-4)
