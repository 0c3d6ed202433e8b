import numpy as np
import pytest

from otml.optim import LARS, Adam, is_excluded, lars_update, make_optimizer
from otml.tensor import Tensor


def param(values, grad):
    t = Tensor(np.asarray(values, dtype=float), requires_grad=True)
    t.grad = np.asarray(grad, dtype=float)
    return t


class TestLarsUpdate:
    def test_zero_gradient_zero_decay_leaves_weight(self):
        w = np.array([1.0, -2.0])
        lars_update(w, np.zeros(2), np.zeros(2), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(w, [1.0, -2.0])

    def test_cold_scalar_step_is_lr_times_trust(self):
        w = np.array([1.0])
        lars_update(w, np.array([1.0]), np.zeros(1), lr=0.5, weight_decay=0.0, trust_coeff=1e-3)
        np.testing.assert_allclose(1.0 - w, [0.5 * 1e-3], rtol=1e-9)

    def test_momentum_accumulates(self):
        w, buf = np.array([1.0]), np.zeros(1)
        lars_update(w, np.array([1.0]), buf, lr=1.0, weight_decay=0.0, momentum=0.9, trust_coeff=0.1)
        first = buf.copy()
        lars_update(w, np.array([1.0]), buf, lr=1.0, weight_decay=0.0, momentum=0.9, trust_coeff=0.1)
        assert buf[0] > first[0]

    def test_excluded_groups_use_plain_gradient(self):
        w = np.array([2.0])
        lars_update(w, np.array([0.5]), np.zeros(1), lr=0.1, weight_decay=0.3, excluded=True)
        np.testing.assert_allclose(w, [2.0 - 0.05])


class TestOptimizers:
    def test_exclusion_names(self):
        assert is_excluded("encoder.conv0.bias")
        assert is_excluded("expander.bn0.gamma")
        assert not is_excluded("encoder.conv0.weight")

    @pytest.mark.parametrize("kind", ["lars", "adam"])
    def test_zero_gradients_are_skipped(self, kind):
        p = param([1.0, 2.0], [0.0, 0.0])
        before = p.data.copy()
        make_optimizer(kind, {"w.weight": p}).step()
        assert p.data.tobytes() == before.tobytes()

    @pytest.mark.parametrize("kind", ["lars", "adam"])
    def test_descends_a_quadratic(self, kind):
        p = param([3.0, -2.0], [0.0, 0.0])
        opt = make_optimizer(kind, {"w.weight": p}, lr=0.05 if kind == "adam" else 50.0, weight_decay=0.0)
        for _ in range(200):
            p.grad = 2 * p.data
            opt.step()
        assert np.linalg.norm(p.data) < 1.0

    def test_adam_first_step_is_lr_sized(self):
        p = param([1.0, 1.0], [0.3, -4.0])
        Adam({"w.weight": p}, lr=0.01, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.99, 1.01], rtol=1e-6)

    def test_warmup_scales_learning_rate(self):
        opt = LARS({"w.weight": param([1.0], [1.0])}, lr=1.0, warmup_steps=4)
        assert opt.current_lr() == 0.25
        opt.steps = 10
        assert opt.current_lr() == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_optimizer("sgd", {})
