import math

import numpy as np
import numpy.testing as npt
import pytest

from ohformer.errors import ConfigurationError, ContractError
from ohformer.tensor import Parameter
from ohformer.training.optim import SGD, cosine_lr, sgd_step


def _param(values, decay=True, grad=None):
    p = Parameter(np.asarray(values, dtype=float), decay=decay)
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float32)
    return p


class TestSgdStep:
    def test_zero_gradient_keeps_parameters(self):
        p = _param([1.0, -2.0], grad=[0.0, 0.0])
        sgd_step([("w", p)], {}, lr=0.1, momentum=0.9, weight_decay=0.0)
        npt.assert_array_equal(p.data, [1.0, -2.0])

    def test_plain_step(self):
        p = _param([1.0, -2.0], grad=[0.5, 1.0])
        sgd_step([("w", p)], {}, lr=0.1, momentum=0.0, weight_decay=0.0)
        npt.assert_allclose(p.data, [0.95, -2.1], rtol=1e-6)

    def test_momentum_recursion(self):
        p = _param([1.0], grad=[2.0])
        state = {}
        sgd_step([("w", p)], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([("w", p)], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        npt.assert_allclose(state["w"], [2.0 * 1.9], rtol=1e-6)
        npt.assert_allclose(p.data, [1.0 - 0.1 * 2.0 * (2 + 0.9)], rtol=1e-6)

    def test_decay_flag(self):
        decayed = _param([1.0], grad=[0.0])
        exempt = _param([1.0], decay=False, grad=[0.0])
        sgd_step([("a", decayed), ("b", exempt)], {}, lr=0.5, momentum=0.0, weight_decay=0.1)
        npt.assert_allclose(decayed.data, [0.95], rtol=1e-6)
        npt.assert_array_equal(exempt.data, [1.0])

    def test_missing_gradient_counts_as_zero(self):
        p = _param([3.0])
        sgd_step([("w", p)], {}, lr=0.1, momentum=0.9, weight_decay=0.0)
        npt.assert_array_equal(p.data, [3.0])

    def test_gradient_shape_mismatch(self):
        p = _param([1.0, 2.0], grad=[1.0])
        with pytest.raises(ContractError):
            sgd_step([("w", p)], {}, lr=0.1, momentum=0.9, weight_decay=0.0)


class TestSgd:
    def test_state_round_trip(self):
        p = _param([1.0, 2.0], grad=[1.0, 1.0])
        opt = SGD([("w", p)])
        opt.step(0.1)
        other = SGD([("w", _param([0.0, 0.0]))])
        other.load_state_dict(opt.state_dict())
        npt.assert_array_equal(other.state["w"], opt.state["w"])

    def test_foreign_state_rejected(self):
        opt = SGD([("w", _param([1.0]))])
        with pytest.raises(ContractError):
            opt.load_state_dict({"v": np.zeros(1)})

    def test_zero_grad(self):
        p = _param([1.0], grad=[1.0])
        SGD([("w", p)]).zero_grad()
        assert p.grad is None


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.01) == pytest.approx(0.01)
        assert cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005)

    def test_quarter(self):
        assert cosine_lr(25, 100, 1.0) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))

    @pytest.mark.parametrize("step, total", [(0, 0), (-1, 10), (11, 10)])
    def test_rejected(self, step, total):
        with pytest.raises(ConfigurationError):
            cosine_lr(step, total, 0.01)
