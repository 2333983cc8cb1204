import pytest
import torch

from latentseg import nn
from latentseg.gradcheck import check_gradients, rel_err
from latentseg.params import ParamStore


def store():
    g = torch.Generator().manual_seed(0)
    p = ParamStore()
    nn.add_linear(p, g, "l", 4, 3)
    return p


def test_rel_err():
    assert rel_err(1.0, 1.0) == 0
    assert rel_err(2.0, 1.0) == 0.5
    assert rel_err(0.0, 1e-12) < 1e-1


def test_correct_gradient_passes():
    x = torch.randn(6, 3, dtype=torch.float64)
    res = check_gradients(store(), lambda p: torch.tanh(nn.linear(p, "l", x)).pow(2).sum(),
                          n_samples=10)
    assert res.checked == 10 and res.passed(1e-6)


def test_wrong_gradient_is_caught():
    x = torch.randn(6, 3, dtype=torch.float64)

    def loss(p):
        y = nn.linear(p, "l", x)
        # forward value is y^2, but the backward pass only sees y
        return (y + (y * y - y).detach()).sum()

    res = check_gradients(store(), loss, n_samples=10)
    assert not res.passed(1e-2)


def test_no_parameters():
    p = store().freeze_all()
    with pytest.raises(ValueError):
        check_gradients(p, lambda s: torch.tensor(0.0))
