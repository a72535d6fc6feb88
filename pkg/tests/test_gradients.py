import pytest

from gradcases import CASES, run_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_differences(name):
    errs = [run_case(name, i, eps=1e-5) for i in range(3)]
    assert max(errs) < 1e-6, errs


def test_zero_gradient_parameters_do_not_fail():
    # a bias feeding straight into a normalisation has an exactly zero gradient
    import torch
    import torch.nn as nn

    from realnet.engine import gradient_check

    torch.manual_seed(0)
    conv = nn.Conv2d(2, 4, 3, padding=1).double()
    norm = nn.GroupNorm(1, 4).double()
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    w = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    fn = lambda: (norm(conv(x)) * w).sum()
    assert gradient_check(fn, list(conv.parameters()), eps=1e-5) < 1e-6
