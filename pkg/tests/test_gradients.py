import pytest
import torch

from oracles import gradient_cases, max_rel_error


@pytest.mark.parametrize("name", ["kl", "perceptual", "composite", "ldm"])
def test_central_differences(name):
    fn, inputs = gradient_cases()[name]
    assert max_rel_error(fn, inputs) < 1e-4


@pytest.mark.parametrize("name", ["kl", "perceptual", "composite", "ldm"])
def test_torch_gradcheck(name):
    fn, inputs = gradient_cases(seed=1)[name]
    inputs = [x.requires_grad_(True) for x in inputs]
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)
