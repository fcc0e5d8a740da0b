import numpy as np
import pytest

from services.errors import ContractViolation, NonFiniteLossError
from services.network import PARAMETER_NAMES, TinyNet, backward, forward
from utils.finite_difference import central_difference, relative_error


def test_identity_network_projects_inputs(rng):
    raw = rng.normal(size=(2, 3, 5))
    grid, cache = forward(TinyNet.identity(5, 3), raw)
    assert grid.values.shape == (2, 3, 3)
    assert np.allclose(grid.values, raw[..., :3])
    assert np.allclose(cache.embedding, raw.reshape(-1, 5).mean(axis=0))


def test_zero_input_gives_bias_composition(rng):
    net = TinyNet.initialize(4, 3, rng, noise=0.2)
    params = net.parameters()
    for name in ('backbone.bias', 'add_on.0.bias', 'add_on.1.bias'):
        params[name] = rng.normal(size=params[name].shape)
    net = net.with_parameters(params)
    grid, _ = forward(net, np.zeros((1, 2, 4)))
    p = net.params
    expected = (p['backbone.bias'] @ p['add_on.0.weight'].T + p['add_on.0.bias']) @ p['add_on.1.weight'].T \
        + p['add_on.1.bias']
    assert np.allclose(grid.values[0, 0], expected)
    assert np.allclose(grid.values[0, 1], expected)


def test_parameter_count(rng):
    net = TinyNet.initialize(6, 4, rng)
    assert net.num_parameters == 6 * 6 + 6 + 4 * 6 + 4 + 4 * 4 + 4
    assert set(net.parameters()) == set(PARAMETER_NAMES)


def test_shape_mismatch(rng):
    with pytest.raises(ContractViolation):
        forward(TinyNet.identity(4, 4), np.zeros((2, 2, 5)))
    params = TinyNet.identity(4, 4).parameters()
    params['add_on.0.weight'] = np.zeros((3, 3))
    with pytest.raises(ContractViolation):
        TinyNet(params)


def test_backward_matches_finite_differences(rng):
    net = TinyNet.initialize(4, 3, rng, noise=0.3)
    raw = rng.normal(size=(2, 2, 4))
    weights = rng.normal(size=(4, 3))
    extra = rng.normal(size=4)

    def objective(candidate: TinyNet) -> float:
        grid, cache = forward(candidate, raw)
        return float(np.sum(weights * grid.flat) + extra @ cache.embedding)

    _, cache = forward(net, raw)
    grad_backbone = np.broadcast_to(extra / 4, cache.backbone.shape)
    grads = backward(net, cache, weights, grad_backbone)
    for name in PARAMETER_NAMES:
        def perturbed(value, name=name):
            params = net.parameters()
            params[name] = value
            return objective(TinyNet(params))
        assert relative_error(grads[name], central_difference(perturbed, net.params[name])) < 1e-6


def test_step_uses_separate_rates(rng):
    net = TinyNet.identity(3, 3)
    grads = {name: np.ones_like(value) for name, value in net.params.items()}
    stepped = net.step(grads, lr_backbone=0.1, lr_add_on=0.01)
    assert stepped.params['backbone.bias'] == pytest.approx(np.full(3, -0.1))
    assert stepped.params['add_on.1.bias'] == pytest.approx(np.full(3, -0.01))
    assert np.array_equal(net.params['backbone.bias'], np.zeros(3))


def test_overflowing_features_are_non_finite(rng):
    params = TinyNet.identity(3, 3).parameters()
    params['add_on.1.weight'] = np.full((3, 3), 1e200)
    params['add_on.0.weight'] = np.full((3, 3), 1e200)
    with pytest.raises(NonFiniteLossError, match='non-finite features'):
        forward(TinyNet(params), rng.normal(size=(2, 2, 3)) + 1.0)


def test_step_that_overflows_is_non_finite(rng):
    net = TinyNet.identity(3, 2)
    grads = {name: np.ones_like(value) for name, value in net.params.items()}
    grads['backbone.weight'][0, 0] = np.inf
    with pytest.raises(NonFiniteLossError, match='backbone.weight'):
        net.step(grads, lr_backbone=1e-3, lr_add_on=1e-3)
    with pytest.raises(NonFiniteLossError, match='add_on'):
        net.step({name: np.full_like(value, 1e308) for name, value in net.params.items()},
                 lr_backbone=0.0, lr_add_on=10.0)
