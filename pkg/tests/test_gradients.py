import pytest

from _gradcheck import OP_KINDS, TOL, check_network, check_op


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", OP_KINDS)
def test_op_gradient_matches_finite_differences(kind, seed):
    assert check_op(kind, seed) <= TOL


@pytest.mark.parametrize("arch,seed", [("resnet", 0), ("convnet", 1)])
def test_network_gradient_matches_finite_differences(arch, seed):
    assert check_network(arch, seed) <= TOL
