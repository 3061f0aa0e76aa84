import pytest

from oracles import FD_TOL, GRADIENT_CASES


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_finite_difference(name):
    assert GRADIENT_CASES[name]() <= FD_TOL
