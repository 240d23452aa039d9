import numpy as np

from rnnpool.validation import numeric_grad, rel_error


def test_numeric_grad_of_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert np.allclose(g, 2 * x, atol=1e-8)
    assert np.array_equal(x, [[1.0, -2.0], [0.5, 3.0]])


def test_rel_error_floor():
    assert rel_error(0.0, 0.0).item() == 0.0
    assert rel_error(1e-12, 0.0).item() < 1e-3
    assert np.isclose(rel_error(1.0, 1.1).item(), 0.1 / 1.1)
