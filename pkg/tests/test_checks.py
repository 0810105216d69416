import numpy as np

from blocklora.checks import relative_error, report_text, run_checks


def test_relative_error():
    assert abs(relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) - 0.2 / 2.2) <= 1e-15
    assert relative_error(np.array([3e-17]), np.array([0.0])) <= 1e-8
    assert relative_error(np.array([1e-9]), np.array([0.0])) > 1e-5


def test_suite_passes_and_is_reproducible():
    a, b = run_checks(seed=5), run_checks(seed=5)
    assert all(r.passed for r in a), report_text(a)
    assert report_text(a) == report_text(b)
