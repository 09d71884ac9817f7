"""Finite-difference gradient verification of every differentiable op.

The suite in tandemseg.gradcheck is the product under test here, so this file
also sanity-checks the checker itself (the numeric differentiator and the
relative-error reduction) against closed-form cases.
"""
import numpy as np
import pytest

from tandemseg.gradcheck import (DEFAULT_TOLERANCE, TANDEM_CASE_NAME,
                                 check_tandem_model, numeric_gradient,
                                 relative_error, run_gradcheck)


class TestCheckerInternals:
    def test_numeric_gradient_of_quadratic(self):
        # f(x) = sum(x^2): df/dx = 2x, exact for central differences
        x = np.array([1.0, -2.0, 0.5])

        def f(arrs):
            return float((arrs[0] ** 2).sum())

        g = numeric_gradient(f, [x], index=0, eps=1e-5)
        np.testing.assert_allclose(g, 2 * x, rtol=1e-8)

    def test_numeric_gradient_leaves_inputs_untouched(self):
        x = np.ones(3)
        numeric_gradient(lambda a: float(a[0].sum()), [x], index=0, eps=1e-4)
        np.testing.assert_array_equal(x, np.ones(3))

    def test_relative_error_zero_for_identical(self):
        g = np.random.default_rng(0).normal(size=(4, 4))
        assert relative_error(g, g.copy()) == 0.0

    def test_relative_error_scales_with_difference(self):
        a = np.array([1.0])
        assert relative_error(a, np.array([1.001])) == pytest.approx(1e-3, rel=1e-2)

    def test_relative_error_ignores_joint_round_off(self):
        # both estimates below the zero cut: treated as true zeros
        a = np.array([3e-12])
        b = np.array([-2e-12])
        assert relative_error(a, b) == 0.0

    def test_relative_error_flags_one_sided_zero(self):
        a = np.array([0.0])
        b = np.array([0.5])
        assert relative_error(a, b) > 0.4


class TestOperatorSuite:
    def test_every_case_passes_at_default_tolerance(self):
        results = run_gradcheck()
        failed = [r.name for r in results if not r.passed]
        assert failed == [], f"gradient check failed for: {failed}"

    def test_suite_covers_all_engine_ops(self):
        names = {r.name for r in run_gradcheck()}
        for expected in ("conv3x3_stride1", "conv3x3_stride2", "conv1x1",
                         "batchnorm_train", "batchnorm_eval", "maxpool2x2",
                         "upsample_nearest2x", "grid_subsample2x", "dropout",
                         "relu", "sigmoid", "concat", "dice_loss",
                         TANDEM_CASE_NAME):
            assert expected in names

    def test_composed_model_is_tight(self):
        result = check_tandem_model()
        assert result.passed
        assert result.max_rel_error <= DEFAULT_TOLERANCE
