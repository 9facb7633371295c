import numpy as np
import pytest

from lgr import tensor as T
from lgr.gradcheck import finite_diff_check, rel_err
from lgr.gradsuite import CASES, run_case


def test_rel_err_formula():
    assert rel_err(2.0, 1.0) == 0.5
    assert rel_err(0.1, 0.05) == pytest.approx(0.05)


def test_mse_oracle():
    rng = np.random.default_rng(0)
    c = rng.uniform(-1, 1, 6)
    rep = finite_diff_check(lambda w: T.mse(w, c), [rng.uniform(-1, 1, 6)])
    assert rep.max_rel_err <= 1e-6


def test_relu_sum_oracle_away_from_zero():
    w = np.array([-0.7, 0.3, 1.2, -0.1])
    rep = finite_diff_check(lambda w: T.sum(T.relu(w)), [w])
    assert rep.max_rel_err <= 1e-6
    assert rep.excluded == 0


def test_constant_function_reports_zero():
    rep = finite_diff_check(lambda w: T.as_tensor(3.0), [np.ones(3)])
    assert rep.max_rel_err == 0.0


def test_non_scalar_rejected():
    with pytest.raises(ValueError):
        finite_diff_check(lambda w: T.mul(w, 2.0), [np.ones(3)])


def test_eps_must_be_positive():
    with pytest.raises(ValueError):
        finite_diff_check(lambda w: T.sum(w), [np.ones(2)], eps=0.0)


def test_kink_straddling_inputs_are_excluded():
    w = np.array([1e-7, 0.5])
    rep = finite_diff_check(lambda w: T.sum(T.relu(w)), [w])
    assert rep.excluded == 1 and rep.max_rel_err <= 1e-6


def test_detects_a_wrong_gradient():
    def bad_square(x):
        return T._make(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")  # should be 2x

    rep = finite_diff_check(lambda w: T.sum(bad_square(w)), [np.array([0.5, 1.0])])
    assert rep.max_rel_err > 0.1


def test_report_lists_each_input():
    rep = finite_diff_check(lambda a, b: T.sum(T.mul(a, b)), [np.ones(2), np.ones(3).reshape(3, 1)], names=["a", "b"])
    assert [r.name for r in rep.inputs] == ["a", "b"]
    assert "a[2]" in str(rep)


@pytest.mark.parametrize("case", sorted(CASES))
def test_battery_case(case):
    r = run_case(case, seed=11)
    assert r.max_rel_err <= 1e-4, r
    assert r.checked > 0
