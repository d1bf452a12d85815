import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from conftest import U_TALL, U_THICK, U_TWIN, random_spd
from multiwell_plates.density import MultiWellModel, QuadraticForm3
from multiwell_plates.linalg import Well
from multiwell_plates.relaxed import (
    SingularRelaxationError,
    RelaxedForm,
    build_relaxed,
    completion,
    embed2,
    l_operator,
    relaxed_q,
)

sym2 = st.tuples(*[st.floats(-3, 3, allow_nan=False)] * 3).map(
    lambda t: np.array([[t[0], t[1]], [t[1], t[2]]]))


def form_for(U):
    return build_relaxed(MultiWellModel((Well(U),)), 0)


def full_value(form, D, a):
    Ui = np.linalg.inv(form.U)
    return float(form.form(Ui @ (embed2(D) + completion(a))))


def grid_search(form, D, half=2.0, step=0.001):
    """Brute-force min over a in [-half, half]^3: coarse sweep, then refine at the target step."""
    def sweep(center, width, n):
        axes = [np.linspace(c - width, c + width, n) for c in center]
        pts = np.array(list(itertools.product(*axes)))
        Ui = np.linalg.inv(form.U)
        M = Ui @ (embed2(D)[None] + completion(pts))
        vals = form.form(M)
        k = int(np.argmin(vals))
        return pts[k], float(vals[k])

    a, val = sweep(np.zeros(3), half, 41)  # step 0.1
    width = 0.1
    while width > step:
        a, val = sweep(a, width, 21)
        width /= 2
    return a, val


class TestLOperator:
    def test_isotropic_has_no_completion(self, rng):
        form = form_for(np.eye(3))
        for _ in range(10):
            D = rng.normal(size=(2, 2))
            assert np.allclose(l_operator(form, D + D.T), 0, atol=1e-14)
        assert np.allclose(l_operator(form, np.zeros((2, 2))), 0)

    def test_thick_well_grid_oracle(self):
        form = form_for(U_THICK)
        D = np.diag([1.0, 0.0])
        a = l_operator(form, D)
        a_grid, _ = grid_search(form, D)
        assert np.max(np.abs(a - a_grid)) < 2e-3

    @pytest.mark.parametrize("U", [U_THICK, U_TALL, U_TWIN])
    def test_stationarity_and_linearity(self, U, rng):
        form = form_for(U)
        D1, D2 = [sym_(rng.normal(size=(2, 2))) for _ in range(2)]
        for D in (D1, D2):
            assert np.max(np.abs(form.stationarity(D, l_operator(form, D)))) < 1e-10
        s, t = rng.normal(size=2)
        assert np.allclose(l_operator(form, s * D1 + t * D2),
                           s * l_operator(form, D1) + t * l_operator(form, D2), atol=1e-10)

    def test_singular_system_names_well(self):
        Q = QuadraticForm3(np.zeros((9, 9)), 3)
        with pytest.raises(SingularRelaxationError, match="well 3"):
            RelaxedForm(Q, np.eye(3), 3)


def sym_(D):
    return 0.5 * (D + np.swapaxes(D, -1, -2))


class TestRelaxedQ:
    @settings(max_examples=50, deadline=None)
    @given(sym2)
    def test_isotropic_closed_form(self, D):
        form = form_for(np.eye(3))
        assert float(relaxed_q(form, D)) == pytest.approx(2 * np.sum(D * D), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("U", [U_THICK, U_TALL, U_TWIN])
    def test_against_grid_search(self, U, rng):
        form = form_for(U)
        for _ in range(4):
            D = sym_(rng.normal(size=(2, 2)))
            D /= np.linalg.norm(D)
            _, val = grid_search(form, D, step=1e-5)
            assert float(relaxed_q(form, D)) == pytest.approx(val, rel=1e-5)

    def test_random_forms_against_local_solver(self, rng):
        # an independent dense minimization over a replaces the grid when the minimizer leaves [-2, 2]^3
        for _ in range(10):
            form = form_for(random_spd(rng))
            D = sym_(rng.normal(size=(2, 2)))
            res = minimize(lambda a: full_value(form, D, a), np.zeros(3), method="BFGS",
                           options={"gtol": 1e-12})
            assert float(relaxed_q(form, D)) == pytest.approx(res.fun, rel=1e-8)

    @pytest.mark.parametrize("U", [np.eye(3), U_THICK, U_TALL, U_TWIN])
    def test_properties(self, U, rng):
        form = form_for(U)
        assert np.min(np.linalg.eigvalsh(form.coeffs)) > -1e-12
        D = sym_(rng.normal(size=(100, 2, 2)))
        E = sym_(rng.normal(size=(100, 2, 2)))
        q = relaxed_q(form, D)
        # choice a = 0 is an upper bound
        Ui = np.linalg.inv(U)
        assert np.all(q <= form.form(Ui @ embed2(D)) + 1e-12)
        # value at the optimal completion
        a = l_operator(form, D)
        assert np.allclose(q, form.form(Ui @ (embed2(D) + completion(a))), atol=1e-10)
        # homogeneity and parallelogram law
        assert np.allclose(relaxed_q(form, 3.7 * D), 3.7**2 * q, rtol=1e-10)
        par = relaxed_q(form, D + E) + relaxed_q(form, D - E) - 2 * q - 2 * relaxed_q(form, E)
        assert np.max(np.abs(par)) < 1e-9
        assert relaxed_q(form, np.zeros((2, 2))) == 0
