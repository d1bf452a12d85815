import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import U_THICK, U_TWIN
from multiwell_plates.density import MultiWellModel
from multiwell_plates.functionals import (
    ConstraintError,
    LoadField,
    PlateState,
    constraint_residual,
    energy_cvk,
    energy_kl,
    energy_lvk,
    energy_vk,
    force_work,
    functional_record,
    membrane_energy,
)
from multiwell_plates.geometry import Field, MidplaneGrid, cylinder_profile, isometry_lift_profile, profile_field
from multiwell_plates.linalg import Well, exp_skew
from multiwell_plates.relaxed import build_relaxed

COMPATIBLE_U = ("-(2/3)*x1**3", "0")


def form_for(U=np.eye(3)):
    return build_relaxed(MultiWellModel((Well(U),)), 0)


class TestBending:
    def test_flat_kirchhoff_state(self):
        grid = MidplaneGrid.square(21)
        for U in (np.eye(3), U_TWIN):
            lift = isometry_lift_profile("0", [1, 0], U, grid)
            assert energy_kl(PlateState(0, y=lift.y), form_for(U)) == pytest.approx(0.0, abs=1e-14)

    def test_cylinder_value_and_scaling(self):
        grid = MidplaneGrid.square(201)
        values = {}
        for r in (2.0, 4.0):
            lift = isometry_lift_profile(cylinder_profile(r), [1, 0], np.eye(3), grid)
            values[r] = energy_kl(PlateState(0, y=lift.y), form_for())
        assert values[2.0] == pytest.approx(1 / 48, rel=0.02)
        assert values[4.0] / values[2.0] == pytest.approx(0.25, rel=0.02)

    def test_missing_deformation(self, unit_grid):
        with pytest.raises(ValueError):
            energy_kl(PlateState.zero(unit_grid), form_for())

    def test_zero_displacement(self, unit_grid):
        st0 = PlateState.zero(unit_grid)
        for fn in (energy_vk, energy_lvk, energy_cvk):
            assert fn(st0, form_for()) == 0.0

    def test_compatible_pair(self, unit_grid):
        state = PlateState.from_expr(unit_grid, 0, COMPATIBLE_U, "x1**2")
        form = form_for()
        assert constraint_residual(state, form) < 1e-8
        assert membrane_energy(state, form) < 1e-12
        assert energy_vk(state, form) == pytest.approx(1 / 3, abs=1e-12)
        assert energy_cvk(state, form) == pytest.approx(energy_vk(state, form), abs=1e-10)

    def test_quartic_membrane_term(self):
        grid = MidplaneGrid.square(101)
        state = PlateState.from_expr(grid, 0, ("0", "0"), "x1**2")
        form = form_for()
        assert energy_lvk(state, form) == pytest.approx(1 / 3, abs=1e-12)
        vk = energy_vk(state, form, rule="simpson")
        # (1/8) * 2 * 16 * integral of x1^4 over the unit square = 1/20
        assert vk == pytest.approx(1 / 3 + 1 / 20, abs=1e-8)  # Simpson is exact only to cubics
        assert vk > energy_lvk(state, form)

    def test_cvk_requires_constraint(self, unit_grid):
        state = PlateState.from_expr(unit_grid, 0, ("0", "0"), "x1**2")
        with pytest.raises(ConstraintError) as err:
            energy_cvk(state, form_for())
        assert err.value.residual == pytest.approx(1.0, abs=1e-12)

    def test_cvk_profile_state_and_scaling(self, unit_grid):
        form = form_for(U_THICK)
        v = profile_field("t**2", [0.6, 0.8], U_THICK, unit_grid)
        base = energy_cvk(PlateState(0, v=v, profile=("t**2", (0.6, 0.8))), form)
        scaled = energy_cvk(PlateState(0, v=v.scaled(2.5), profile=("t**2", (0.6, 0.8))), form)
        assert base > 0
        assert scaled == pytest.approx(6.25 * base, rel=1e-10)
        with pytest.raises(ConstraintError):
            energy_cvk(PlateState(0, v=v), form)

    def test_nonnegative_on_random_polynomials(self, rng, unit_grid):
        for _ in range(5):
            c = rng.normal(size=6)
            v = f"{c[0]}*x1**2 + {c[1]}*x1*x2 + {c[2]}*x2**3"
            u = (f"{c[3]}*x1*x2", f"{c[4]}*x2**2 + {c[5]}*x1")
            state = PlateState.from_expr(unit_grid, 0, u, v)
            for U in (np.eye(3), U_TWIN):
                assert energy_vk(state, form_for(U)) >= 0
                assert energy_lvk(state, form_for(U)) >= 0

    def test_refinement_order(self):
        # stencil derivatives and trapezoid weights are both second order
        vals = []
        for n in (21, 41, 81):
            grid = MidplaneGrid.square(n)
            X, Y = grid.coords[..., 0], grid.coords[..., 1]
            v = Field(grid, np.sin(2 * X) * np.cos(Y))
            u = Field(grid, np.stack([np.cos(X + Y), X * np.sin(Y)], -1))
            vals.append(energy_vk(PlateState(0, u, v), form_for(U_TWIN)))
        d1, d2 = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
        assert np.log2(d1 / d2) >= 1.8

    def test_constraint_residual_trivial(self, unit_grid):
        assert constraint_residual(PlateState.zero(unit_grid), Well(np.eye(3))) == 0.0


class TestLoads:
    def test_moment_of_the_square(self, unit_grid):
        load = LoadField.from_polynomial(unit_grid, [{}, {}, {"x1": 1.0}])
        state = PlateState.from_expr(unit_grid, 0, v="x1")
        assert force_work(state, load, np.eye(3), np.eye(3), "simpson") == pytest.approx(1 / 12, abs=1e-14)
        flip = exp_skew([np.pi, 0, 0])
        assert force_work(state, load, flip, np.eye(3), "simpson") == pytest.approx(-1 / 12, abs=1e-14)
        assert force_work(PlateState.zero(unit_grid), load, np.eye(3), np.eye(3)) == 0.0

    def test_resultant_must_vanish(self, unit_grid):
        load = LoadField.from_polynomial(unit_grid, [{"1": 1.0}, {}, {}])
        assert not load.mean_zero
        state = PlateState.from_expr(unit_grid, 0, v="x1")
        with pytest.raises(ValueError):
            force_work(state, load, np.eye(3), np.eye(3))

    def test_constant_shift_of_v_is_free(self, unit_grid):
        load = LoadField.from_polynomial(unit_grid, [{}, {}, {"x1": 1.0, "x2^2": 3.0, "1": -0.25}])
        a = PlateState.from_expr(unit_grid, 0, v="x1**2")
        b = PlateState.from_expr(unit_grid, 0, v="x1**2 + 7")
        wa = force_work(a, load, np.eye(3), np.eye(3), "simpson")
        wb = force_work(b, load, np.eye(3), np.eye(3), "simpson")
        assert wa == pytest.approx(wb, abs=1e-12)

    def test_unknown_monomial(self, unit_grid):
        with pytest.raises(ValueError):
            LoadField.from_polynomial(unit_grid, [{"x1^3": 1.0}, {}, {}])


class TestSerialization:
    def test_state_round_trip(self, tmp_path, unit_grid):
        state = PlateState.from_expr(unit_grid, 1, COMPATIBLE_U, "x1**2")
        state.to_csv(tmp_path / "s.csv")
        back = PlateState.from_csv(tmp_path / "s.csv", unit_grid, 1)
        assert np.array_equal(back.u.values, state.u.values)
        assert np.array_equal(back.v.values, state.v.values)

    def test_load_round_trip(self, tmp_path, unit_grid):
        load = LoadField.from_polynomial(unit_grid, [{"x1": 2.0}, {}, {"x1*x2": 1.0}])
        load.to_csv(tmp_path / "f.csv")
        back = LoadField.from_csv(tmp_path / "f.csv", unit_grid)
        assert np.array_equal(back.f.values, load.f.values)
        assert back.mean_zero

    def test_record(self, unit_grid):
        rec = functional_record("vk", 0, 0.5, unit_grid)
        assert rec == {"functional": "vk", "well": 0, "value": 0.5, "grid": [41, 41]}

    def test_mixed_grids_rejected(self):
        a, b = MidplaneGrid.square(9), MidplaneGrid.square(11)
        with pytest.raises(ValueError):
            PlateState(0, Field.zeros(a, (2,)), Field.zeros(b))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_bending_is_quadratic(a, b):
    grid = MidplaneGrid.square(11)
    v = Field.from_expr(grid, "x1**2 - x1*x2 + x2**3")
    form = form_for(U_TWIN)
    st1 = PlateState(0, Field.zeros(grid, (2,)), v.scaled(a))
    st2 = PlateState(0, Field.zeros(grid, (2,)), v.scaled(b))
    e = energy_lvk(PlateState(0, Field.zeros(grid, (2,)), v), form)
    assert energy_lvk(st1, form) == pytest.approx(a * a * e, rel=1e-10, abs=1e-14)
    assert energy_lvk(st2, form) == pytest.approx(b * b * e, rel=1e-10, abs=1e-14)
