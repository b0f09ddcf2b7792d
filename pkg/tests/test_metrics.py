import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mhdstab.fespace import FieldVector, build_bdm_space, build_cg_vector_space
from mhdstab.forms import StabParams
from mhdstab.mesh import build_structured_tet_mesh
from mhdstab.metrics import (
    ErrorReport,
    error_indicators,
    l2_error,
    norm_1h,
    norm_magnetic,
    observed_rate,
    seminorm_cip,
    seminorm_upwind,
)
from mhdstab.mms import ManufacturedCase
from mhdstab.solver import MHDSolver, SolutionState, run_transient

from .oracles import DenseOracle, face_geometry, face_traces


def lin(A, b=None):
    A = np.asarray(A, float)
    b = np.zeros(3) if b is None else np.asarray(b, float)
    value = lambda x, t: x @ A.T + b
    grad = lambda x, t: np.broadcast_to(A, (len(x), 3, 3)).copy()
    return value, grad


SHEAR = lin([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
IDENT = lin(np.eye(3))


def test_norm_1h_zero(mesh2):
    V = build_bdm_space(mesh2, 1)
    assert norm_1h(V.zero(), 10.0) == 0.0


def test_norm_1h_shear_volume_part(mesh1):
    V = build_bdm_space(mesh1, 1)
    u = V.interpolate(SHEAR[0])
    # interior jumps vanish; a negligible penalty isolates the volume part
    assert abs(norm_1h(u, 1e-300) - math.sqrt(0.5)) < 1e-13


def test_norm_1h_exact_field(mesh2):
    V = build_bdm_space(mesh2, 1)
    u = V.interpolate(IDENT[0])
    assert norm_1h(u, 10.0, exact=IDENT, t=0.0) < 1e-12


def test_seminorms_vanish_on_continuous(mesh2):
    V = build_bdm_space(mesh2, 1)
    W = build_cg_vector_space(mesh2, 1)
    u = V.interpolate(SHEAR[0])
    rng = np.random.default_rng(0)
    chi = FieldVector(V, rng.normal(size=V.n_dofs))
    theta = FieldVector(W, rng.normal(size=W.n_dofs))
    assert seminorm_upwind(u, chi) < 1e-13
    assert seminorm_cip(u, theta) < 1e-13
    v = FieldVector(V, rng.normal(size=V.n_dofs))
    assert seminorm_upwind(v, None) == 0.0
    assert seminorm_upwind(v, V.zero()) == 0.0


def test_upwind_constant_wind_single_face(two_tet_mesh):
    V = build_bdm_space(two_tet_mesh, 1)
    rng = np.random.default_rng(1)
    v = FieldVector(V, rng.normal(size=V.n_dofs))
    a = np.array([0.3, -1.2, 0.7])
    chi = V.interpolate(lambda x, t: np.tile(a, (len(x), 1)))
    f = int(two_tet_mesh.interior_faces[0])
    x, w, n, tets, _ = face_geometry(two_tet_mesh, f)
    (v0, _), (v1, _) = face_traces(DenseOracle(V), x, tets)
    jump = np.einsum("qjc,j->qc", v0 - v1, v.coeffs)
    expected = abs(a @ n) * float(w @ np.sum(jump**2, -1))
    assert abs(seminorm_upwind(v, chi) ** 2 - expected) < 1e-12 * max(1.0, expected)


def test_cip_unit_floor(mesh2):
    V = build_bdm_space(mesh2, 1)
    W = build_cg_vector_space(mesh2, 1)
    v = FieldVector(V, np.random.default_rng(2).normal(size=V.n_dofs))
    assert seminorm_cip(v, None) == seminorm_cip(v, W.zero())


def test_magnetic_norms(mesh1):
    W = build_cg_vector_space(mesh1, 1, normal_bc=False)
    B = W.interpolate(IDENT[0])
    assert norm_magnetic("stab3f", W.zero(), 1.0) == 0.0
    assert abs(norm_magnetic("stab3f", B, 1.0) - math.sqrt(12.0)) < 1e-12
    assert abs(norm_magnetic("nostab", B, 1.0) - math.sqrt(12.0)) < 1e-12
    assert abs(norm_magnetic("stab4f", B, 0.5, chi=None) - math.sqrt(1.5)) < 1e-12
    assert abs(norm_magnetic("common", B, 0.5) - math.sqrt(1.5)) < 1e-12
    with pytest.raises(ValueError):
        norm_magnetic("bogus", B, 1.0)


@given(st.floats(-50, 50), st.integers(0, 1000))
def test_homogeneity(scale, seed):
    mesh = build_structured_tet_mesh(1)
    V = build_bdm_space(mesh, 1)
    W = build_cg_vector_space(mesh, 1)
    rng = np.random.default_rng(seed)
    v = FieldVector(V, rng.normal(size=V.n_dofs))
    b = FieldVector(W, rng.normal(size=W.n_dofs))
    chi = FieldVector(V, rng.normal(size=V.n_dofs))
    sv = FieldVector(V, scale * v.coeffs)
    sb = FieldVector(W, scale * b.coeffs)
    for f, g in (
        (lambda: norm_1h(v, 10.0), lambda: norm_1h(sv, 10.0)),
        (lambda: seminorm_upwind(v, chi), lambda: seminorm_upwind(sv, chi)),
        (lambda: seminorm_cip(v, b), lambda: seminorm_cip(sv, b)),
        (lambda: norm_magnetic("stab4f", b, 0.1, chi=chi), lambda: norm_magnetic("stab4f", sb, 0.1, chi=chi)),
    ):
        base = f()
        assert abs(g() - abs(scale) * base) <= 1e-12 * max(1.0, abs(scale) * base)


def test_l2_error_of_interpolant(mesh2):
    W = build_cg_vector_space(mesh2, 1)
    assert l2_error(W.interpolate(IDENT[0]), IDENT[0], 0.0) < 1e-13


# --- indicators ------------------------------------------------------------


class AffineCase:
    """Steady solution that the k = 1 spaces represent exactly."""

    nu_s = 1.0
    nu_m = 1.0
    u, grad_u = SHEAR
    B, grad_B = IDENT

    @staticmethod
    def p(x, t):
        return np.full(len(x), 0.3)


def test_indicators_vanish_for_representable_solution(mesh2):
    solver = MHDSolver(mesh2, StabParams(scheme="stab3f", tau=0.5))
    c = AffineCase
    states = [
        SolutionState(
            t,
            solver.V.interpolate(c.u, t),
            solver.Q.interpolate(lambda x, t: c.p(x, t), t),
            solver.W.interpolate(c.B, t),
        )
        for t in (0.0, 0.5, 1.0)
    ]
    traj = SimpleNamespace(solver=solver, states=states, wall_time=0.0)
    for scheme in ("stab3f", "nostab"):
        for variant in ("full", "common"):
            rep = error_indicators(scheme, traj, c, variant=variant)
            assert max(rep.e_u, rep.e_p, rep.e_B) <= 1e-11


def test_indicator_decomposition(mesh2):
    case = ManufacturedCase("example1", 1e-2, 1e-2)
    traj = run_transient("stab4f", case, mesh2, StabParams(nu_s=1e-2, nu_m=1e-2), 0.25, 0.5)
    rep = error_indicators("stab4f", traj, case)
    pt = rep.parts
    assert math.isclose(pt["u_int_stab"], 1e-2 * pt["u_int_1h"] + pt["u_int_upw"] + pt["u_int_cip"], rel_tol=1e-12)
    assert math.isclose(rep.e_u, pt["u_l2_T"] + math.sqrt(pt["u_int_stab"]), rel_tol=1e-12)
    assert math.isclose(rep.e_B, pt["B_l2_T"] + math.sqrt(pt["B_int_M"]), rel_tol=1e-12)
    assert math.isclose(rep.e_p, math.sqrt(pt["p_int_l2"]), rel_tol=1e-12)
    common = error_indicators("stab4f", traj, case, variant="common")
    assert common.parts["u_int_cip"] == 0.0
    assert common.e_u <= rep.e_u and common.e_B <= rep.e_B
    assert rep.dofs == {"u": traj.solver.V.n_dofs, "p": 48, "B": traj.solver.W.n_dofs, "phi": 27}


def test_indicators_reject_mismatch(mesh2):
    case = ManufacturedCase("example1", 1.0, 1.0)
    traj = run_transient("stab3f", case, mesh2, StabParams(), 0.25, 0.25)
    with pytest.raises(ValueError):
        error_indicators("stab3f", traj, ManufacturedCase("example1", 0.5, 1.0))
    with pytest.raises(ValueError):
        error_indicators("stab3f", traj, case, variant="other")


def test_error_report_validation():
    with pytest.raises(ValueError):
        ErrorReport(level=2, h=0.5, dofs={}, e_u=-1.0, e_p=0.0, e_B=0.0)
    with pytest.raises(ValueError):
        ErrorReport(level=2, h=0.5, dofs={}, e_u=0.0, e_p=float("nan"), e_B=0.0)


@pytest.mark.parametrize(
    "errors,expected", [([1.0, 0.5], 1.0), ([1.0, 0.25], 2.0), ([1.0, 2**-1.5], 1.5)]
)
def test_observed_rate_examples(errors, expected):
    assert abs(observed_rate(errors, [1.0, 0.5])[0] - expected) < 1e-14


def test_observed_rate_edge_cases():
    assert math.isnan(observed_rate([1.0, 0.0], [1.0, 0.5])[0])
    assert len(observed_rate([1.0, 0.5, 0.25], [1.0, 0.5, 0.25])) == 2
    with pytest.raises(ValueError):
        observed_rate([1.0], [1.0, 0.5])
