"""Norms, error indicators and observed convergence rates.

The error of a discrete field against an exact one is evaluated at
quadrature points with the exact values and derivatives supplied in closed
form, so no auxiliary projection is involved. Exact solutions are smooth,
hence on interior faces the jumps of the error are those of the discrete
field; on boundary faces the trace of the error enters ``norm_1h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fespace import FieldVector, divergence
from .forms import _stack_sides, face_linf_weight, quad_degree

ERROR_DEGREE = 6


def _sym(g):
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def _volume_error(fv: FieldVector, exact, t, degree):
    """Values and gradients of exact - discrete at volume quadrature points."""
    tab = fv.space.volume_tables(degree)
    vals, grads = fv.on_volume(degree)
    if exact is not None:
        value_fn, grad_fn = exact
        x = tab.x.reshape(-1, 3)
        vals = np.asarray(value_fn(x, t)).reshape(vals.shape) - vals
        grads = np.asarray(grad_fn(x, t)).reshape(grads.shape) - grads
    return tab.w, vals, grads


def _face_jump_sq(fv: FieldVector, degree):
    """Per interior face: (||[v]||_f^2, ||[grad v]||_f^2).

    Jumps are evaluated at quadrature points, so a continuous field gives
    exactly representable tiny values instead of a cancelling quadratic form.
    """
    space = fv.space
    ft = space.face_tables(degree)
    cache = space.__dict__.setdefault("_stack_cache", {})
    if degree not in cache:
        cache[degree] = _stack_sides(ft)
    dofs, jv, jg, _, _ = cache[degree]
    c = fv.coeffs[dofs]
    val = np.einsum("mqjc,mj->mqc", jv, c)
    grad = np.einsum("mqjcd,mj->mqcd", jg, c)
    return (
        np.sum(ft.w * np.sum(val**2, -1), axis=1),
        np.sum(ft.w * np.sum(grad**2, axis=(-1, -2)), axis=1),
    )


def norm_1h(fv: FieldVector, mu_a: float, exact=None, t: float = 0.0, degree: int = ERROR_DEGREE) -> float:
    """||eps_h(e)||^2 + mu_a sum_f h_f^-1 ||[e]||_f^2 over all faces, square-rooted.

    ``e`` is ``fv`` itself, or ``exact - fv`` when ``exact = (u, grad_u)``.
    """
    w, _, grads = _volume_error(fv, exact, t, degree)
    vol = float(np.sum(w * np.sum(_sym(grads) ** 2, axis=(-1, -2))))

    space = fv.space
    fdeg = quad_degree(space.order)
    jv, _ = _face_jump_sq(fv, fdeg)
    ft = space.face_tables(fdeg)
    interior = float(np.sum(jv / ft.hf))

    fb = space.face_tables(ERROR_DEGREE, boundary=True)
    o = fb.owner
    trace = np.einsum("mqjc,mj->mqc", o.vals, fv.coeffs[o.dofs])
    if exact is not None:
        trace = np.asarray(exact[0](fb.x.reshape(-1, 3), t)).reshape(trace.shape) - trace
    boundary = float(np.sum(np.sum(fb.w * np.sum(trace**2, -1), axis=1) / fb.hf))
    return math.sqrt(vol + mu_a * (interior + boundary))


def seminorm_upwind(fv: FieldVector, chi: FieldVector | None) -> float:
    """(sum_f || |chi . n_f|^{1/2} [v] ||_f^2)^{1/2} over interior faces."""
    if chi is None:
        return 0.0
    deg = quad_degree(fv.space.order)
    ft = fv.space.face_tables(deg)
    dofs, jv, _, _, _ = _stack_sides(ft)
    jump = np.einsum("mqjc,mj->mqc", jv, fv.coeffs[dofs])
    fc = chi.space.face_tables(deg)
    c = chi.coeffs
    cv = 0.5 * (
        np.einsum("mqjc,mj->mqc", fc.owner.vals, c[fc.owner.dofs])
        + np.einsum("mqjc,mj->mqc", fc.neighbor.vals, c[fc.neighbor.dofs])
    )
    chin = np.abs(np.einsum("mqc,mc->mq", cv, fc.normals))
    return math.sqrt(float(np.sum(ft.w * chin * np.sum(jump**2, -1))))


def seminorm_cip(fv: FieldVector, theta: FieldVector | None) -> float:
    """sum_f max{||theta||^2_inf, 1} (||[v]||^2 + h_f^2 ||[grad v]||^2), rooted."""
    deg = quad_degree(fv.space.order)
    jv, jg = _face_jump_sq(fv, deg)
    ft = fv.space.face_tables(deg)
    wf = face_linf_weight(theta, ft.faces, fv.space.mesh)
    return math.sqrt(float(np.sum(wf * (jv + ft.hf**2 * jg))))


def _grad_jump_weighted(fv: FieldVector, chi, mu_k):
    deg = quad_degree(fv.space.order)
    _, jg = _face_jump_sq(fv, deg)
    ft = fv.space.face_tables(deg)
    wf = face_linf_weight(chi, ft.faces, fv.space.mesh)
    return mu_k * float(np.sum(wf * ft.hf**2 * jg))


def norm_magnetic(
    scheme: str,
    fv: FieldVector,
    nu_m: float,
    mu_k: float = 0.01,
    chi: FieldVector | None = None,
    exact=None,
    t: float = 0.0,
    degree: int = ERROR_DEGREE,
) -> float:
    """Magnetic energy norm of ``fv`` (or of ``exact - fv``).

    stab3f / nostab: nu_M ||grad B||^2 + ||div B||^2.
    stab4f: nu_M ||grad B||^2 + mu_K sum_f max{1, ||chi||^2_inf} h_f^2 ||[grad B]||_f^2.
    ``scheme="common"`` keeps only nu_M ||grad B||^2.
    """
    w, _, grads = _volume_error(fv, exact, t, degree)
    total = nu_m * float(np.sum(w * np.sum(grads**2, axis=(-1, -2))))
    if scheme in ("stab3f", "nostab"):
        total += float(np.sum(w * divergence(grads) ** 2))
    elif scheme == "stab4f":
        total += _grad_jump_weighted(fv, chi, mu_k)
    elif scheme != "common":
        raise ValueError(f"unknown scheme {scheme!r}")
    return math.sqrt(total)


def l2_error(fv: FieldVector, fn, t: float, degree: int = ERROR_DEGREE) -> float:
    tab = fv.space.volume_tables(degree)
    vals, _ = fv.on_volume(degree)
    ex = np.asarray(fn(tab.x.reshape(-1, 3), t)).reshape(vals.shape)
    return math.sqrt(float(np.sum(tab.w * np.sum((ex - vals) ** 2, -1))))


# --- indicators ----------------------------------------------------------


@dataclass
class ErrorReport:
    level: int | None
    h: float
    dofs: dict
    e_u: float
    e_p: float
    e_B: float
    parts: dict = field(default_factory=dict)
    wall_s: float = 0.0

    def __post_init__(self):
        for name in ("e_u", "e_p", "e_B"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _trapezoid(values, dt):
    v = np.asarray(values, dtype=float)
    return float(dt * (0.5 * v[0] + v[1:-1].sum() + 0.5 * v[-1])) if len(v) > 1 else 0.0


def error_indicators(scheme: str, trajectory, case, *, variant: str = "full", level=None) -> ErrorReport:
    """e_u, e_p, e_B of a transient run against the manufactured solution.

    ``variant="full"`` uses each scheme's own stabilization norm; ``"common"``
    keeps only the parts shared by all schemes (nu_S ||.||_1h^2 + |.|_upw^2
    for velocity, nu_M ||grad .||^2 for the magnetic field).
    """
    if variant not in ("full", "common"):
        raise ValueError(f"unknown variant {variant!r}")
    solver = trajectory.solver
    params = solver.params
    if (params.nu_s, params.nu_m) != (case.nu_s, case.nu_m):
        raise ValueError("trajectory viscosities do not match the manufactured case")
    states = trajectory.states
    if len(states) < 2:
        raise ValueError("trajectory must contain at least one step")
    dts = np.diff([s.t for s in states])
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=0):
        raise ValueError("trajectory time steps are not uniform")
    tau = float(dts[0])

    u_exact = (case.u, case.grad_u)
    B_exact = (case.B, case.grad_B)
    mag_scheme = scheme if variant == "full" else "common"
    one_h, upw, cip, mag, pres = [], [], [], [], []
    for st in states:
        one_h.append(norm_1h(st.u, params.mu_a, u_exact, st.t) ** 2)
        upw.append(seminorm_upwind(st.u, st.u) ** 2)
        cip.append(seminorm_cip(st.u, st.B) ** 2 if variant == "full" else 0.0)
        mag.append(norm_magnetic(mag_scheme, st.B, params.nu_m, params.mu_k, st.u, B_exact, st.t) ** 2)
        pres.append(l2_error(st.p, lambda x, t: case.p(x, t)[:, None], st.t) ** 2)

    stab = params.nu_s * np.asarray(one_h) + np.asarray(upw) + np.asarray(cip)
    int_stab = _trapezoid(stab, tau)
    int_mag = _trapezoid(mag, tau)
    # p_h has no value at t = 0: the first interval uses its right endpoint
    int_p = tau * pres[1] + _trapezoid(pres[1:], tau)

    final = states[-1]
    u_T = l2_error(final.u, case.u, final.t)
    B_T = l2_error(final.B, case.B, final.t)
    parts = {
        "u_l2_T": u_T,
        "u_int_1h": _trapezoid(one_h, tau),
        "u_int_upw": _trapezoid(upw, tau),
        "u_int_cip": _trapezoid(cip, tau),
        "u_int_stab": int_stab,
        "B_l2_T": B_T,
        "B_int_M": int_mag,
        "p_int_l2": int_p,
    }
    mesh = solver.mesh
    dofs = {name: n for name, n in solver.sizes}
    return ErrorReport(
        level=level,
        h=float(mesh.h),
        dofs=dofs,
        e_u=u_T + math.sqrt(int_stab),
        e_p=math.sqrt(int_p),
        e_B=B_T + math.sqrt(int_mag),
        parts=parts,
        wall_s=getattr(trajectory, "wall_time", 0.0),
    )


def observed_rate(errors, hs) -> list:
    """Pairwise slopes log(e_i / e_{i+1}) / log(h_i / h_{i+1})."""
    if len(errors) != len(hs):
        raise ValueError("errors and hs differ in length")
    out = []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        if e0 <= 0 or e1 <= 0 or h0 <= 0 or h1 <= 0 or h0 == h1:
            out.append(float("nan"))
        else:
            out.append(math.log(e0 / e1) / math.log(h0 / h1))
    return out
