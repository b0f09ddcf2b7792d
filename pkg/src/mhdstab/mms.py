"""Manufactured solutions on the unit cube and their forcing terms.

Both examples share the spatial velocity profile

    U(x) = (sin(pi x) cos(pi y) cos(pi z),
            sin(pi y) cos(pi z) cos(pi x),
            -2 sin(pi z) cos(pi x) cos(pi y)),

the magnetic field B = cos(pi t / 4) (sin(pi y), sin(pi z), sin(pi x)) and
the pressure p = cos(pi t / 4) (sin x + sin y - 2 sin z). Example 1 scales U
by cos(pi t / 4), example 2 by t^6.

Forcings substitute the exact fields into

    f = d_t u - nu_S div eps(u) + (grad u) u + B x curl B - grad p
    G = d_t B + nu_M curl curl B - curl(u x B)

using closed-form derivatives. For these fields div eps(u) = -3/2 pi^2 u,
curl curl B = pi^2 B and curl(u x B) = (grad u) B - (grad B) u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PI = np.pi


def _amp_b(t):
    return np.cos(0.25 * PI * t), -0.25 * PI * np.sin(0.25 * PI * t)


def _amp_u(name, t):
    if name == "example1":
        return _amp_b(t)
    return t**6, 6.0 * t**5


def _trig(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    s = np.sin(PI * x)
    c = np.cos(PI * x)
    return s[:, 0], s[:, 1], s[:, 2], c[:, 0], c[:, 1], c[:, 2]


def velocity_profile(x):
    sx, sy, sz, cx, cy, cz = _trig(x)
    return np.column_stack([sx * cy * cz, sy * cz * cx, -2.0 * sz * cx * cy])


def velocity_profile_grad(x):
    """J[i, c, d] = d U_c / d x_d."""
    sx, sy, sz, cx, cy, cz = _trig(x)
    J = np.empty((len(sx), 3, 3))
    J[:, 0] = PI * np.column_stack([cx * cy * cz, -sx * sy * cz, -sx * cy * sz])
    J[:, 1] = PI * np.column_stack([-sy * cz * sx, cy * cz * cx, -sy * sz * cx])
    J[:, 2] = PI * np.column_stack([2 * sz * sx * cy, 2 * sz * cx * sy, -2 * cz * cx * cy])
    return J


def magnetic_profile(x):
    sx, sy, sz, _, _, _ = _trig(x)
    return np.column_stack([sy, sz, sx])


def magnetic_profile_grad(x):
    _, _, _, cx, cy, cz = _trig(x)
    J = np.zeros((len(cx), 3, 3))
    J[:, 0, 1] = PI * cy
    J[:, 1, 2] = PI * cz
    J[:, 2, 0] = PI * cx
    return J


@dataclass(frozen=True)
class ManufacturedCase:
    name: str
    nu_s: float
    nu_m: float

    def __post_init__(self):
        if self.name not in ("example1", "example2"):
            raise ValueError(f"unknown manufactured case {self.name!r}")

    # --- exact fields --------------------------------------------------

    def u(self, x, t):
        a, _ = _amp_u(self.name, t)
        return a * velocity_profile(x)

    def grad_u(self, x, t):
        a, _ = _amp_u(self.name, t)
        return a * velocity_profile_grad(x)

    def dt_u(self, x, t):
        _, da = _amp_u(self.name, t)
        return da * velocity_profile(x)

    def B(self, x, t):
        a, _ = _amp_b(t)
        return a * magnetic_profile(x)

    def grad_B(self, x, t):
        a, _ = _amp_b(t)
        return a * magnetic_profile_grad(x)

    def curl_B(self, x, t):
        a, _ = _amp_b(t)
        _, _, _, cx, cy, cz = _trig(x)
        return -a * PI * np.column_stack([cz, cx, cy])

    def p(self, x, t):
        a, _ = _amp_b(t)
        x = np.atleast_2d(x)
        return a * (np.sin(x[:, 0]) + np.sin(x[:, 1]) - 2.0 * np.sin(x[:, 2]))

    def grad_p(self, x, t):
        a, _ = _amp_b(t)
        x = np.atleast_2d(x)
        return a * np.column_stack([np.cos(x[:, 0]), np.cos(x[:, 1]), -2.0 * np.cos(x[:, 2])])

    # --- forcings ------------------------------------------------------

    def f(self, x, t):
        u = self.u(x, t)
        Gu = self.grad_u(x, t)
        B = self.B(x, t)
        return (
            self.dt_u(x, t)
            + self.nu_s * 1.5 * PI**2 * u
            + np.einsum("ncd,nd->nc", Gu, u)
            + np.cross(B, self.curl_B(x, t))
            - self.grad_p(x, t)
        )

    def G(self, x, t):
        a, da = _amp_b(t)
        Bp = magnetic_profile(x)
        u = self.u(x, t)
        B = a * Bp
        curl_uxB = np.einsum("ncd,nd->nc", self.grad_u(x, t), B) - np.einsum(
            "ncd,nd->nc", self.grad_B(x, t), u
        )
        return da * Bp + self.nu_m * PI**2 * B - curl_uxB

    def magnetic_boundary_data(self, x, n, t):
        """n x (u x B) - nu_M n x curl B: the boundary flux of the magnetic
        equation, which the weak form needs as data when it is nonzero."""
        u = self.u(x, t)
        B = self.B(x, t)
        return np.cross(n, np.cross(u, B)) - self.nu_m * np.cross(n, self.curl_B(x, t))

    # --- uniform accessors ---------------------------------------------

    def eval_exact(self, tag: str, x, t):
        if tag not in ("u", "B", "p"):
            raise ValueError(f"unknown field tag {tag!r}")
        out = getattr(self, tag)(np.atleast_2d(x), t)
        return out[0] if np.ndim(x) == 1 else out

    def eval_forcing(self, tag: str, x, t):
        if tag not in ("f", "G"):
            raise ValueError(f"unknown forcing tag {tag!r}")
        out = getattr(self, tag)(np.atleast_2d(x), t)
        return out[0] if np.ndim(x) == 1 else out


def eval_exact(case: ManufacturedCase, tag: str, x, t):
    return case.eval_exact(tag, x, t)


def eval_forcing(case: ManufacturedCase, tag: str, x, t):
    return case.eval_forcing(tag, x, t)


def solenoidality_check(case: ManufacturedCase, samples: int = 1000, seed: int = 0):
    """Max |div u| and |div B| over random space-time samples."""
    rng = np.random.default_rng(seed)
    x = rng.random((samples, 3))
    t = rng.random(samples)
    du = max(abs(np.trace(case.grad_u(x[i : i + 1], t[i])[0])) for i in range(samples))
    dB = max(abs(np.trace(case.grad_B(x[i : i + 1], t[i])[0])) for i in range(samples))
    return float(du), float(dB)
