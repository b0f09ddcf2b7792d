"""Quadrature on the reference tetrahedron and triangle.

Rules are collapsed (Duffy) tensor products of Gauss-Jacobi rules, which are
exact for any requested degree and have positive weights. Points are stored
in barycentric coordinates so they can be pushed to any affine simplex
without a reference-to-physical Jacobian in the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 6


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # reference coordinates, (nq, dim)
    weights: np.ndarray  # sum to the reference measure
    exact_degree: int

    @property
    def bary(self) -> np.ndarray:
        """Barycentric coordinates (nq, dim + 1); column 0 is 1 - sum(points)."""
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])

    @property
    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def __len__(self):
        return len(self.weights)


def _gauss_jacobi01(m, alpha):
    """m-point rule on [0, 1] for the weight (1 - s)^alpha."""
    x, w = roots_jacobi(m, alpha, 0.0)
    return (1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def _collapsed_tet(m):
    a, wa = _gauss_jacobi01(m, 2)
    b, wb = _gauss_jacobi01(m, 1)
    c, wc = _gauss_jacobi01(m, 0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = wa[:, None, None] * wb[None, :, None] * wc[None, None, :]
    x = A
    y = B * (1 - A)
    z = C * (1 - A) * (1 - B)
    pts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    return pts, W.ravel()


@lru_cache(maxsize=None)
def _collapsed_tri(m):
    a, wa = _gauss_jacobi01(m, 1)
    b, wb = _gauss_jacobi01(m, 0)
    A, B = np.meshgrid(a, b, indexing="ij")
    W = wa[:, None] * wb[None, :]
    pts = np.column_stack([A.ravel(), (B * (1 - A)).ravel()])
    return pts, W.ravel()


def _check(degree, unchecked):
    if not unchecked and not 1 <= degree <= MAX_DEGREE:
        raise QuadratureError(f"unsupported quadrature degree {degree} (1..{MAX_DEGREE})")


def tet_rule(degree: int, *, unchecked: bool = False) -> QuadratureRule:
    """Rule on {x, y, z >= 0, x + y + z <= 1}, exact to ``degree``."""
    _check(degree, unchecked)
    m = degree // 2 + 1
    pts, w = _collapsed_tet(m)
    return QuadratureRule(pts, w, degree)


def tri_rule(degree: int, *, unchecked: bool = False) -> QuadratureRule:
    """Rule on {x, y >= 0, x + y <= 1}, exact to ``degree``."""
    _check(degree, unchecked)
    m = degree // 2 + 1
    pts, w = _collapsed_tri(m)
    return QuadratureRule(pts, w, degree)


def push_forward(rule: QuadratureRule, vertices) -> tuple[np.ndarray, np.ndarray]:
    """Map a reference rule onto an affine simplex given by its vertices.

    Returns physical points (nq, 3) and weights scaled to the simplex
    measure.
    """
    v = np.asarray(vertices, dtype=float)
    dim = rule.points.shape[1]
    if v.shape[0] != dim + 1:
        raise QuadratureError("vertex count does not match the rule's dimension")
    edges = v[1:] - v[0]
    if dim == 3:
        measure = abs(np.linalg.det(edges)) / 6.0
    else:
        measure = 0.5 * np.linalg.norm(np.cross(edges[0], edges[1]))
    if measure <= 1e-300:
        raise QuadratureError("degenerate geometry (zero measure)")
    ref_measure = 1.0 / 6.0 if dim == 3 else 0.5
    pts = rule.bary @ v
    return pts, rule.weights * (measure / ref_measure)
