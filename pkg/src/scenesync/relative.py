"""Relative attributes between object pairs and their Jacobians.

For an ordered pair (v, v') the 15-dim edge vector is (s_e; r_e; t_e):

* s_e[3i+j] = size_v[i] - size_v'[j]   (9 entries, all scale pairs)
* r_e: Euler angles of R_v^T R_v' (v' expressed in v's local frame)
* t_e = R_v^T (t_v' - t_v)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rotation import (
    euler_extraction_jacobian,
    euler_to_rotation,
    euler_to_rotation_batch,
    rotation_derivatives,
    rotation_to_euler_batch,
    wrap_angle,
)
from .scene import ATTR_DIM, ClassTable, SceneLayout, S_SLICE, R_SLICE, T_SLICE

__all__ = [
    "EDGE_DIM",
    "SE_SLICE",
    "RE_SLICE",
    "TE_SLICE",
    "RelativeAttributes",
    "RelativeTensor",
    "phi",
    "phi_vector",
    "phi_all",
    "phi_jacobian",
    "build_relative_tensor",
]

EDGE_DIM = 15
SE_SLICE = slice(0, 9)
RE_SLICE = slice(9, 12)
TE_SLICE = slice(12, 15)

# |pitch| of either endpoint within pi/2 - this margin triggers the
# finite-difference fallback in phi_jacobian.
_SINGULAR_MARGIN = 1e-6


@dataclass(frozen=True)
class RelativeAttributes:
    """Edge vector for one ordered object pair."""

    scale_diffs: tuple  # 9 entries, row-major over (i, j)
    rel_rotation: tuple  # 3 Euler angles in (-pi, pi]
    rel_translation: tuple

    def as_vector(self) -> np.ndarray:
        return np.array(
            tuple(self.scale_diffs) + tuple(self.rel_rotation) + tuple(self.rel_translation)
        )

    @classmethod
    def from_vector(cls, v) -> "RelativeAttributes":
        v = np.asarray(v, dtype=float)
        if v.shape != (EDGE_DIM,):
            raise ValueError(f"expected {EDGE_DIM}-vector, got {v.shape}")
        return cls(tuple(v[SE_SLICE]), tuple(wrap_angle(v[RE_SLICE])), tuple(v[TE_SLICE]))


def phi_vector(a_v, a_vp) -> np.ndarray:
    """Relative attribute 15-vector for 12-dim attribute vectors (v, v')."""
    a_v = np.asarray(a_v, dtype=float)
    a_vp = np.asarray(a_vp, dtype=float)
    out = np.empty(EDGE_DIM)
    out[SE_SLICE] = np.subtract.outer(a_v[S_SLICE], a_vp[S_SLICE]).ravel()
    Rv = euler_to_rotation(a_v[R_SLICE])
    Rvp = euler_to_rotation(a_vp[R_SLICE])
    Re = Rv.T @ Rvp
    out[RE_SLICE] = rotation_to_euler_batch(Re[None])[0]
    out[TE_SLICE] = Rv.T @ (a_vp[T_SLICE] - a_v[T_SLICE])
    return out


def phi(a_v, a_vp) -> RelativeAttributes:
    """Relative attributes of ObjectAttributes (or 12-vectors) v, v'."""
    if hasattr(a_v, "as_vector"):
        a_v = a_v.as_vector()
    if hasattr(a_vp, "as_vector"):
        a_vp = a_vp.as_vector()
    return RelativeAttributes.from_vector(phi_vector(a_v, a_vp))


def phi_all(attrs: np.ndarray) -> np.ndarray:
    """All-pairs relative attributes for an (n, 12) attribute matrix.

    Returns (n, n, 15) with entry [v, v'] = phi(attrs[v], attrs[v']) and a
    zeroed diagonal.
    """
    attrs = np.asarray(attrs, dtype=float)
    n = attrs.shape[0]
    out = np.zeros((n, n, EDGE_DIM))
    s = attrs[:, S_SLICE]
    # s_e[v, v', 3i+j] = s[v, i] - s[v', j]
    out[:, :, SE_SLICE] = (s[:, None, :, None] - s[None, :, None, :]).reshape(n, n, 9)
    R = euler_to_rotation_batch(attrs[:, R_SLICE])
    Re = np.einsum("vki,wkj->vwij", R, R)  # R[v]^T @ R[w]
    out[:, :, RE_SLICE] = rotation_to_euler_batch(Re.reshape(-1, 3, 3)).reshape(n, n, 3)
    dt = attrs[None, :, T_SLICE] - attrs[:, None, T_SLICE]  # [v, w] = t_w - t_v
    out[:, :, TE_SLICE] = np.einsum("vki,vwk->vwi", R, dt)
    idx = np.arange(n)
    out[idx, idx, :] = 0.0
    return out


def _phi_jacobian_fd(a_v, a_vp, step=1e-6):
    x0 = np.concatenate([np.asarray(a_v, float), np.asarray(a_vp, float)])
    J = np.empty((EDGE_DIM, 2 * ATTR_DIM))
    for j in range(2 * ATTR_DIM):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += step
        xm[j] -= step
        fp = phi_vector(xp[:ATTR_DIM], xp[ATTR_DIM:])
        fm = phi_vector(xm[:ATTR_DIM], xm[ATTR_DIM:])
        d = fp - fm
        d[RE_SLICE] = wrap_angle(d[RE_SLICE])
        J[:, j] = d / (2 * step)
    return J


def phi_jacobian(a_v, a_vp) -> np.ndarray:
    """Jacobian of phi_vector w.r.t. (a_v, a_vp), shape (15, 24).

    Near an Euler singularity of the relative rotation the analytic
    extraction derivative blows up; such configurations fall back to
    central finite differences.
    """
    a_v = np.asarray(a_v, dtype=float)
    a_vp = np.asarray(a_vp, dtype=float)
    J = np.zeros((EDGE_DIM, 2 * ATTR_DIM))
    # Scale block: d s_e[3i+j] / d s_v[i] = 1, / d s_vp[j] = -1.
    for i in range(3):
        for j in range(3):
            J[3 * i + j, i] = 1.0
            J[3 * i + j, ATTR_DIM + 3 + j - 3] = -1.0  # column j of a_vp sizes
    Rv = euler_to_rotation(a_v[R_SLICE])
    Rvp = euler_to_rotation(a_vp[R_SLICE])
    Re = Rv.T @ Rvp
    dRv = rotation_derivatives(a_v[R_SLICE])
    dRvp = rotation_derivatives(a_vp[R_SLICE])
    # Relative rotation rows.
    if 1.0 - abs(Re[2, 0]) < _SINGULAR_MARGIN:
        fd = _phi_jacobian_fd(a_v, a_vp)
        J[RE_SLICE, :] = fd[RE_SLICE, :]
    else:
        E = euler_extraction_jacobian(Re)  # (3, 3, 3)
        for k in range(3):
            dRe_v = dRv[k].T @ Rvp  # d Re / d r_v[k]
            dRe_vp = Rv.T @ dRvp[k]
            J[RE_SLICE, 3 + k] = np.einsum("aij,ij->a", E, dRe_v)
            J[RE_SLICE, ATTR_DIM + 3 + k] = np.einsum("aij,ij->a", E, dRe_vp)
    # Translation rows: t_e = Rv^T (t_vp - t_v).
    d = a_vp[T_SLICE] - a_v[T_SLICE]
    J[TE_SLICE, 6:9] = -Rv.T
    J[TE_SLICE, ATTR_DIM + 6 : ATTR_DIM + 9] = Rv.T
    for k in range(3):
        J[TE_SLICE, 3 + k] = dRv[k].T @ d
    return J


@dataclass(frozen=True, eq=False)
class RelativeTensor:
    """Dense (n, n, 15) tensor of relative attributes in slot order."""

    class_table: ClassTable
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.class_table.total_slots
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if v.shape != (n, n, EDGE_DIM):
            raise ValueError(f"tensor shape {v.shape} != ({n}, {n}, {EDGE_DIM})")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite tensor entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_json(self) -> str:
        return json.dumps(
            {
                "shape": list(self.values.shape),
                "classes": [
                    {"name": c, "slots": n}
                    for c, n in zip(self.class_table.classes, self.class_table.slots)
                ],
                "data": self.values.ravel().tolist(),  # row-major
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RelativeTensor":
        doc = json.loads(text)
        table = ClassTable(
            tuple(e["name"] for e in doc["classes"]),
            tuple(e["slots"] for e in doc["classes"]),
        )
        data = np.array(doc["data"], dtype=float).reshape(doc["shape"])
        return cls(table, data)

    def __eq__(self, other):
        if not isinstance(other, RelativeTensor):
            return NotImplemented
        return self.class_table == other.class_table and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.class_table, self.values.tobytes()))


def build_relative_tensor(scene: SceneLayout) -> RelativeTensor:
    """Relative attributes over all ordered slot pairs, indicators ignored."""
    return RelativeTensor(scene.class_table, phi_all(scene.attrs))
