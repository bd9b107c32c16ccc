"""Euler-angle / rotation-matrix conversions.

Convention (fixed globally): intrinsic Z-Y-X, i.e. for angles
r = (rx, ry, rz) the matrix is R = Rz(rz) @ Ry(ry) @ Rx(rx)
(yaw about z applied last in the fixed frame). All angles are radians and
serialized values live in the canonical range (-pi, pi]; the extracted
pitch ry lies in [-pi/2, pi/2].
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "euler_to_rotation",
    "rotation_to_euler",
    "euler_to_rotation_batch",
    "rotation_to_euler_batch",
    "rotation_derivatives",
    "rotation_derivatives_batch",
    "euler_extraction_jacobian",
    "euler_extraction_jacobian_batch",
    "wrap_angle",
    "GIMBAL_TOL",
]

# |cos(pitch)| below this is treated as gimbal lock during extraction.
GIMBAL_TOL = 1e-9


def wrap_angle(a):
    """Wrap angle(s) to the canonical range (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(-a + np.pi, 2.0 * np.pi)
    out = np.pi - out
    return out if out.ndim else float(out)


def euler_to_rotation(r):
    """3x3 rotation matrix for Euler angles r = (rx, ry, rz)."""
    return euler_to_rotation_batch(np.asarray(r, dtype=float)[None, :])[0]


def euler_to_rotation_batch(r):
    """(n,3) Euler angles -> (n,3,3) rotation matrices."""
    r = np.asarray(r, dtype=float)
    ca, sa = np.cos(r[:, 0]), np.sin(r[:, 0])
    cb, sb = np.cos(r[:, 1]), np.sin(r[:, 1])
    cc, sc = np.cos(r[:, 2]), np.sin(r[:, 2])
    R = np.empty((r.shape[0], 3, 3))
    R[:, 0, 0] = cc * cb
    R[:, 0, 1] = cc * sb * sa - sc * ca
    R[:, 0, 2] = cc * sb * ca + sc * sa
    R[:, 1, 0] = sc * cb
    R[:, 1, 1] = sc * sb * sa + cc * ca
    R[:, 1, 2] = sc * sb * ca - cc * sa
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sa
    R[:, 2, 2] = cb * ca
    return R


def _check_orthonormal(R, tol=1e-9):
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(
            f"matrix is not a rotation (orthonormality error {err:.2e}, "
            f"det {np.linalg.det(R):.12f})"
        )


def rotation_to_euler(R, check=True):
    """Extract Euler angles (rx, ry, rz) from a rotation matrix.

    At gimbal lock (|pitch| = pi/2 within GIMBAL_TOL) the roll/yaw
    ambiguity is resolved by setting rx = 0 and folding everything
    into rz.
    """
    R = np.asarray(R, dtype=float)
    if check:
        _check_orthonormal(R)
    return rotation_to_euler_batch(R[None, :, :])[0]


def rotation_to_euler_batch(R):
    """(n,3,3) rotation matrices -> (n,3) Euler angles. No input check."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    out = np.empty((n, 3))
    s = np.clip(-R[:, 2, 0], -1.0, 1.0)
    out[:, 1] = np.arcsin(s)
    cb = np.sqrt(np.maximum(0.0, 1.0 - s * s))
    regular = cb > GIMBAL_TOL
    out[:, 0] = np.where(regular, np.arctan2(R[:, 2, 1], R[:, 2, 2]), 0.0)
    out[:, 2] = np.where(regular, np.arctan2(R[:, 1, 0], R[:, 0, 0]), 0.0)
    lock = ~regular
    if lock.any():
        up = lock & (s > 0)  # pitch = +pi/2: rz = -atan2(R01, R11)
        dn = lock & (s <= 0)  # pitch = -pi/2: rz = atan2(-R01, R11)
        out[up, 2] = -np.arctan2(R[up, 0, 1], R[up, 1, 1])
        out[dn, 2] = np.arctan2(-R[dn, 0, 1], R[dn, 1, 1])
        out[lock, 0] = 0.0
    return out


def rotation_derivatives(r):
    """Partial derivatives dR/dr_k for Euler angles r, shape (3, 3, 3).

    Index [k] is the derivative of euler_to_rotation(r) w.r.t. r[k].
    """
    r = np.asarray(r, dtype=float)
    ca, sa = np.cos(r[0]), np.sin(r[0])
    cb, sb = np.cos(r[1]), np.sin(r[1])
    cc, sc = np.cos(r[2]), np.sin(r[2])
    dRa = np.array(
        [
            [0.0, cc * sb * ca + sc * sa, -cc * sb * sa + sc * ca],
            [0.0, sc * sb * ca - cc * sa, -sc * sb * sa - cc * ca],
            [0.0, cb * ca, -cb * sa],
        ]
    )
    dRb = np.array(
        [
            [-cc * sb, cc * cb * sa, cc * cb * ca],
            [-sc * sb, sc * cb * sa, sc * cb * ca],
            [-cb, -sb * sa, -sb * ca],
        ]
    )
    dRc = np.array(
        [
            [-sc * cb, -sc * sb * sa - cc * ca, -sc * sb * ca + cc * sa],
            [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
            [0.0, 0.0, 0.0],
        ]
    )
    return np.stack([dRa, dRb, dRc])


def rotation_derivatives_batch(r):
    """Batched rotation_derivatives: (n,3) angles -> (n,3,3,3)."""
    r = np.asarray(r, dtype=float)
    ca, sa = np.cos(r[:, 0]), np.sin(r[:, 0])
    cb, sb = np.cos(r[:, 1]), np.sin(r[:, 1])
    cc, sc = np.cos(r[:, 2]), np.sin(r[:, 2])
    n = r.shape[0]
    D = np.zeros((n, 3, 3, 3))
    D[:, 0, 0, 1] = cc * sb * ca + sc * sa
    D[:, 0, 0, 2] = -cc * sb * sa + sc * ca
    D[:, 0, 1, 1] = sc * sb * ca - cc * sa
    D[:, 0, 1, 2] = -sc * sb * sa - cc * ca
    D[:, 0, 2, 1] = cb * ca
    D[:, 0, 2, 2] = -cb * sa
    D[:, 1, 0, 0] = -cc * sb
    D[:, 1, 0, 1] = cc * cb * sa
    D[:, 1, 0, 2] = cc * cb * ca
    D[:, 1, 1, 0] = -sc * sb
    D[:, 1, 1, 1] = sc * cb * sa
    D[:, 1, 1, 2] = sc * cb * ca
    D[:, 1, 2, 0] = -cb
    D[:, 1, 2, 1] = -sb * sa
    D[:, 1, 2, 2] = -sb * ca
    D[:, 2, 0, 0] = -sc * cb
    D[:, 2, 0, 1] = -sc * sb * sa - cc * ca
    D[:, 2, 0, 2] = -sc * sb * ca + cc * sa
    D[:, 2, 1, 0] = cc * cb
    D[:, 2, 1, 1] = cc * sb * sa - sc * ca
    D[:, 2, 1, 2] = cc * sb * ca + sc * sa
    return D


def euler_extraction_jacobian(R):
    """Jacobian of rotation_to_euler w.r.t. the 9 matrix entries.

    Returns (3, 3, 3): [i, :, :] is d(angle_i)/dR. Undefined at gimbal
    lock; callers must check |R[2,0]| < 1 - tol first.
    """
    R = np.asarray(R, dtype=float)
    J = np.zeros((3, 3, 3))
    d21, d22 = R[2, 1], R[2, 2]
    den = d21 * d21 + d22 * d22
    J[0, 2, 1] = d22 / den
    J[0, 2, 2] = -d21 / den
    J[1, 2, 0] = -1.0 / np.sqrt(max(1e-300, 1.0 - R[2, 0] ** 2))
    d10, d00 = R[1, 0], R[0, 0]
    den = d10 * d10 + d00 * d00
    J[2, 1, 0] = d00 / den
    J[2, 0, 0] = -d10 / den
    return J


def euler_extraction_jacobian_batch(R):
    """Batched euler_extraction_jacobian: (n,3,3) -> (n,3,3,3).

    Same gimbal caveat as the scalar version.
    """
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    J = np.zeros((n, 3, 3, 3))
    d21, d22 = R[:, 2, 1], R[:, 2, 2]
    den = d21 * d21 + d22 * d22
    J[:, 0, 2, 1] = d22 / den
    J[:, 0, 2, 2] = -d21 / den
    J[:, 1, 2, 0] = -1.0 / np.sqrt(np.maximum(1e-300, 1.0 - R[:, 2, 0] ** 2))
    d10, d00 = R[:, 1, 0], R[:, 0, 0]
    den = d10 * d10 + d00 * d00
    J[:, 2, 1, 0] = d00 / den
    J[:, 2, 0, 0] = -d10 / den
    return J
