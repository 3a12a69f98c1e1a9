"""Rotation conversions, pinhole projection and Procrustes alignment.

All rotation helpers accept batched input with the rotation axes last:
axis-angle ``(..., 3)``, matrices ``(..., 3, 3)`` and the continuous 6D
representation ``(..., 6)`` which stores the first two matrix columns
concatenated, ``(c0x, c0y, c0z, c1x, c1y, c1z)``.

Matrices act on column vectors; a row-major point array ``p`` of shape
``(n, 3)`` is rotated as ``p @ R.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Angles within this distance of pi use the eigenvector branch.
_NEAR_PI = 1e-2
_SMALL_ANGLE = 1e-8


class GeometryError(ValueError):
    """Raised for degenerate or invalid geometric input."""


class NonPositiveDepthError(GeometryError):
    """A point landed on or behind the camera plane.

    Attributes:
        indices: indices of the offending points in the input order.
    """

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"non-positive camera depth at point index {self.indices}")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Skew-free pinhole intrinsics with square pixels.

    Attributes:
        focal: focal length in pixels.
        principal_point: ``(cx, cy)`` in pixels.
    """

    focal: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        if not np.isfinite(self.focal) or self.focal <= 0:
            raise GeometryError(f"focal length must be positive, got {self.focal}")
        cx, cy = self.principal_point
        object.__setattr__(self, "principal_point", (float(cx), float(cy)))
        object.__setattr__(self, "focal", float(self.focal))

    @property
    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices ``[v]_x`` for ``v`` of shape ``(..., 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def is_rotation(m: np.ndarray, atol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    eye = np.eye(3)
    gram = np.swapaxes(m, -1, -2) @ m
    return bool(np.all(np.abs(gram - eye) <= atol) and np.all(np.abs(np.linalg.det(m) - 1.0) <= atol))


def _check_rotation(m: np.ndarray, atol: float) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise GeometryError(f"expected (..., 3, 3) rotation matrices, got shape {m.shape}")
    if not is_rotation(m, atol=atol):
        raise GeometryError("input is not a rotation matrix (orthonormality or det=+1 violated)")
    return m


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, batched over leading axes."""
    aa = np.asarray(aa, dtype=float)
    if aa.shape[-1] != 3:
        raise GeometryError(f"axis-angle must have trailing dimension 3, got {aa.shape}")
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # Taylor expansions keep the small-angle branch exact to double precision.
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    k = skew(aa)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_axis_angle(m: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Rotation matrices to axis-angle with angle in ``[0, pi]``.

    Near a half-turn the axis is read off the dominant eigenvector of the
    symmetric part of ``m``, where the antisymmetric part vanishes.
    """
    m = _check_rotation(m, atol)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    vee = np.stack(
        [m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], axis=-1
    )
    sin_t = 0.5 * np.linalg.norm(vee, axis=-1)
    cos_t = 0.5 * (np.trace(m, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(sin_t, cos_t)

    out = np.empty((m.shape[0], 3))
    small = theta < _SMALL_ANGLE
    near_pi = theta > np.pi - _NEAR_PI
    regular = ~(small | near_pi)

    out[small] = 0.5 * vee[small]
    if np.any(regular):
        scale = theta[regular] / (2.0 * sin_t[regular])
        out[regular] = scale[:, None] * vee[regular]
    if np.any(near_pi):
        sym = 0.5 * (m[near_pi] + np.swapaxes(m[near_pi], -1, -2))
        _, vecs = np.linalg.eigh(sym)
        axis = vecs[..., :, -1]
        dots = np.einsum("ij,ij->i", axis, vee[near_pi])
        # Exactly at pi both signs are valid; pin the first significant component positive.
        for row in range(axis.shape[0]):
            if abs(dots[row]) > 1e-15:
                if dots[row] < 0:
                    axis[row] = -axis[row]
            else:
                lead = axis[row][np.argmax(np.abs(axis[row]) > 1e-12)]
                if lead < 0:
                    axis[row] = -axis[row]
        out[near_pi] = theta[near_pi, None] * axis
    return out.reshape(batch + (3,))


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two stored columns; the third is their cross product."""
    r6 = np.asarray(r6, dtype=float)
    if r6.shape[-1] != 6:
        raise GeometryError(f"6D rotations must have trailing dimension 6, got {r6.shape}")
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    if np.any(~np.isfinite(r6)) or np.any(n1 <= 1e-12):
        raise GeometryError("degenerate 6D rotation: first column has (near) zero norm")
    b1 = a1 / n1[..., None]
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1)
    if np.any(n2 <= 1e-10 * np.maximum(np.linalg.norm(a2, axis=-1), 1e-2)):
        raise GeometryError("degenerate 6D rotation: columns are (near) parallel or zero")
    b2 = u2 / n2[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    m = _check_rotation(m, atol)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_tangent_jacobian(r6: np.ndarray) -> np.ndarray:
    """Derivative of the body-frame rotation increment w.r.t. the 6D coordinates.

    For ``R = rot6d_to_matrix(x)``, a perturbation ``dx`` changes the rotation
    as ``R -> R exp([w]_x)`` with ``w = D @ dx``; this returns ``D`` with shape
    ``(..., 3, 6)``.
    """
    r6 = np.asarray(r6, dtype=float)
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    rot = rot6d_to_matrix(r6)
    b1, b2, b3 = rot[..., :, 0], rot[..., :, 1], rot[..., :, 2]
    n1 = np.linalg.norm(a1, axis=-1)[..., None]
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1)[..., None]
    out = np.zeros(r6.shape[:-1] + (3, 6))
    out[..., 0, 0:3] = -(proj / (n1 * n2)) * b3
    out[..., 0, 3:6] = b3 / n2
    out[..., 1, 0:3] = -b3 / n1
    out[..., 2, 0:3] = b2 / n1
    return out


def right_jacobian_inv(aa: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at ``aa`` (maps body increments to d(aa))."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    k = skew(aa)
    return np.eye(3) + 0.5 * k + coef[..., None, None] * (k @ k)


def project(points, intrinsics: CameraIntrinsics, rotation=None, translation=None) -> np.ndarray:
    """Pinhole projection ``(f x/z + cx, f y/z + cy)`` of world points.

    Args:
        points: ``(n, 3)`` points in meters.
        intrinsics: camera intrinsics.
        rotation: world-to-camera rotation, identity when omitted.
        translation: world-to-camera translation in meters, zero when omitted.

    Returns:
        ``(n, 2)`` pixel coordinates.

    Raises:
        NonPositiveDepthError: if any camera-frame depth is ``<= 0``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if rotation is not None:
        pts = pts @ np.asarray(rotation, dtype=float).T
    if translation is not None:
        pts = pts + np.asarray(translation, dtype=float)
    z = pts[:, 2]
    bad = np.flatnonzero(~(z > 0))
    if bad.size:
        raise NonPositiveDepthError(bad)
    cx, cy = intrinsics.principal_point
    f = intrinsics.focal
    return np.stack([f * pts[:, 0] / z + cx, f * pts[:, 1] / z + cy], axis=-1)


@dataclass(frozen=True)
class ProcrustesResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    aligned: np.ndarray


def procrustes_align(pred, gt, with_scale: bool = True) -> ProcrustesResult:
    """Similarity (or rigid) transform taking ``pred`` onto ``gt`` in least squares.

    Minimizes ``sum_j ||s R pred_j + t - gt_j||^2`` with ``det(R) = +1``.
    ``with_scale=False`` fixes ``s = 1``.

    Raises:
        GeometryError: fewer than three points or a collinear configuration.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise GeometryError(f"expected matching (k, 3) arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise GeometryError("Procrustes alignment needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    for name, arr in (("pred", p0), ("gt", g0)):
        sv = np.linalg.svd(arr, compute_uv=False)
        if sv[0] == 0.0 or sv[1] <= 1e-10 * sv[0]:
            raise GeometryError(f"degenerate (collinear) point set in {name}")

    cov = g0.T @ p0
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    if with_scale:
        scale = float(np.sum(sig * d) / np.sum(p0**2))
    else:
        scale = 1.0
    trans = mu_g - scale * rot @ mu_p
    aligned = scale * pred @ rot.T + trans
    return ProcrustesResult(scale=scale, rotation=rot, translation=trans, aligned=aligned)
