"""Skinned parametric body: shape blendshapes, kinematic tree, LBS, keypoints.

Model frame is y-up with the body facing +z. All lengths are meters, all
rotations are axis-angle in radians unless a function says otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import axis_angle_to_matrix, skew

N_BETAS = 10
N_JOINTS = 24

SCHEMA_VERSION = 1


class ModelError(ValueError):
    """Invalid model file or a violated model invariant."""


@dataclass(frozen=True)
class BodyParams:
    """Shape and pose of one body.

    Attributes:
        betas: ``(10,)`` shape coefficients.
        global_orient: ``(3,)`` root rotation (axis-angle).
        body_pose: ``(23, 3)`` per-joint rotations relative to the parent.
    """

    betas: np.ndarray
    global_orient: np.ndarray
    body_pose: np.ndarray

    def __post_init__(self):
        for name in ("betas", "global_orient", "body_pose"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"BodyParams.{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.global_orient.shape != (3,):
            raise ValueError(f"global_orient must have shape (3,), got {self.global_orient.shape}")
        if self.body_pose.ndim != 2 or self.body_pose.shape[1] != 3:
            raise ValueError(f"body_pose must have shape (J-1, 3), got {self.body_pose.shape}")

    @property
    def pose(self) -> np.ndarray:
        """Full ``(24, 3)`` pose with the root rotation first."""
        return np.concatenate([self.global_orient[None], self.body_pose], axis=0)

    @classmethod
    def zeros(cls, n_joints: int = N_JOINTS, n_betas: int = N_BETAS) -> "BodyParams":
        return cls(np.zeros(n_betas), np.zeros(3), np.zeros((n_joints - 1, 3)))

    def replace(self, **changes) -> "BodyParams":
        kwargs = {"betas": self.betas, "global_orient": self.global_orient, "body_pose": self.body_pose}
        kwargs.update(changes)
        return BodyParams(**kwargs)

    def to_dict(self) -> dict:
        return {
            "betas": self.betas.tolist(),
            "global_orient": self.global_orient.tolist(),
            "body_pose": self.body_pose.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(np.asarray(d["betas"]), np.asarray(d["global_orient"]), np.asarray(d["body_pose"]))


def _topological_order(parents: np.ndarray) -> list[int]:
    n = len(parents)
    roots = [j for j in range(n) if parents[j] < 0 or parents[j] == j]
    if roots != [0]:
        raise ModelError(f"tree structure: joint 0 must be the unique root, found roots {roots}")
    for j in range(n):
        p = parents[j]
        if j != 0 and not (0 <= p < n):
            raise ModelError(f"tree structure: joint {j} has out-of-range parent {p}")
        # Walk to the root; a cycle never reaches it.
        seen = 0
        k = j
        while k != 0:
            k = int(parents[k])
            seen += 1
            if seen > n:
                raise ModelError(f"tree structure: parent cycle through joint {j}")
    children = [[] for _ in range(n)]
    for j in range(1, n):
        children[int(parents[j])].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    return order


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Immutable body model.

    Attributes:
        template: ``(Nv, 3)`` rest vertices.
        shape_dirs: ``(Nv, 3, B)`` shape blendshapes, meters per unit beta.
        skin_weights: ``(Nv, J)`` convex skinning weights.
        parents: ``(J,)`` parent index per joint, ``-1`` for the root.
        joint_regressor: ``(J, Nv)``.
        keypoint_regressor: ``(K, Nv)``.
        pose_dirs: optional ``(Nv, 3, 9*(J-1))`` pose correctives.
        apply_pose_correctives: use ``pose_dirs`` when skinning.
    """

    template: np.ndarray
    shape_dirs: np.ndarray
    skin_weights: np.ndarray
    parents: np.ndarray
    joint_regressor: np.ndarray
    keypoint_regressor: np.ndarray
    pose_dirs: np.ndarray | None = None
    apply_pose_correctives: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("template", "shape_dirs", "skin_weights", "joint_regressor", "keypoint_regressor"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        parents = np.array(self.parents, dtype=int)
        parents.setflags(write=False)
        object.__setattr__(self, "parents", parents)
        if self.pose_dirs is not None:
            pd = np.array(self.pose_dirs, dtype=float)
            pd.setflags(write=False)
            object.__setattr__(self, "pose_dirs", pd)
        self._validate()
        self._precompute()

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.keypoint_regressor.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_dirs.shape[2]

    def _validate(self):
        nv = self.template.shape[0]
        nj = self.parents.shape[0]
        if self.template.shape != (nv, 3):
            raise ModelError(f"template must be (Nv, 3), got {self.template.shape}")
        if self.shape_dirs.ndim != 3 or self.shape_dirs.shape[:2] != (nv, 3):
            raise ModelError(f"shape_dirs must be (Nv, 3, B), got {self.shape_dirs.shape}")
        if self.skin_weights.shape != (nv, nj):
            raise ModelError(f"skin_weights must be (Nv, J)=({nv}, {nj}), got {self.skin_weights.shape}")
        if self.joint_regressor.shape != (nj, nv):
            raise ModelError(f"joint_regressor must be (J, Nv), got {self.joint_regressor.shape}")
        if self.keypoint_regressor.ndim != 2 or self.keypoint_regressor.shape[1] != nv:
            raise ModelError(f"keypoint_regressor must be (K, Nv), got {self.keypoint_regressor.shape}")
        if self.pose_dirs is not None and self.pose_dirs.shape != (nv, 3, 9 * (nj - 1)):
            raise ModelError(f"pose_dirs must be (Nv, 3, 9*(J-1)), got {self.pose_dirs.shape}")
        for name in ("template", "shape_dirs", "skin_weights", "joint_regressor", "keypoint_regressor"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} contains non-finite values")

        w = self.skin_weights
        if np.any(w < 0):
            row = int(np.argwhere(w < 0)[0, 0])
            raise ModelError(f"skin weights: negative weight in vertex row {row}")
        sums = w.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
        if bad.size:
            raise ModelError(
                f"skin weights: row {int(bad[0])} sums to {sums[bad[0]]:.12g}, expected 1 within 1e-9"
            )
        for name in ("joint_regressor", "keypoint_regressor"):
            rs = getattr(self, name).sum(axis=1)
            bad = np.flatnonzero(np.abs(rs - 1.0) > 1e-6)
            if bad.size:
                raise ModelError(f"{name}: row {int(bad[0])} sums to {rs[bad[0]]:.12g}, expected 1 within 1e-6")
        order = _topological_order(self.parents)
        self._cache["order"] = order

    def _precompute(self):
        c = self._cache
        w = self.skin_weights
        kreg = self.keypoint_regressor
        c["children"] = [[j for j in range(1, self.n_joints) if self.parents[j] == m] for m in range(self.n_joints)]
        c["rest_joints_template"] = self.joint_regressor @ self.template
        c["rest_joints_dirs"] = np.einsum("jv,vcb->jcb", self.joint_regressor, self.shape_dirs)
        # Keypoints factor through per-joint aggregates of W and the skinning weights.
        c["A"] = kreg @ w
        c["B0"] = np.einsum("kv,vj,vc->kjc", kreg, w, self.template)
        c["Bs"] = np.einsum("kv,vj,vcb->kjcb", kreg, w, self.shape_dirs)

    @property
    def order(self) -> list[int]:
        return self._cache["order"]

    @property
    def children(self) -> list[list[int]]:
        return self._cache["children"]

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "n_vertices": self.n_vertices,
            "n_joints": self.n_joints,
            "n_keypoints": self.n_keypoints,
            "template": self.template.tolist(),
            "shape_dirs": self.shape_dirs.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "parents": self.parents.tolist(),
            "joint_regressor": self.joint_regressor.tolist(),
            "keypoint_regressor": self.keypoint_regressor.tolist(),
        }
        if self.pose_dirs is not None:
            d["pose_dirs"] = self.pose_dirs.tolist()
        return d


_REQUIRED = ("template", "shape_dirs", "skin_weights", "parents", "joint_regressor", "keypoint_regressor")


def model_from_dict(d: dict, apply_pose_correctives: bool = False) -> BodyModel:
    if not isinstance(d, dict):
        raise ModelError("malformed schema: top level must be an object")
    missing = [k for k in _REQUIRED + ("n_vertices", "n_joints", "n_keypoints") if k not in d]
    if missing:
        raise ModelError(f"malformed schema: missing fields {missing}")
    try:
        arrays = {k: np.asarray(d[k], dtype=float) for k in _REQUIRED if k != "parents"}
        parents = np.asarray(d["parents"], dtype=int)
        pose_dirs = np.asarray(d["pose_dirs"], dtype=float) if d.get("pose_dirs") is not None else None
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed schema: {exc}") from exc
    nv, nj, nk = int(d["n_vertices"]), int(d["n_joints"]), int(d["n_keypoints"])
    if arrays["template"].shape != (nv, 3):
        raise ModelError(f"header n_vertices={nv} disagrees with template shape {arrays['template'].shape}")
    if parents.shape != (nj,):
        raise ModelError(f"header n_joints={nj} disagrees with parents shape {parents.shape}")
    if arrays["keypoint_regressor"].shape[:1] != (nk,):
        raise ModelError(f"header n_keypoints={nk} disagrees with keypoint_regressor shape")
    return BodyModel(parents=parents, pose_dirs=pose_dirs, apply_pose_correctives=apply_pose_correctives, **arrays)


def load_model(path, apply_pose_correctives: bool = False) -> BodyModel:
    """Read and validate a JSON body model file."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"model file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed schema: {path} is not valid JSON ({exc})") from exc
    return model_from_dict(d, apply_pose_correctives)


def save_model(model: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def default_model_path() -> Path:
    return Path(__file__).parent / "data" / "toy_model.json"


def load_toy_model() -> BodyModel:
    return load_model(default_model_path())


def shaped_rest(model: BodyModel, betas) -> tuple[np.ndarray, np.ndarray]:
    """Rest vertices ``T + S beta`` and the joints regressed from them."""
    betas = np.asarray(betas, dtype=float)
    verts = model.template + model.shape_dirs @ betas
    return verts, model.joint_regressor @ verts


def _as_rotmats(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-2:] == (3, 3):
        return pose
    return axis_angle_to_matrix(pose)


def _fk_from_joints(model: BodyModel, rest_joints: np.ndarray, local: np.ndarray):
    n = model.n_joints
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    for j in model.order:
        p = model.parents[j]
        if j == 0:
            rots[0] = local[0]
            pos[0] = rest_joints[0]
        else:
            rots[j] = rots[p] @ local[j]
            pos[j] = pos[p] + rots[p] @ (rest_joints[j] - rest_joints[p])
    return rots, pos


def forward_kinematics(model: BodyModel, betas, pose) -> tuple[np.ndarray, np.ndarray]:
    """World rotation and position of every joint.

    Args:
        model: body model.
        betas: shape coefficients.
        pose: ``(J, 3)`` axis-angle (root first) or ``(J, 3, 3)`` local rotations.

    Returns:
        ``(rotations (J, 3, 3), positions (J, 3))``. The root rotates about its
        own rest position, which it keeps.
    """
    _, rest_joints = shaped_rest(model, betas)
    return _fk_from_joints(model, rest_joints, _as_rotmats(pose))


def skin(model: BodyModel, betas, pose) -> np.ndarray:
    """Linear blend skinning of the shaped rest mesh."""
    verts, rest_joints = shaped_rest(model, betas)
    local = _as_rotmats(pose)
    if model.pose_dirs is not None and model.apply_pose_correctives:
        feat = (local[1:] - np.eye(3)).reshape(-1)
        verts = verts + model.pose_dirs @ feat
    rots, pos = _fk_from_joints(model, rest_joints, local)
    # Per-joint affine map taking rest space to posed space.
    offs = pos - np.einsum("jab,jb->ja", rots, rest_joints)
    per_joint = np.einsum("jab,vb->vja", rots, verts) + offs[None]
    return np.einsum("vj,vja->va", model.skin_weights, per_joint)


def regress_keypoints(model: BodyModel, vertices) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape != (model.n_vertices, 3):
        raise ModelError(
            f"vertex array shape {vertices.shape} does not match regressor ({model.n_vertices}, 3)"
        )
    return model.keypoint_regressor @ vertices


def keypoints_of(model: BodyModel, params: BodyParams) -> np.ndarray:
    """``W M(beta, theta)``: the keypoints of a posed, shaped body."""
    return regress_keypoints(model, skin(model, params.betas, params.pose))


@dataclass(frozen=True)
class KeypointJacobian:
    """Keypoints with derivatives.

    Attributes:
        keypoints: ``(K, 3)``.
        d_rot: ``(K, 3, J, 3)``; column block ``j`` is the derivative with respect
            to a body-frame increment ``w`` of joint ``j``'s local rotation,
            ``R_j -> R_j exp([w]_x)``.
        d_betas: ``(K, 3, B)``.
    """

    keypoints: np.ndarray
    d_rot: np.ndarray | None
    d_betas: np.ndarray | None


def keypoints_from_rotmats(model: BodyModel, betas, local_rots, jacobian: bool = False) -> KeypointJacobian:
    """Fast keypoint evaluation from local rotation matrices, optionally with Jacobians.

    Equivalent to ``regress_keypoints(skin(...))`` when pose correctives are
    not applied, but works on per-joint aggregates of the regressor.
    """
    if model.pose_dirs is not None and model.apply_pose_correctives:
        raise ModelError("keypoints_from_rotmats does not support pose correctives")
    c = model._cache
    betas = np.asarray(betas, dtype=float)
    A = c["A"]
    rest_joints = c["rest_joints_template"] + c["rest_joints_dirs"] @ betas
    B = c["B0"] + c["Bs"] @ betas
    P = B - A[..., None] * rest_joints[None]
    rots, pos = _fk_from_joints(model, rest_joints, local_rots)
    contrib = A[..., None] * pos[None] + (rots[None] @ P[..., None])[..., 0]
    kp = contrib.sum(axis=1)
    if not jacobian:
        return KeypointJacobian(kp, None, None)

    nj = model.n_joints
    sub_sum = contrib.copy()
    sub_a = A.copy()
    for j in reversed(model.order):
        p = model.parents[j]
        if j != 0:
            sub_sum[:, p] += sub_sum[:, j]
            sub_a[:, p] += sub_a[:, j]
    lever = sub_sum - sub_a[..., None] * pos[None]
    # d kp / d w_m = -[lever_km]_x G_m
    d_rot = -np.moveaxis(skew(lever) @ rots[None], 2, 1)

    d_rest = c["rest_joints_dirs"]
    d_pos = np.empty((nj, 3, betas.shape[0]))
    for j in model.order:
        p = model.parents[j]
        if j == 0:
            d_pos[0] = d_rest[0]
        else:
            d_pos[j] = d_pos[p] + rots[p] @ (d_rest[j] - d_rest[p])
    d_P = c["Bs"] - A[..., None, None] * d_rest[None]
    d_betas = (A @ d_pos.reshape(nj, -1)).reshape(-1, 3, betas.shape[0]) + (rots[None] @ d_P).sum(axis=1)
    return KeypointJacobian(kp, d_rot, d_betas)
