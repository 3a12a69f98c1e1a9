"""Builder for the shipped 24-joint, 120-vertex toy body model.

The model lives in ``data/toy_model.json``; ``python -m canonpose.toy``
regenerates it. Each joint owns five vertices: a ring of four centred on the
joint (blended half-and-half with the parent) and one rigid vertex along the
bone. Both regressors average the ring, so the rest keypoints coincide with
``REST_JOINTS``.
"""

from __future__ import annotations

import sys

import numpy as np

from .body_model import BodyModel, save_model

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# T-pose, meters, y up, facing +z, left side at +x.
REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],
    [0.09, -0.08, 0.00],
    [-0.09, -0.08, 0.00],
    [0.00, 0.11, -0.01],
    [0.10, -0.46, 0.01],
    [-0.10, -0.46, 0.01],
    [0.00, 0.24, 0.01],
    [0.09, -0.86, -0.03],
    [-0.09, -0.86, -0.03],
    [0.00, 0.30, 0.03],
    [0.11, -0.92, 0.10],
    [-0.11, -0.92, 0.10],
    [0.00, 0.52, -0.01],
    [0.08, 0.42, 0.00],
    [-0.08, 0.42, 0.00],
    [0.00, 0.62, 0.04],
    [0.19, 0.44, -0.01],
    [-0.19, 0.44, -0.01],
    [0.44, 0.42, -0.03],
    [-0.44, 0.42, -0.03],
    [0.69, 0.43, -0.02],
    [-0.69, 0.43, -0.02],
    [0.77, 0.42, -0.03],
    [-0.77, 0.42, -0.03],
])

RING_RADIUS = np.array([
    0.12, 0.08, 0.08, 0.11, 0.06, 0.06, 0.12, 0.05, 0.05, 0.13, 0.04, 0.04,
    0.06, 0.06, 0.06, 0.09, 0.05, 0.05, 0.04, 0.04, 0.035, 0.035, 0.04, 0.04,
])

VERTS_PER_JOINT = 5
N_BETAS = 10
_SEED = 20240617

LEFT_LEG = (1, 4, 7, 10)
RIGHT_LEG = (2, 5, 8, 11)
LEFT_ARM = (13, 16, 18, 20, 22)
RIGHT_ARM = (14, 17, 19, 21, 23)


def _bone_direction(j: int) -> np.ndarray:
    children = [c for c in range(len(PARENTS)) if PARENTS[c] == j]
    if children:
        d = np.mean(REST_JOINTS[children], axis=0) - REST_JOINTS[j]
    else:
        d = REST_JOINTS[j] - REST_JOINTS[PARENTS[j]]
    if np.linalg.norm(d) < 1e-9:
        d = np.array([0.0, 1.0, 0.0])
    return d / np.linalg.norm(d)


def _ring_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _joint_shape_fields(rng: np.random.Generator) -> np.ndarray:
    """Per-joint displacement (J, 3, B) for each shape component."""
    nj = len(PARENTS)
    J = REST_JOINTS
    fields = np.zeros((nj, 3, N_BETAS))
    fields[:, :, 0] = 0.04 * (J - J[0])
    for leg in (LEFT_LEG, RIGHT_LEG):
        hip_y = J[leg[0], 1]
        for j in leg:
            fields[j, 1, 1] = 0.06 * (J[j, 1] - hip_y) / 0.84
    for arm in (LEFT_ARM, RIGHT_ARM):
        sx = J[arm[1], 0]
        for j in arm[1:]:
            fields[j, 0, 2] = 0.05 * (J[j, 0] - sx) / 0.58
    for arm, sign in ((LEFT_ARM, 1.0), (RIGHT_ARM, -1.0)):
        for j in arm:
            fields[j, 0, 3] = sign * 0.02
    for leg, sign in ((LEFT_LEG, 1.0), (RIGHT_LEG, -1.0)):
        for j in leg:
            fields[j, 0, 4] = sign * 0.015
    upper = (12, 13, 14, 15) + LEFT_ARM[1:] + RIGHT_ARM[1:]
    fields[3, 1, 5] = 0.0075
    fields[6, 1, 5] = 0.015
    fields[9, 1, 5] = 0.0225
    for j in upper:
        fields[j, 1, 5] = 0.03
    fields[12, 1, 6] = 0.01
    fields[15, 1, 6] = 0.025
    fields[1:, :, 7] = rng.normal(scale=0.01, size=(nj - 1, 3))
    fields[1:, :, 8] = rng.normal(scale=0.01, size=(nj - 1, 3))
    return fields


def build_toy_model() -> BodyModel:
    rng = np.random.default_rng(_SEED)
    nj = len(PARENTS)
    nv = nj * VERTS_PER_JOINT
    template = np.zeros((nv, 3))
    weights = np.zeros((nv, nj))
    regressor = np.zeros((nj, nv))
    shape_dirs = np.zeros((nv, 3, N_BETAS))
    joint_fields = _joint_shape_fields(rng)

    for j in range(nj):
        base = j * VERTS_PER_JOINT
        d = _bone_direction(j)
        u, w = _ring_basis(d)
        r = RING_RADIUS[j]
        offsets = [r * u, r * w, -r * u, -r * w]
        for i, off in enumerate(offsets):
            v = base + i
            template[v] = REST_JOINTS[j] + off
            if PARENTS[j] < 0:
                weights[v, j] = 1.0
            else:
                weights[v, j] = 0.5
                weights[v, PARENTS[j]] = 0.5
            regressor[j, v] = 0.25
            shape_dirs[v] = joint_fields[j]
            # girth: ring expands radially, joints stay put
            shape_dirs[v, :, 9] = 0.01 * off / r
        bone = base + 4
        children = [c for c in range(nj) if PARENTS[c] == j]
        length = 0.5 * np.linalg.norm(np.mean(REST_JOINTS[children], axis=0) - REST_JOINTS[j]) if children else 0.06
        template[bone] = REST_JOINTS[j] + max(length, 0.04) * d
        weights[bone, j] = 1.0
        shape_dirs[bone] = joint_fields[j]

    return BodyModel(
        template=template,
        shape_dirs=shape_dirs,
        skin_weights=weights,
        parents=np.array(PARENTS),
        joint_regressor=regressor,
        keypoint_regressor=regressor.copy(),
    )


if __name__ == "__main__":
    from .body_model import default_model_path

    out = sys.argv[1] if len(sys.argv) > 1 else default_model_path()
    save_model(build_toy_model(), out)
    print(f"wrote {out}")
