import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonpose.body_model import (
    BodyModel,
    BodyParams,
    ModelError,
    default_model_path,
    forward_kinematics,
    keypoints_from_rotmats,
    keypoints_of,
    load_model,
    model_from_dict,
    regress_keypoints,
    shaped_rest,
    skin,
)
from canonpose.geometry import axis_angle_to_matrix
from canonpose.toy import JOINT_NAMES, PARENTS, REST_JOINTS, build_toy_model
from oracles import central_differences


def toy_dict():
    return json.loads(default_model_path().read_text())


def random_pose(rng, scale=0.4):
    return rng.normal(scale=scale, size=(24, 3))


def test_shipped_model_loads(model):
    assert (model.n_vertices, model.n_joints, model.n_keypoints, model.n_betas) == (120, 24, 24, 10)


def test_shipped_file_matches_builder(model):
    built = build_toy_model()
    for name in ("template", "shape_dirs", "skin_weights", "joint_regressor", "keypoint_regressor"):
        assert np.array_equal(getattr(built, name), getattr(model, name)), name
    assert np.array_equal(built.parents[1:], model.parents[1:])


def test_skin_row_summing_to_point_nine_is_rejected(tmp_path):
    d = toy_dict()
    d["skin_weights"][7] = [w * 0.9 for w in d["skin_weights"][7]]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ModelError, match="skin weights: row 7"):
        load_model(path)


def test_parent_cycle_is_rejected(tmp_path):
    d = toy_dict()
    d["parents"][4] = 7  # knee <- ankle <- knee
    path = tmp_path / "cycle.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ModelError, match="tree structure"):
        load_model(path)


def test_negative_weight_and_regressor_rows_are_rejected():
    d = toy_dict()
    d["skin_weights"][0][0] = -0.5
    d["skin_weights"][0][1] = 1.5
    with pytest.raises(ModelError, match="negative"):
        model_from_dict(d)
    d = toy_dict()
    d["keypoint_regressor"][3][0] += 0.01
    with pytest.raises(ModelError, match="keypoint_regressor"):
        model_from_dict(d)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ModelError, match="not found"):
        load_model(tmp_path / "nope.json")
    bad = tmp_path / "trunc.json"
    bad.write_text(default_model_path().read_text()[:500])
    with pytest.raises(ModelError, match="malformed"):
        load_model(bad)
    d = toy_dict()
    del d["template"]
    with pytest.raises(ModelError, match="missing"):
        model_from_dict(d)
    d = toy_dict()
    d["n_vertices"] = 7
    with pytest.raises(ModelError, match="n_vertices"):
        model_from_dict(d)


def test_second_root_is_rejected():
    d = toy_dict()
    d["parents"][5] = -1
    with pytest.raises(ModelError, match="unique root"):
        model_from_dict(d)


def test_shaped_rest_zero_and_basis(model):
    verts, joints = shaped_rest(model, np.zeros(10))
    assert np.array_equal(verts, model.template)
    e1 = np.eye(10)[0]
    verts, _ = shaped_rest(model, e1)
    assert np.allclose(verts, model.template + model.shape_dirs[:, :, 0], atol=1e-15)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_shaped_rest_is_linear(model, seed):
    rng = np.random.default_rng(seed)
    b1, b2 = rng.normal(size=10), rng.normal(size=10)
    t = model.template
    lhs = shaped_rest(model, b1 + b2)[0] - t
    rhs = (shaped_rest(model, b1)[0] - t) + (shaped_rest(model, b2)[0] - t)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_zero_pose_fk_is_rest(model):
    rots, pos = forward_kinematics(model, np.zeros(10), np.zeros((24, 3)))
    assert np.allclose(rots, np.eye(3), atol=0)
    assert np.allclose(pos, REST_JOINTS, atol=1e-12)


def test_global_orient_rotates_about_root(model, rng):
    aa = rng.normal(size=3)
    pose = np.zeros((24, 3))
    pose[0] = aa
    r = axis_angle_to_matrix(aa)
    _, pos = forward_kinematics(model, np.zeros(10), pose)
    root = REST_JOINTS[0]
    assert np.allclose(pos, (REST_JOINTS - root) @ r.T + root, atol=1e-12)


def test_bent_elbow_matches_two_link_kinematics(model):
    elbow, wrist, hand = (JOINT_NAMES.index(n) for n in ("left_elbow", "left_wrist", "left_hand"))
    pose = np.zeros((24, 3))
    pose[elbow] = [0.0, 0.0, np.pi / 2]
    _, pos = forward_kinematics(model, np.zeros(10), pose)
    e = REST_JOINTS[elbow]
    # A quarter turn about z maps the forearm offset (dx, dy, dz) to (-dy, dx, dz).
    for j in (wrist, hand):
        d = REST_JOINTS[j] - e
        assert np.allclose(pos[j], e + [-d[1], d[0], d[2]], atol=1e-12)
    assert np.allclose(pos[:elbow], REST_JOINTS[:elbow], atol=1e-12)


def test_zero_pose_skin_is_shaped_rest(model, rng):
    b = rng.normal(size=10)
    assert np.allclose(skin(model, b, np.zeros((24, 3))), shaped_rest(model, b)[0], atol=1e-12)


def test_skin_global_equivariance(model, rng):
    b = rng.normal(size=10)
    pose = np.zeros((24, 3))
    pose[0] = rng.normal(size=3)
    r = axis_angle_to_matrix(pose[0])
    rest = skin(model, b, np.zeros((24, 3)))
    root = shaped_rest(model, b)[1][0]
    assert np.allclose(skin(model, b, pose), (rest - root) @ r.T + root, atol=1e-12)


def test_rigid_vertex_follows_its_joint(model, rng):
    b, pose = rng.normal(size=10), random_pose(rng)
    rigid = [v for v in range(model.n_vertices) if np.max(model.skin_weights[v]) == 1.0]
    assert rigid
    rots, pos = forward_kinematics(model, b, pose)
    verts_rest, joints_rest = shaped_rest(model, b)
    posed = skin(model, b, pose)
    for v in rigid:
        j = int(np.argmax(model.skin_weights[v]))
        assert np.allclose(posed[v], rots[j] @ (verts_rest[v] - joints_rest[j]) + pos[j], atol=1e-12)


def test_one_hot_regressor_selects_vertices(model, rng):
    d = toy_dict()
    picks = rng.integers(0, 120, size=24)
    d["keypoint_regressor"] = np.eye(120)[picks].tolist()
    m = model_from_dict(d)
    verts = rng.normal(size=(120, 3))
    assert np.array_equal(regress_keypoints(m, verts), verts[picks])


def test_regression_translation_equivariance(model, rng):
    verts, c = rng.normal(size=(120, 3)), rng.normal(size=3)
    assert np.allclose(regress_keypoints(model, verts + c), regress_keypoints(model, verts) + c, atol=1e-12)


def test_regress_shape_mismatch(model):
    with pytest.raises(ModelError):
        regress_keypoints(model, np.zeros((10, 3)))


def test_rest_keypoints_are_documented_skeleton(model):
    assert np.allclose(keypoints_of(model, BodyParams.zeros()), REST_JOINTS, atol=1e-12)
    assert tuple(model.parents[1:]) == PARENTS[1:]


def test_fast_keypoints_match_skinning(model, rng):
    for _ in range(5):
        b, pose = rng.normal(size=10), random_pose(rng, 0.6)
        slow = regress_keypoints(model, skin(model, b, pose))
        fast = keypoints_from_rotmats(model, b, axis_angle_to_matrix(pose)).keypoints
        assert np.allclose(slow, fast, atol=1e-13)


def test_keypoint_jacobians_match_differences(model, rng):
    b, pose = rng.normal(size=10), random_pose(rng)
    rots = axis_angle_to_matrix(pose)
    kj = keypoints_from_rotmats(model, b, rots, jacobian=True)
    for j in (0, 3, 16, 18):

        def kp_of(w, j=j):
            r = rots.copy()
            r[j] = rots[j] @ axis_angle_to_matrix(w)
            return keypoints_from_rotmats(model, b, r).keypoints.reshape(-1)

        numeric = central_differences(kp_of, np.zeros(3)).reshape(24, 3, 3)
        assert np.allclose(kj.d_rot[:, :, j, :], numeric, atol=1e-8)
    numeric_b = central_differences(lambda x: keypoints_from_rotmats(model, x, rots).keypoints.reshape(-1), b)
    assert np.allclose(kj.d_betas, numeric_b.reshape(24, 3, 10), atol=1e-8)


def test_body_params_validation_and_round_trip(rng):
    p = BodyParams(rng.normal(size=10), rng.normal(size=3), rng.normal(size=(23, 3)))
    q = BodyParams.from_dict(json.loads(json.dumps(p.to_dict())))
    assert np.array_equal(p.pose, q.pose) and np.array_equal(p.betas, q.betas)
    with pytest.raises(ValueError):
        BodyParams(np.zeros(10), np.array([np.nan, 0, 0]), np.zeros((23, 3)))
    with pytest.raises(ValueError):
        BodyParams(np.zeros(10), np.zeros(2), np.zeros((23, 3)))
    assert not p.betas.flags.writeable


def test_pose_correctives_are_optional(model, rng):
    d = toy_dict()
    d["pose_dirs"] = (rng.normal(scale=1e-3, size=(120, 3, 9 * 23))).tolist()
    pose = random_pose(rng)
    off = model_from_dict(d)
    on = model_from_dict(d, apply_pose_correctives=True)
    assert np.allclose(skin(off, np.zeros(10), pose), skin(model, np.zeros(10), pose))
    assert not np.allclose(skin(on, np.zeros(10), pose), skin(off, np.zeros(10), pose))
    assert isinstance(on, BodyModel)
