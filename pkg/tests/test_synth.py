import json

import numpy as np
import pytest

from canonpose.body_model import keypoints_of
from canonpose.geometry import project
from canonpose.observations import filter_confidence
from canonpose.synth import (
    SceneConfig,
    SceneError,
    ablation_suite,
    generate_scene,
    read_scene,
    scene_from_dict,
    scene_to_dict,
    select_variant,
    subset_scene,
    survivor_counts,
    write_scene,
)


def assert_scenes_equal(a, b):
    assert a.scene_id == b.scene_id and a.seed == b.seed and a.n_views == b.n_views
    for da, db in zip(a.detections, b.detections):
        assert np.array_equal(da.keypoints, db.keypoints)
        assert np.array_equal(da.confidence, db.confidence)
    assert a.intrinsics == b.intrinsics
    assert a.has_ground_truth == b.has_ground_truth
    if a.has_ground_truth:
        ga, gb = a.ground_truth, b.ground_truth
        for name in ("rig_rotations", "rig_translations", "keypoints_world", "keypoints_camera"):
            assert np.array_equal(getattr(ga, name), getattr(gb, name)), name
        assert np.array_equal(ga.canonical.global_orients, gb.canonical.global_orients)
        assert np.array_equal(ga.canonical.translations, gb.canonical.translations)
        assert np.array_equal(ga.world.pose, gb.world.pose)


def test_noiseless_detections_are_exact_projections(model):
    s = generate_scene(model, SceneConfig(seed=3))
    g = s.ground_truth
    for i, det in enumerate(s.detections):
        uv = project(g.keypoints_world, s.intrinsics[i], g.rig_rotations[i], g.rig_translations[i])
        assert np.allclose(det.keypoints, uv, atol=1e-9)
        assert np.all(det.confidence >= 0.7)
        assert np.all(g.keypoints_camera[i][:, 2] > 0)


def test_canonical_ground_truth_reproduces_camera_keypoints(model):
    s = generate_scene(model, SceneConfig(seed=5, pixel_noise=1.0))
    g = s.ground_truth
    for i in range(s.n_views):
        kp = keypoints_of(model, g.canonical.view_params(i)) + g.canonical.translations[i]
        assert np.allclose(kp, g.keypoints_camera[i], atol=1e-12)


def test_same_seed_is_bit_identical(model):
    cfg = SceneConfig(seed=11, pixel_noise=2.0, occlusion_rate=0.3)
    assert scene_to_dict(generate_scene(model, cfg)) == scene_to_dict(generate_scene(model, cfg))


def test_full_occlusion_leaves_no_survivors(model):
    s = generate_scene(model, SceneConfig(seed=2, occlusion_rate=1.0))
    assert survivor_counts(s) == [0] * s.n_views


def test_config_validation():
    with pytest.raises(SceneError):
        SceneConfig(n_views=0)
    with pytest.raises(SceneError):
        SceneConfig(occlusion_rate=1.5)
    with pytest.raises(SceneError):
        SceneConfig(n_views=2, occlusion_rate=(0.1, 0.2, 0.3))
    with pytest.raises(SceneError):
        SceneConfig(pixel_noise=-1.0)
    with pytest.raises(SceneError):
        SceneConfig.from_dict({"bogus": 1})
    assert SceneConfig(occlusion_rate=[0.1, 0.2, 0.3, 0.4]).rates == (0.1, 0.2, 0.3, 0.4)


def test_round_trip_many_scenes(model, tmp_path):
    for seed in range(100):
        cfg = SceneConfig(seed=seed, n_views=1 + seed % 4, pixel_noise=float(seed % 3), occlusion_rate=0.1 * (seed % 5))
        s = generate_scene(model, cfg)
        path = tmp_path / f"{seed}.json"
        write_scene(s, path)
        assert_scenes_equal(s, read_scene(path))


def test_truncated_file_is_rejected(model, tmp_path):
    path = tmp_path / "s.json"
    write_scene(generate_scene(model, SceneConfig(seed=1)), path)
    path.write_text(path.read_text()[:-200])
    with pytest.raises(SceneError, match="malformed"):
        read_scene(path)
    with pytest.raises(SceneError, match="not found"):
        read_scene(tmp_path / "missing.json")


def test_schema_checks(model):
    d = scene_to_dict(generate_scene(model, SceneConfig(seed=1)))
    with pytest.raises(SceneError):
        scene_from_dict({**d, "schema_version": 99})
    with pytest.raises(SceneError):
        scene_from_dict({**d, "kind": "other"})
    broken = json.loads(json.dumps(d))
    del broken["views"][0]["confidence"]
    with pytest.raises(SceneError):
        scene_from_dict(broken)


def test_ground_truth_free_scene_loads(model, tmp_path):
    d = scene_to_dict(generate_scene(model, SceneConfig(seed=4)))
    d["has_ground_truth"] = False
    d.pop("ground_truth")
    for v in d["views"]:
        for k in [k for k in v if k.startswith("gt_")]:
            del v[k]
        v["translation"] = None
    path = tmp_path / "nogt.json"
    path.write_text(json.dumps(d))
    s = read_scene(path)
    assert not s.has_ground_truth and s.ground_truth is None
    assert s.n_views == 4


def test_variant_selection_rules():
    counts = (24, 20, 10, 5)
    assert select_variant(counts, "min_max") == [0, 3]
    assert select_variant(counts, "min_2") == [2, 3]
    assert select_variant(counts, "all_views") == [0, 1, 2, 3]
    assert select_variant((7, 7, 7), "min_max") == [0, 1]
    with pytest.raises(SceneError):
        select_variant((5,), "min_2")
    with pytest.raises(SceneError):
        select_variant(counts, "nope")


def test_ablation_suite_shares_the_base_scene(model):
    suite = ablation_suite(model, SceneConfig(seed=20, occlusion_rate=(0.0, 0.2, 0.5, 0.7)), count=2)
    assert set(suite) == {"all_views", "min_max", "min_2"}
    for n in range(2):
        full = suite["all_views"][n]
        counts = [filter_confidence(d).n_survivors for d in full.detections]
        for v in ("min_max", "min_2"):
            sub = suite[v][n]
            views = select_variant(counts, v)
            assert sub.scene_id.endswith(v) and sub.n_views == 2
            for new, old in enumerate(views):
                assert np.array_equal(sub.detections[new].keypoints, full.detections[old].keypoints)
                assert np.array_equal(sub.ground_truth.keypoints_camera[new], full.ground_truth.keypoints_camera[old])


def test_subset_keeps_selected_views(model):
    s = generate_scene(model, SceneConfig(seed=8))
    sub = subset_scene(model, s, [2, 0], suffix="_x")
    assert sub.scene_id == s.scene_id + "_x"
    assert np.array_equal(sub.detections[0].keypoints, s.detections[2].keypoints)
    assert [d.view_id for d in sub.detections] == [0, 1]
