"""Synthetic multi-camera scenes with known ground truth, and their file format."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .body_model import BodyModel, BodyParams, keypoints_of
from .fitting import CanonicalParams
from .geometry import CameraIntrinsics, NonPositiveDepthError, axis_angle_to_matrix, matrix_to_axis_angle, project
from .observations import DEFAULT_LAMBDA, Detection2D, filter_confidence

SCENE_SCHEMA_VERSION = 1
VARIANTS = ("all_views", "min_max", "min_2")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    """Scene sampling parameters.

    ``occlusion_rate`` is a single rate for every view or one rate per view.
    Angles in radians, lengths in meters, noise in pixels.
    """

    n_views: int = 4
    rig_radius: float = 4.5
    rig_height: float = 0.3
    pose_std: float = 0.25
    shape_std: float = 1.0
    tilt_std: float = 0.1
    pixel_noise: float = 0.0
    occlusion_rate: float | tuple[float, ...] = 0.0
    visible_confidence: tuple[float, float] = (0.7, 1.0)
    occluded_confidence: tuple[float, float] = (0.0, 0.25)
    occluded_noise_factor: float = 10.0
    focal: float = 1000.0
    image_size: float = 1000.0
    max_rig_retries: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise SceneError("n_views must be at least 1")
        rates = self.rates
        if len(rates) != self.n_views or any(not 0.0 <= r <= 1.0 for r in rates):
            raise SceneError(f"occlusion rates must be in [0, 1], one per view or a scalar: {self.occlusion_rate}")
        if min(self.pose_std, self.shape_std, self.pixel_noise, self.tilt_std) < 0:
            raise SceneError("standard deviations must be non-negative")
        if self.rig_radius <= 0 or self.focal <= 0:
            raise SceneError("rig radius and focal length must be positive")
        if isinstance(self.occlusion_rate, list):
            object.__setattr__(self, "occlusion_rate", tuple(self.occlusion_rate))
        object.__setattr__(self, "visible_confidence", tuple(self.visible_confidence))
        object.__setattr__(self, "occluded_confidence", tuple(self.occluded_confidence))

    @property
    def rates(self) -> tuple[float, ...]:
        if np.ndim(self.occlusion_rate) == 0:
            return (float(self.occlusion_rate),) * self.n_views
        return tuple(float(r) for r in self.occlusion_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    """Known body and rig.

    Attributes:
        world: body parameters in the world frame (y up).
        canonical: per-view orientation/translation plus the shared body, i.e.
            the values a perfect fit would recover.
        rig_rotations: ``(N, 3, 3)`` world-to-camera rotations.
        rig_translations: ``(N, 3)`` world-to-camera translations.
        keypoints_world: ``(k, 3)``.
        keypoints_camera: ``(N, k, 3)`` keypoints in each camera frame.
    """

    world: BodyParams
    canonical: CanonicalParams
    rig_rotations: np.ndarray
    rig_translations: np.ndarray
    keypoints_world: np.ndarray
    keypoints_camera: np.ndarray


@dataclass(frozen=True)
class Scene:
    scene_id: str
    seed: int
    intrinsics: list[CameraIntrinsics]
    detections: list[Detection2D]
    ground_truth: GroundTruth | None = None
    config: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.detections)

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    down = -np.asarray(up, dtype=float)
    right = np.cross(down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return rot, -rot @ center


def _canonical_from_world(model, world: BodyParams, rig_R, rig_t) -> CanonicalParams:
    # Model output rotates about the shaped rest root, which stays fixed.
    root = model.joint_regressor[0] @ (model.template + model.shape_dirs @ world.betas)
    Rg = axis_angle_to_matrix(world.global_orient)
    orients, trans = [], []
    for R, t in zip(rig_R, rig_t):
        orients.append(matrix_to_axis_angle(R @ Rg))
        trans.append(R @ root + t - root)
    return CanonicalParams(np.stack(orients), np.stack(trans), world.body_pose, world.betas)


def _sample_body(model: BodyModel, cfg: SceneConfig, rng: np.random.Generator) -> BodyParams:
    betas = rng.normal(scale=cfg.shape_std, size=model.n_betas)
    body_pose = rng.normal(scale=cfg.pose_std, size=(model.n_joints - 1, 3))
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    tilt = rng.normal(scale=cfg.tilt_std, size=2)
    orient = matrix_to_axis_angle(
        axis_angle_to_matrix(np.array([tilt[0], 0.0, tilt[1]])) @ axis_angle_to_matrix(np.array([0.0, yaw, 0.0]))
    )
    return BodyParams(betas, orient, body_pose)


def generate_scene(model: BodyModel, cfg: SceneConfig, scene_id: str | None = None) -> Scene:
    """Sample a body, place a camera ring around it and synthesize detections.

    Deterministic in ``cfg`` (including ``cfg.seed``).

    Raises:
        SceneError: no rig radius within the retry budget puts every keypoint
            in front of every camera.
    """
    rng = np.random.default_rng(cfg.seed)
    world = _sample_body(model, cfg, rng)
    kp_world = keypoints_of(model, world)
    target = kp_world.mean(axis=0)
    ring_offset = rng.uniform(0.0, 2.0 * np.pi / cfg.n_views)
    c = cfg.image_size / 2.0
    intr = CameraIntrinsics(cfg.focal, (c, c))

    radius = cfg.rig_radius
    for _ in range(cfg.max_rig_retries):
        rig_R, rig_t, pixels = [], [], []
        try:
            for i in range(cfg.n_views):
                phi = ring_offset + 2.0 * np.pi * i / cfg.n_views
                center = target + np.array([radius * np.sin(phi), cfg.rig_height, radius * np.cos(phi)])
                R, t = look_at(center, target)
                pixels.append(project(kp_world, intr, R, t))
                rig_R.append(R)
                rig_t.append(t)
        except NonPositiveDepthError:
            radius *= 1.25
            continue
        break
    else:
        raise SceneError(f"could not place a {cfg.n_views}-camera rig with positive depths")

    rig_R = np.stack(rig_R)
    rig_t = np.stack(rig_t)
    canonical = _canonical_from_world(model, world, rig_R, rig_t)
    kp_cam = np.einsum("nab,kb->nka", rig_R, kp_world) + rig_t[:, None, :]

    dets = []
    k = kp_world.shape[0]
    for i, rate in enumerate(cfg.rates):
        noise = rng.normal(scale=1.0, size=(k, 2))
        occluded = rng.uniform(size=k) < rate
        u = rng.uniform(size=k)
        lo_v, hi_v = cfg.visible_confidence
        lo_o, hi_o = cfg.occluded_confidence
        conf = np.where(occluded, lo_o + (hi_o - lo_o) * u, lo_v + (hi_v - lo_v) * u)
        scale = np.where(occluded, cfg.occluded_noise_factor * cfg.pixel_noise, cfg.pixel_noise)
        dets.append(Detection2D(i, pixels[i] + scale[:, None] * noise, conf))

    gt = GroundTruth(world, canonical, rig_R, rig_t, kp_world, kp_cam)
    sid = scene_id if scene_id is not None else f"scene_{cfg.seed:06d}"
    return Scene(sid, cfg.seed, [intr] * cfg.n_views, dets, gt, cfg.to_dict())


def survivor_counts(scene: Scene, threshold: float = DEFAULT_LAMBDA) -> list[int]:
    return [filter_confidence(d, threshold).n_survivors for d in scene.detections]


def select_variant(counts, variant: str) -> list[int]:
    """View indices kept by an ablation variant, in ascending index order.

    ``min_max`` keeps the view with most and the view with fewest surviving
    keypoints, ``min_2`` the two with fewest; ties go to the lower index.
    """
    counts = list(counts)
    if variant not in VARIANTS:
        raise SceneError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "all_views":
        return list(range(len(counts)))
    if len(counts) < 2:
        raise SceneError(f"variant {variant} needs at least 2 views")
    ascending = sorted(range(len(counts)), key=lambda i: (counts[i], i))
    if variant == "min_2":
        return sorted(ascending[:2])
    most = sorted(range(len(counts)), key=lambda i: (-counts[i], i))[0]
    fewest = next(i for i in ascending if i != most)
    return sorted([most, fewest])


def subset_scene(model: BodyModel, scene: Scene, views: list[int], suffix: str = "") -> Scene:
    """Scene restricted to ``views`` (re-indexed from 0)."""
    dets = [Detection2D(new, scene.detections[old].keypoints, scene.detections[old].confidence) for new, old in enumerate(views)]
    gt = None
    if scene.ground_truth is not None:
        g = scene.ground_truth
        can = g.canonical
        gt = GroundTruth(
            g.world,
            CanonicalParams(can.global_orients[views], can.translations[views], can.body_pose, can.betas),
            g.rig_rotations[views],
            g.rig_translations[views],
            g.keypoints_world,
            g.keypoints_camera[views],
        )
    config = dict(scene.config, selected_views=list(views))
    return Scene(scene.scene_id + suffix, scene.seed, [scene.intrinsics[i] for i in views], dets, gt, config)


def ablation_suite(
    model: BodyModel,
    base_cfg: SceneConfig,
    variants=VARIANTS,
    count: int = 1,
    threshold: float = DEFAULT_LAMBDA,
) -> dict[str, list[Scene]]:
    """For seeds ``base_cfg.seed .. + count - 1``, the same scenes cut per variant."""
    out: dict[str, list[Scene]] = {v: [] for v in variants}
    for n in range(count):
        scene = generate_scene(model, replace(base_cfg, seed=base_cfg.seed + n))
        counts = survivor_counts(scene, threshold)
        for v in variants:
            out[v].append(subset_scene(model, scene, select_variant(counts, v), suffix=f"_{v}"))
    return out


# --------------------------------------------------------------------------
# file format


def scene_to_dict(scene: Scene) -> dict:
    views = []
    gt = scene.ground_truth
    for i, (k, d) in enumerate(zip(scene.intrinsics, scene.detections)):
        v = {
            "view_id": d.view_id,
            "intrinsics": {"focal": k.focal, "principal_point": list(k.principal_point)},
            "translation": gt.canonical.translations[i].tolist() if gt else None,
            "keypoints": d.keypoints.tolist(),
            "confidence": d.confidence.tolist(),
        }
        if gt:
            v["gt_global_orient"] = gt.canonical.global_orients[i].tolist()
            v["gt_rig_rotation"] = gt.rig_rotations[i].tolist()
            v["gt_rig_translation"] = gt.rig_translations[i].tolist()
            v["gt_keypoints_camera"] = gt.keypoints_camera[i].tolist()
        views.append(v)
    out = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "kind": "scene",
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "config": scene.config,
        "has_ground_truth": gt is not None,
        "units": {"length": "m", "pixels": "px", "angles": "rad (axis-angle)"},
        "views": views,
    }
    if gt:
        out["ground_truth"] = {
            "world": gt.world.to_dict(),
            "betas": gt.canonical.betas.tolist(),
            "body_pose": gt.canonical.body_pose.tolist(),
            "keypoints_world": gt.keypoints_world.tolist(),
        }
    return out


def scene_from_dict(d: dict) -> Scene:
    try:
        if d.get("kind") != "scene":
            raise SceneError("not a scene document (kind != 'scene')")
        if d.get("schema_version") != SCENE_SCHEMA_VERSION:
            raise SceneError(f"unsupported scene schema_version {d.get('schema_version')}")
        intr, dets = [], []
        for v in d["views"]:
            k = v["intrinsics"]
            intr.append(CameraIntrinsics(k["focal"], tuple(k["principal_point"])))
            dets.append(Detection2D(v["view_id"], np.asarray(v["keypoints"], dtype=float), np.asarray(v["confidence"], dtype=float)))
        gt = None
        if d.get("has_ground_truth"):
            g = d["ground_truth"]
            views = d["views"]
            canonical = CanonicalParams(
                np.array([v["gt_global_orient"] for v in views], dtype=float).reshape(-1, 3),
                np.array([v["translation"] for v in views], dtype=float).reshape(-1, 3),
                np.asarray(g["body_pose"], dtype=float),
                np.asarray(g["betas"], dtype=float),
            )
            gt = GroundTruth(
                BodyParams.from_dict(g["world"]),
                canonical,
                np.array([v["gt_rig_rotation"] for v in views], dtype=float).reshape(-1, 3, 3),
                np.array([v["gt_rig_translation"] for v in views], dtype=float).reshape(-1, 3),
                np.asarray(g["keypoints_world"], dtype=float),
                np.array([v["gt_keypoints_camera"] for v in views], dtype=float),
            )
        return Scene(str(d["scene_id"]), int(d["seed"]), intr, dets, gt, d.get("config", {}))
    except SceneError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed scene document: {exc!r}") from exc


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_scene(scene: Scene, path) -> None:
    atomic_write_text(path, json.dumps(scene_to_dict(scene), indent=1))


def read_scene(path) -> Scene:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise SceneError(f"scene file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"malformed scene file {path}: {exc}") from exc
    return scene_from_dict(d)
