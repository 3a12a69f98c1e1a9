"""Per-view 2D detections, confidence filtering and reprojection losses."""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModel, BodyParams, keypoints_from_rotmats, keypoints_of
from .geometry import CameraIntrinsics, NonPositiveDepthError, axis_angle_to_matrix

DEFAULT_LAMBDA = 0.3


class ObservationError(ValueError):
    pass


class ViewDepthError(NonPositiveDepthError):
    """Non-positive depth while evaluating a particular view."""

    def __init__(self, view: int, indices):
        self.view = view
        super().__init__(indices)
        self.args = (f"view {view}: non-positive camera depth at keypoint index {self.indices}",)


@dataclass(frozen=True)
class Detection2D:
    """Detected keypoints of one view.

    Attributes:
        view_id: integer view identifier.
        keypoints: ``(k, 2)`` pixel coordinates.
        confidence: ``(k,)`` scores in ``[0, 1]``.
    """

    view_id: int
    keypoints: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=float)
        conf = np.array(self.confidence, dtype=float)
        if kp.ndim != 2 or kp.shape[1] != 2:
            raise ObservationError(f"keypoints must be (k, 2), got {kp.shape}")
        if conf.shape != (kp.shape[0],):
            raise ObservationError(f"confidence must be ({kp.shape[0]},), got {conf.shape}")
        if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
            raise ObservationError("confidences must lie in [0, 1]")
        kp.setflags(write=False)
        conf.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "view_id", int(self.view_id))

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class FilteredDetection:
    """A detection with thresholded weights.

    ``weights[j]`` is the original confidence where it reaches the threshold
    and 0 elsewhere.
    """

    detection: Detection2D
    threshold: float
    weights: np.ndarray = field(repr=False)

    @property
    def keypoints(self) -> np.ndarray:
        return self.detection.keypoints

    @property
    def view_id(self) -> int:
        return self.detection.view_id

    @property
    def n_survivors(self) -> int:
        return int(np.count_nonzero(self.weights))


@dataclass(frozen=True)
class CameraView:
    """Intrinsics plus world-to-camera pose; rotation is identity by convention."""

    intrinsics: CameraIntrinsics
    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float)
        r = np.array(self.rotation, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ObservationError(f"camera translation must be a finite 3-vector, got {t}")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)

    def with_translation(self, t) -> "CameraView":
        return CameraView(self.intrinsics, t, self.rotation)


def filter_confidence(det: Detection2D, threshold: float = DEFAULT_LAMBDA) -> FilteredDetection:
    """Zero the weight of every keypoint whose confidence is below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ObservationError(f"threshold must lie in [0, 1], got {threshold}")
    w = np.where(det.confidence >= threshold, det.confidence, 0.0)
    w.setflags(write=False)
    return FilteredDetection(det, float(threshold), w)


def _check_shapes(model: BodyModel, det: FilteredDetection):
    if det.keypoints.shape[0] != model.n_keypoints:
        raise ObservationError(
            f"detection has {det.keypoints.shape[0]} keypoints but the model regresses {model.n_keypoints}"
        )


def project_with_jacobian(points, cam: CameraView, view: int = 0):
    """Project camera-model points and return ``d pixel / d point`` ``(k, 2, 3)``."""
    X = points @ cam.rotation.T + cam.translation
    z = X[:, 2]
    bad = np.flatnonzero(~(z > 0))
    if bad.size:
        raise ViewDepthError(view, bad)
    f = cam.intrinsics.focal
    cx, cy = cam.intrinsics.principal_point
    uv = np.stack([f * X[:, 0] / z + cx, f * X[:, 1] / z + cy], axis=-1)
    d_cam = np.zeros((X.shape[0], 2, 3))
    d_cam[:, 0, 0] = f / z
    d_cam[:, 1, 1] = f / z
    d_cam[:, 0, 2] = -f * X[:, 0] / z**2
    d_cam[:, 1, 2] = -f * X[:, 1] / z**2
    return uv, d_cam @ cam.rotation


def reprojection_residuals(
    model: BodyModel, params: BodyParams, cam: CameraView, det: FilteredDetection, view: int = 0
) -> np.ndarray:
    """Stacked ``sqrt(w_j) * (detected_j - projected_j)``, length ``2k``.

    The squared norm equals the confidence-weighted reprojection loss.
    """
    _check_shapes(model, det)
    kp3d = keypoints_of(model, params)
    uv, _ = project_with_jacobian(kp3d, cam, view)
    return (np.sqrt(det.weights)[:, None] * (det.keypoints - uv)).reshape(-1)


def loss_2d_single(model: BodyModel, params: BodyParams, cam: CameraView, det: FilteredDetection, view: int = 0) -> float:
    r = reprojection_residuals(model, params, cam, det, view)
    # Compensated sum: losses reach 1e4 px^2, where a plain dot product drifts by ulps.
    return math.fsum(r * r)


def loss_2d_multi(model: BodyModel, canonical, cams, dets) -> float:
    """Summed reprojection loss over views at shared body parameters.

    ``canonical`` provides ``view_params(i)`` and ``translations``; each view's
    camera uses its canonical translation.
    """
    if not (len(cams) == len(dets) == canonical.n_views):
        raise ObservationError(
            f"view count mismatch: {canonical.n_views} canonical, {len(cams)} cameras, {len(dets)} detections"
        )
    total = 0.0
    for i, (cam, det) in enumerate(zip(cams, dets)):
        cam_i = cam.with_translation(canonical.translations[i])
        total += loss_2d_single(model, canonical.view_params(i), cam_i, det, view=i)
    return total


@dataclass(frozen=True)
class ViewLinearization:
    """Residuals of one view with Jacobians w.r.t. its parameter blocks."""

    residuals: np.ndarray  # (2k,)
    d_rot: np.ndarray  # (2k, J, 3), body-frame increments of each local rotation
    d_betas: np.ndarray  # (2k, B)
    d_trans: np.ndarray  # (2k, 3)


def linearize_view(
    model: BodyModel, betas, local_rots, cam: CameraView, det: FilteredDetection, view: int = 0, jacobian: bool = True
) -> ViewLinearization:
    _check_shapes(model, det)
    kj = keypoints_from_rotmats(model, betas, local_rots, jacobian=jacobian)
    uv, d_uv = project_with_jacobian(kj.keypoints, cam, view)
    sw = np.sqrt(det.weights)
    r = (sw[:, None] * (det.keypoints - uv)).reshape(-1)
    if not jacobian:
        return ViewLinearization(r, None, None, None)
    k = det.keypoints.shape[0]
    # residual = -sqrt(w) * d_uv @ d_point; translation enters points before R.
    neg = -sw[:, None, None] * d_uv  # (k, 2, 3)
    d_rot = (neg @ kj.d_rot.reshape(k, 3, -1)).reshape(2 * k, model.n_joints, 3)
    d_betas = (neg @ kj.d_betas).reshape(2 * k, -1)
    d_trans = (neg @ np.linalg.inv(cam.rotation)).reshape(2 * k, 3)
    return ViewLinearization(r, d_rot, d_betas, d_trans)


def params_rotmats(params: BodyParams) -> np.ndarray:
    return axis_angle_to_matrix(params.pose)
