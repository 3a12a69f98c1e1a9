"""3D pose metrics: MPJPE, PA-MPJPE, PCK and AUC (millimeters, percent)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import procrustes_align

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = tuple(float(t) for t in np.arange(5.0, 151.0, 5.0))
ROOT_JOINT = 0


class MetricError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise MetricError(f"pred and gt must be matching (k, 3) arrays, got {pred.shape} and {gt.shape}")
    return pred, gt


def root_relative(points: np.ndarray, root: int = ROOT_JOINT) -> np.ndarray:
    return points - points[root]


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=1)


def mpjpe(pred, gt) -> float:
    return float(np.mean(joint_errors(pred, gt)))


def align(pred, gt, with_scale: bool = True) -> np.ndarray:
    """``pred`` after Procrustes alignment onto ``gt``."""
    pred, gt = _pair(pred, gt)
    return procrustes_align(pred, gt, with_scale=with_scale).aligned


def pa_mpjpe(pred, gt, with_scale: bool = True) -> float:
    return mpjpe(align(pred, gt, with_scale), gt)


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    """Percentage of joints whose error is strictly below the threshold."""
    err = joint_errors(pred, gt)
    return float(100.0 * np.mean(err < threshold_mm))


def auc(pred, gt, thresholds_mm=AUC_THRESHOLDS_MM) -> float:
    """Mean PCK over an ascending threshold grid."""
    thresholds = np.asarray(thresholds_mm, dtype=float)
    if thresholds.size == 0:
        raise MetricError("AUC needs a non-empty threshold grid")
    if np.any(np.diff(thresholds) <= 0):
        raise MetricError("AUC thresholds must be strictly ascending")
    err = joint_errors(pred, gt)
    return float(100.0 * np.mean(err[None, :] < thresholds[:, None]))


@dataclass(frozen=True)
class PoseError:
    """Errors of one prediction.

    ``pck``/``auc`` use the absolute (optionally root-relative) prediction,
    ``pa_pck``/``pa_auc`` the Procrustes-aligned one. Alignment minimizes the
    squared error, so ``pa_mpjpe`` can exceed ``mpjpe`` when errors are
    dominated by a few outlying joints.
    """

    joint_errors: np.ndarray
    mpjpe: float
    pa_mpjpe: float
    pck: float
    auc: float
    pa_pck: float
    pa_auc: float

    def row(self) -> dict:
        return {
            "mpjpe": self.mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "pck": self.pck,
            "auc": self.auc,
            "pa_pck": self.pa_pck,
            "pa_auc": self.pa_auc,
        }


def evaluate(
    pred_mm,
    gt_mm,
    root_relative_eval: bool = True,
    pck_threshold_mm: float = PCK_THRESHOLD_MM,
    auc_thresholds_mm=AUC_THRESHOLDS_MM,
    with_scale: bool = True,
    root: int = ROOT_JOINT,
) -> PoseError:
    """All metrics for one pose pair given in millimeters.

    ``root_relative_eval`` subtracts the root joint before the absolute
    metrics; the aligned metrics never need it.
    """
    pred, gt = _pair(pred_mm, gt_mm)
    p_abs, g_abs = (root_relative(pred, root), root_relative(gt, root)) if root_relative_eval else (pred, gt)
    aligned = align(pred, gt, with_scale)
    return PoseError(
        joint_errors=joint_errors(p_abs, g_abs),
        mpjpe=mpjpe(p_abs, g_abs),
        pa_mpjpe=mpjpe(aligned, gt),
        pck=pck(p_abs, g_abs, pck_threshold_mm),
        auc=auc(p_abs, g_abs, auc_thresholds_mm),
        pa_pck=pck(aligned, gt, pck_threshold_mm),
        pa_auc=auc(aligned, gt, auc_thresholds_mm),
    )
