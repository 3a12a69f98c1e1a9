"""Two-stage body and camera fitting from confidence-weighted 2D keypoints.

Stage one fits every view on its own (global orientation, camera translation,
body pose and shape) starting from mean parameters. Stage two screens the
view with the smallest reprojection loss, seeds a canonical parameter set with
its body, and jointly refines per-view orientations and translations together
with a single shared body pose and shape.

Rotations are optimized in the continuous 6D representation and reported as
axis-angle. Both stages minimize a sum of squares assembled by ``_Problem``:

    alpha * sum_i ||sqrt(w_i) (detected_i - projected_i)||^2
      + w_beta  ||beta - beta_ref||^2
      + w_pose  ||body_pose - body_pose_ref||^2
      + w_root  sum_i ||orient_i - orient_ref_i||^2
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .body_model import BodyModel, BodyParams, keypoints_of
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    axis_angle_to_matrix,
    matrix_to_axis_angle,
    matrix_to_rot6d,
    right_jacobian_inv,
    rot6d_tangent_jacobian,
    rot6d_to_matrix,
)
from .observations import (
    DEFAULT_LAMBDA,
    CameraView,
    FilteredDetection,
    ViewDepthError,
    filter_confidence,
    linearize_view,
    loss_2d_single,
)
from .solver import SolverConfig, SolverDiagnostics, SolverError, solve_least_squares

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


class UnderConstrainedError(FitError):
    pass


class DivergenceError(FitError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Weights, thresholds and solver settings for both stages.

    ``shape_prior_weight`` and ``pose_prior_weight`` are stage-one
    regularizers in pixel^2 per unit^2; ``gamma`` weights the stage-two anchor.
    """

    alpha: float = 1.0
    gamma: float = 0.1
    threshold: float = DEFAULT_LAMBDA
    max_iterations: int = 100
    step_tol: float = 1e-10
    grad_tol: float = 1e-8
    rel_loss_tol: float = 1e-12
    initial_damping: float = 1e-3
    shape_prior_weight: float = 1.0
    pose_prior_weight: float = 1.0
    mean_orient: tuple[float, float, float] = (np.pi, 0.0, 0.0)
    mean_translation: tuple[float, float, float] = (0.0, 0.0, 5.0)
    orientation_restarts: int = 4
    camera_warmup: bool = True
    min_keypoints: int = 6
    anchor_rounds: int = 5
    anchor_tol: float = 1e-12
    stage2_starts: int = 2

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be non-negative")
        for name in ("step_tol", "grad_tol", "rel_loss_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.anchor_rounds < 1:
            raise ValueError("anchor_rounds must be at least 1")
        if self.orientation_restarts < 1:
            raise ValueError("orientation_restarts must be at least 1")
        if self.stage2_starts < 1:
            raise ValueError("stage2_starts must be at least 1")
        object.__setattr__(self, "mean_orient", tuple(float(v) for v in self.mean_orient))
        object.__setattr__(self, "mean_translation", tuple(float(v) for v in self.mean_translation))

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(
            max_iterations=self.max_iterations,
            step_tol=self.step_tol,
            grad_tol=self.grad_tol,
            rel_loss_tol=self.rel_loss_tol,
            initial_damping=self.initial_damping,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_orient"] = list(self.mean_orient)
        d["mean_translation"] = list(self.mean_translation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CanonicalParams:
    """Per-view ``(global_orient, translation)`` plus one shared body.

    Attributes:
        global_orients: ``(N, 3)`` axis-angle per view.
        translations: ``(N, 3)`` camera translation per view, meters.
        body_pose: ``(J-1, 3)`` shared by all views.
        betas: ``(B,)`` shared by all views.
    """

    global_orients: np.ndarray
    translations: np.ndarray
    body_pose: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        for name in ("global_orients", "translations", "body_pose", "betas"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.global_orients.shape != self.translations.shape or self.global_orients.shape[1:] != (3,):
            raise ValueError("need exactly one (global_orient, translation) pair per view")

    @property
    def n_views(self) -> int:
        return self.global_orients.shape[0]

    def view_params(self, i: int) -> BodyParams:
        return BodyParams(self.betas, self.global_orients[i], self.body_pose)

    def to_dict(self) -> dict:
        return {
            "global_orients": self.global_orients.tolist(),
            "translations": self.translations.tolist(),
            "body_pose": self.body_pose.tolist(),
            "betas": self.betas.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CanonicalParams":
        return cls(
            np.asarray(d["global_orients"], dtype=float).reshape(-1, 3),
            np.asarray(d["translations"], dtype=float).reshape(-1, 3),
            np.asarray(d["body_pose"], dtype=float),
            np.asarray(d["betas"], dtype=float),
        )


@dataclass
class ViewFit:
    """Stage-one outcome for one view.

    ``loss`` is the full stage-one objective, ``loss_2d`` its reprojection
    part. ``status`` is ``"ok"``, ``"camera_only"`` (too few keypoints for a
    body fit; only orientation and translation were fitted against the
    screened body) or ``"inert"``.
    """

    params: BodyParams
    translation: np.ndarray
    loss: float
    loss_2d: float
    n_survivors: int
    status: str = "ok"
    traces: list[list[float]] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "translation": np.asarray(self.translation).tolist(),
            "loss": self.loss,
            "loss_2d": self.loss_2d,
            "n_survivors": self.n_survivors,
            "status": self.status,
            "traces": self.traces,
            "diagnostics": self.diagnostics,
        }


@dataclass
class StageOneResult:
    views: list[ViewFit]

    @property
    def n_views(self) -> int:
        return len(self.views)

    def to_dict(self) -> dict:
        return {"views": [v.to_dict() for v in self.views]}


@dataclass(frozen=True)
class Anchor:
    """Stage-two reference values: screened body and stage-one orientations.

    ``global_orients`` rows of views without a stage-one estimate are NaN and
    contribute no anchor residual.
    """

    betas: np.ndarray
    body_pose: np.ndarray
    global_orients: np.ndarray


@dataclass
class MultiViewResult:
    canonical: CanonicalParams
    keypoints_body: np.ndarray
    keypoints_camera: np.ndarray
    reference_view: int
    loss_2d: float
    anchor_loss: float
    total_loss: float
    inert_views: list[int]
    diagnostics: SolverDiagnostics
    rounds: list[SolverDiagnostics] = field(default_factory=list)
    first_round: tuple[float, float] | None = None


# --------------------------------------------------------------------------
# residual assembly


def _aa_near(rots: np.ndarray, refs: np.ndarray | None) -> np.ndarray:
    """Axis-angle of ``rots`` ``(n, 3, 3)``; per row, of the two shortest
    equivalent vectors the one closer to ``refs`` (NaN rows mean no preference)."""
    aa = matrix_to_axis_angle(rots, atol=1e-8)
    if refs is None:
        return aa
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    alt = aa * (1.0 - 2.0 * np.pi / np.where(theta < 1e-12, 1.0, theta))
    closer = np.linalg.norm(alt - refs, axis=-1) < np.linalg.norm(aa - refs, axis=-1)
    closer &= theta[:, 0] >= 1e-12
    return np.where(closer[:, None], alt, aa)


class _Problem:
    """Residual vector and analytic Jacobian over the canonical parameters.

    Layout: ``[body 6D (J-1)*6 | betas B | view_0 (root 6D, t) | view_1 ...]``.
    ``free`` selects the optimized coordinates; the rest stay at ``base``.
    """

    def __init__(
        self,
        model: BodyModel,
        cams: list[CameraView],
        dets: list[FilteredDetection],
        alpha: float,
        betas_ref: np.ndarray,
        betas_weight: float,
        body_ref: np.ndarray,
        body_weight: float,
        root_refs: np.ndarray | None = None,
        root_weight: float = 0.0,
    ):
        self.model = model
        self.cams = cams
        self.dets = dets
        self.alpha = alpha
        self.nj = model.n_joints
        self.nb = model.n_betas
        self.nv = len(cams)
        self.betas_ref = np.asarray(betas_ref, dtype=float)
        self.betas_weight = betas_weight
        self.body_ref = np.asarray(body_ref, dtype=float)
        self.body_weight = body_weight
        self.root_refs = None if root_refs is None else np.asarray(root_refs, dtype=float)
        self.root_weight = root_weight
        self.n_body = (self.nj - 1) * 6
        self.size = self.n_body + self.nb + 9 * self.nv
        self.base = np.zeros(self.size)
        self.free = np.arange(self.size)

    # layout helpers
    def betas_slice(self) -> slice:
        return slice(self.n_body, self.n_body + self.nb)

    def root_slice(self, i: int) -> slice:
        s = self.n_body + self.nb + 9 * i
        return slice(s, s + 6)

    def trans_slice(self, i: int) -> slice:
        s = self.n_body + self.nb + 9 * i + 6
        return slice(s, s + 3)

    def pack(self, body_pose, betas, roots, trans) -> np.ndarray:
        x = np.empty(self.size)
        x[: self.n_body] = matrix_to_rot6d(axis_angle_to_matrix(np.asarray(body_pose))).reshape(-1)
        x[self.betas_slice()] = betas
        for i in range(self.nv):
            x[self.root_slice(i)] = matrix_to_rot6d(axis_angle_to_matrix(np.asarray(roots[i])))
            x[self.trans_slice(i)] = trans[i]
        return x

    def unpack(self, x):
        body6 = x[: self.n_body].reshape(self.nj - 1, 6)
        betas = x[self.betas_slice()]
        roots6 = np.stack([x[self.root_slice(i)] for i in range(self.nv)])
        trans = np.stack([x[self.trans_slice(i)] for i in range(self.nv)])
        return body6, betas, roots6, trans

    def to_axis_angle(self, x):
        body6, betas, roots6, trans = self.unpack(x)
        body_pose = _aa_near(rot6d_to_matrix(body6), None if self.body_weight == 0 else self.body_ref)
        roots = _aa_near(rot6d_to_matrix(roots6), self.root_refs)
        return body_pose, betas.copy(), roots, trans.copy()

    def full(self, xs: np.ndarray) -> np.ndarray:
        x = self.base.copy()
        x[self.free] = xs
        return x

    def _root_active(self, i: int) -> bool:
        return self.root_weight > 0 and self.root_refs is not None and not np.any(np.isnan(self.root_refs[i]))

    def evaluate(self, x: np.ndarray, jacobian: bool):
        body6, betas, roots6, trans = self.unpack(x)
        body_R = rot6d_to_matrix(body6)
        roots_R = rot6d_to_matrix(roots6)
        sa = np.sqrt(self.alpha)
        blocks, jblocks = [], []
        if jacobian:
            body_D = rot6d_tangent_jacobian(body6)
            roots_D = rot6d_tangent_jacobian(roots6)
        for i, (cam, det) in enumerate(zip(self.cams, self.dets)):
            local = np.concatenate([roots_R[i][None], body_R], axis=0)
            lin = linearize_view(self.model, betas, local, cam.with_translation(trans[i]), det, view=i, jacobian=jacobian)
            blocks.append(sa * lin.residuals)
            if jacobian:
                Jv = np.zeros((lin.residuals.size, self.size))
                body_cols = np.swapaxes(lin.d_rot[:, 1:], 0, 1) @ body_D  # (J-1, 2k, 6)
                Jv[:, : self.n_body] = np.swapaxes(body_cols, 0, 1).reshape(lin.residuals.size, -1)
                Jv[:, self.betas_slice()] = lin.d_betas
                Jv[:, self.root_slice(i)] = lin.d_rot[:, 0] @ roots_D[i]
                Jv[:, self.trans_slice(i)] = lin.d_trans
                jblocks.append(sa * Jv)
        if self.betas_weight > 0:
            sw = np.sqrt(self.betas_weight)
            blocks.append(sw * (betas - self.betas_ref))
            if jacobian:
                Jb = np.zeros((self.nb, self.size))
                Jb[:, self.betas_slice()] = sw * np.eye(self.nb)
                jblocks.append(Jb)
        if self.body_weight > 0:
            sw = np.sqrt(self.body_weight)
            aa = _aa_near(body_R, self.body_ref)
            blocks.append(sw * (aa - self.body_ref).reshape(-1))
            if jacobian:
                Jp = np.zeros(((self.nj - 1) * 3, self.size))
                dj = right_jacobian_inv(aa) @ body_D  # (J-1, 3, 6)
                for j in range(self.nj - 1):
                    Jp[3 * j : 3 * j + 3, 6 * j : 6 * j + 6] = sw * dj[j]
                jblocks.append(Jp)
        for i in range(self.nv):
            if not self._root_active(i):
                continue
            sw = np.sqrt(self.root_weight)
            aa = _aa_near(roots_R[i : i + 1], self.root_refs[i : i + 1])[0]
            blocks.append(sw * (aa - self.root_refs[i]))
            if jacobian:
                Jr = np.zeros((3, self.size))
                Jr[:, self.root_slice(i)] = sw * right_jacobian_inv(aa) @ roots_D[i]
                jblocks.append(Jr)
        r = np.concatenate(blocks)
        if not jacobian:
            return r, None
        return r, np.concatenate(jblocks, axis=0)

    def retract(self, xs: np.ndarray) -> np.ndarray:
        """Re-orthonormalize every 6D block; the rotations do not change."""
        x = self.full(xs)
        blocks = [np.arange(self.n_body)] + [np.arange(self.size)[self.root_slice(i)] for i in range(self.nv)]
        for idx in blocks:
            r6 = x[idx].reshape(-1, 6)
            x[idx] = matrix_to_rot6d(rot6d_to_matrix(r6), atol=1e-6).reshape(-1)
        return x[self.free]

    def residuals(self, xs: np.ndarray) -> np.ndarray:
        return self.evaluate(self.full(xs), jacobian=False)[0]

    def jacobian(self, xs: np.ndarray) -> np.ndarray:
        return self.evaluate(self.full(xs), jacobian=True)[1][:, self.free]

    def loss_parts(self, x: np.ndarray) -> tuple[float, float]:
        """Unweighted summed reprojection loss and weighted prior/anchor loss."""
        r, _ = self.evaluate(x, jacobian=False)
        n2d = sum(2 * d.keypoints.shape[0] for d in self.dets)
        l2d = float(r[:n2d] @ r[:n2d])
        l2d = l2d / self.alpha if self.alpha > 0 else float("nan")
        return l2d, float(r[n2d:] @ r[n2d:])

    def solve(self, x0: np.ndarray, cfg: FitConfig, free: np.ndarray | None = None):
        self.base = np.array(x0, dtype=float)
        self.free = np.arange(self.size) if free is None else np.asarray(free)
        try:
            xs, diag = solve_least_squares(
                self.residuals,
                self.base[self.free],
                cfg.solver,
                jac=self.jacobian,
                reject_on=(GeometryError,),
                retract=self.retract,
            )
        except SolverError as exc:
            raise DivergenceError(str(exc)) from exc
        return self.full(xs), diag


# --------------------------------------------------------------------------
# stage one


def mean_init(model: BodyModel, cfg: FitConfig | None = None) -> tuple[BodyParams, np.ndarray]:
    """Mean body (zero shape, rest pose) upright in front of the camera."""
    cfg = cfg or FitConfig()
    params = BodyParams(np.zeros(model.n_betas), np.asarray(cfg.mean_orient), np.zeros((model.n_joints - 1, 3)))
    return params, np.asarray(cfg.mean_translation, dtype=float)


def _yaw_restarts(cfg: FitConfig) -> list[np.ndarray]:
    """Mean orientation composed with evenly spaced turns about the body's vertical axis."""
    base = axis_angle_to_matrix(np.asarray(cfg.mean_orient))
    out = []
    for k in range(cfg.orientation_restarts):
        yaw = 2.0 * np.pi * k / cfg.orientation_restarts
        out.append(matrix_to_axis_angle(base @ axis_angle_to_matrix(np.array([0.0, yaw, 0.0]))))
    return out


def _stage_one_problem(model, intrinsics, det, cfg) -> _Problem:
    nb, nj = model.n_betas, model.n_joints
    return _Problem(
        model,
        [CameraView(intrinsics, np.zeros(3))],
        [det],
        cfg.alpha,
        np.zeros(nb),
        cfg.shape_prior_weight,
        np.zeros((nj - 1, 3)),
        cfg.pose_prior_weight,
    )


def _camera_indices(prob: _Problem, i: int = 0) -> np.ndarray:
    return np.r_[np.arange(prob.size)[prob.root_slice(i)], np.arange(prob.size)[prob.trans_slice(i)]]


def _view_fit_from(prob: _Problem, x, traces, diags, status="ok") -> ViewFit:
    body_pose, betas, roots, trans = prob.to_axis_angle(x)
    l2d, prior = prob.loss_parts(x)
    params = BodyParams(betas, roots[0], body_pose)
    loss = prob.alpha * l2d + prior
    merged = {
        "iterations": sum(d.iterations for d in diags),
        "accepted_steps": sum(d.accepted_steps for d in diags),
        "final_grad_norm": diags[-1].final_grad_norm if diags else 0.0,
        "termination": diags[-1].termination if diags else "",
    }
    return ViewFit(params, trans[0], loss, l2d, prob.dets[0].n_survivors, status, traces, merged)


def fit_single_view(
    model: BodyModel,
    intrinsics: CameraIntrinsics,
    det: FilteredDetection,
    cfg: FitConfig | None = None,
    init: tuple[BodyParams, np.ndarray] | None = None,
) -> ViewFit:
    """Fit orientation, translation, body pose and shape to one view.

    Without ``init`` the fit starts from ``mean_init`` and is repeated for
    ``cfg.orientation_restarts`` yaw turns of the mean orientation (each run
    fits the camera alone first when ``cfg.camera_warmup``); the run with the
    lowest objective wins, ties to the earliest.

    Raises:
        UnderConstrainedError: fewer than ``cfg.min_keypoints`` survivors.
        DivergenceError: the solver produced non-finite values.
    """
    cfg = cfg or FitConfig()
    if det.n_survivors < cfg.min_keypoints:
        raise UnderConstrainedError(
            f"view {det.view_id}: {det.n_survivors} surviving keypoints, need at least {cfg.min_keypoints}"
        )
    prob = _stage_one_problem(model, intrinsics, det, cfg)
    if init is not None:
        params, t = init
        x0 = prob.pack(params.body_pose, params.betas, [params.global_orient], [t])
        x, diag = prob.solve(x0, cfg)
        return _view_fit_from(prob, x, [diag.loss_trace], [diag])

    params, t = mean_init(model, cfg)
    best = None
    for orient in _yaw_restarts(cfg):
        x0 = prob.pack(params.body_pose, params.betas, [orient], [t])
        traces, diags = [], []
        try:
            if cfg.camera_warmup:
                x0, d0 = prob.solve(x0, cfg, free=_camera_indices(prob))
                traces.append(d0.loss_trace)
                diags.append(d0)
            x, d1 = prob.solve(x0, cfg)
        except ViewDepthError:
            # the mean placement itself is behind the camera for this restart
            continue
        traces.append(d1.loss_trace)
        diags.append(d1)
        fit = _view_fit_from(prob, x, traces, diags)
        if best is None or fit.loss < best.loss:
            best = fit
    if best is None:
        raise DivergenceError(f"view {det.view_id}: no restart produced positive depths")
    return best


def fit_camera_only(
    model: BodyModel,
    intrinsics: CameraIntrinsics,
    det: FilteredDetection,
    body: BodyParams,
    cfg: FitConfig | None = None,
    extra_starts=(),
) -> ViewFit:
    """Orientation and translation against a fixed body.

    Starts from the yaw restarts at the mean translation plus any
    ``(orientation, translation)`` pairs in ``extra_starts``; the start with
    the lowest reprojection loss wins, ties to the earliest.
    """
    cfg = cfg or FitConfig()
    prob = _stage_one_problem(model, intrinsics, det, cfg)
    _, t = mean_init(model, cfg)
    starts = [(orient, t) for orient in _yaw_restarts(cfg)] + [(np.asarray(o), np.asarray(tt)) for o, tt in extra_starts]
    best = None
    for orient, t0 in starts:
        x0 = prob.pack(body.body_pose, body.betas, [orient], [t0])
        try:
            x, d = prob.solve(x0, cfg, free=_camera_indices(prob))
        except ViewDepthError:
            continue
        fit = _view_fit_from(prob, x, [d.loss_trace], [d], status="camera_only")
        if best is None or fit.loss_2d < best.loss_2d:
            best = fit
    if best is None:
        raise DivergenceError(f"view {det.view_id}: camera-only fit failed")
    return best


def inert_view_fit(model: BodyModel, det: FilteredDetection, cfg: FitConfig) -> ViewFit:
    params, t = mean_init(model, cfg)
    return ViewFit(params, t, 0.0, 0.0, det.n_survivors, status="inert")


# --------------------------------------------------------------------------
# stage two


def screening_losses(model: BodyModel, stage1: StageOneResult, cams, dets) -> list[float]:
    """Reprojection loss of every view at its own stage-one fit; ``inf`` unless fitted."""
    if stage1.n_views == 0:
        raise FitError("screening needs at least one view")
    losses = []
    for i, vf in enumerate(stage1.views):
        if vf.status != "ok":
            losses.append(np.inf)
            continue
        cam = cams[i].with_translation(vf.translation)
        losses.append(loss_2d_single(model, vf.params, cam, dets[i], view=i))
    return losses


def rank_views(losses) -> list[int]:
    """Finite-loss views by ascending loss, ties to the lower index."""
    return [i for i in sorted(range(len(losses)), key=lambda i: (losses[i], i)) if np.isfinite(losses[i])]


def screen_best_view(model: BodyModel, stage1: StageOneResult, cams, dets) -> tuple[int, np.ndarray, np.ndarray]:
    """View with the least reprojection loss at its own stage-one fit.

    Only views with a full stage-one fit (``status == "ok"``) compete; ties go
    to the lowest index. Returns ``(index, body_pose, betas)``.
    """
    best = select_view(screening_losses(model, stage1, cams, dets))
    return best, stage1.views[best].params.body_pose, stage1.views[best].params.betas


def select_view(losses) -> int:
    """Argmin with ties to the lowest index."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise FitError("no views to select from")
    if np.all(np.isinf(losses)):
        raise FitError("no view has a usable stage-one fit")
    return int(np.argmin(losses))


def assemble_canonical(stage1: StageOneResult, screened) -> CanonicalParams:
    """Per-view orientation and translation from stage one, shared body from ``screened``."""
    _, body_pose, betas = screened
    return CanonicalParams(
        np.stack([v.params.global_orient for v in stage1.views]),
        np.stack([np.asarray(v.translation) for v in stage1.views]),
        body_pose,
        betas,
    )


def anchor_from(stage1: StageOneResult, screened) -> Anchor:
    _, body_pose, betas = screened
    orients = np.stack(
        [v.params.global_orient if v.status != "inert" else np.full(3, np.nan) for v in stage1.views]
    )
    return Anchor(np.asarray(betas), np.asarray(body_pose), orients)


def _multi_view_problem(model, cams, dets, cfg, anchor: Anchor) -> _Problem:
    return _Problem(
        model,
        cams,
        dets,
        cfg.alpha,
        anchor.betas,
        cfg.gamma,
        anchor.body_pose,
        cfg.gamma,
        anchor.global_orients,
        cfg.gamma,
    )


def fit_multi_view(
    model: BodyModel,
    canonical_init: CanonicalParams,
    cams: list[CameraView],
    dets: list[FilteredDetection],
    cfg: FitConfig,
    anchor: Anchor,
) -> MultiViewResult:
    """Joint refinement of all views with one shared body pose and shape.

    Minimizes ``alpha * summed reprojection loss + gamma * anchor`` where the
    anchor is the squared distance of the shared body to the screened body plus
    that of every view orientation to its stage-one value. Translations are not
    anchored. Views without surviving keypoints are inert and only feel the
    anchor.

    The first solve anchors on ``anchor``. Up to ``cfg.anchor_rounds - 1``
    further solves re-anchor on the previous solution, stopping once the anchor
    loss falls to ``cfg.anchor_tol``; with one round the objective is exactly
    the stage-one-anchored one. Each round is a separate strictly descending
    trace in ``rounds``; ``first_round`` keeps its ``(loss_2d, anchor_loss)``.

    The body-frame keypoints use the orientation of the first non-inert view
    and no translation; camera-frame keypoints are given for every view.
    """
    n = canonical_init.n_views
    if not (len(cams) == len(dets) == n):
        raise FitError(f"view count mismatch: {n} canonical, {len(cams)} cameras, {len(dets)} detections")
    inert = [i for i, d in enumerate(dets) if d.n_survivors == 0]
    if len(inert) == n:
        raise FitError("all views are inert (no surviving keypoints)")
    x = None
    rounds = []
    first = None
    for _ in range(cfg.anchor_rounds):
        prob = _multi_view_problem(model, cams, dets, cfg, anchor)
        if x is None:
            x = prob.pack(
                canonical_init.body_pose, canonical_init.betas, canonical_init.global_orients, canonical_init.translations
            )
        x, diag = prob.solve(x, cfg)
        rounds.append(diag)
        body_pose, betas, roots, trans = prob.to_axis_angle(x)
        l2d, anchor_loss = prob.loss_parts(x)
        if first is None:
            first = (l2d, anchor_loss)
        if anchor_loss <= cfg.anchor_tol or cfg.gamma == 0:
            break
        # next round: re-anchor on the current multi-view optimum
        keep = ~np.isnan(anchor.global_orients[:, 0])
        anchor = Anchor(betas, body_pose, np.where(keep[:, None], roots, np.nan))

    canonical = CanonicalParams(roots, trans, body_pose, betas)
    ref = next(i for i in range(n) if i not in inert)
    kp_body = keypoints_of(model, canonical.view_params(ref))
    kp_cam = np.stack(
        [keypoints_of(model, canonical.view_params(i)) @ cams[i].rotation.T + trans[i] for i in range(n)]
    )
    return MultiViewResult(
        canonical=canonical,
        keypoints_body=kp_body,
        keypoints_camera=kp_cam,
        reference_view=ref,
        loss_2d=l2d,
        anchor_loss=anchor_loss,
        total_loss=rounds[-1].final_loss,
        inert_views=inert,
        diagnostics=rounds[-1],
        rounds=rounds,
        first_round=first,
    )


def stage_two_jacobians(model, canonical: CanonicalParams, cams, dets, cfg: FitConfig, anchor: Anchor):
    """Residual function, analytic Jacobian and packed point of the stage-two problem."""
    prob = _multi_view_problem(model, cams, dets, cfg, anchor)
    x = prob.pack(canonical.body_pose, canonical.betas, canonical.global_orients, canonical.translations)
    return prob.residuals, prob.jacobian, x


# --------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    stage1: StageOneResult
    screened_view: int | None = None
    seated: StageOneResult | None = None  # cameras re-fitted against the stage-two source body
    canonical_init: CanonicalParams | None = None
    stage2_source: int | None = None
    stage2: MultiViewResult | None = None


def run_stage_one(model, intrinsics_list, dets, cfg: FitConfig) -> StageOneResult:
    return StageOneResult([_stage_one_view(model, k, d, cfg) for k, d in zip(intrinsics_list, dets)])


def _stage_one_view(model, intrinsics, det, cfg) -> ViewFit:
    if det.n_survivors < cfg.min_keypoints:
        # refit against the screened body later; placeholder keeps indices aligned
        return ViewFit(*mean_init(model, cfg), 0.0, 0.0, det.n_survivors, status="deferred")
    return fit_single_view(model, intrinsics, det, cfg)


def run_pipeline(
    model: BodyModel,
    intrinsics_list: list[CameraIntrinsics],
    detections,
    cfg: FitConfig | None = None,
    mode: str = "full",
) -> PipelineResult:
    """Filter, fit every view, then (``mode="full"``) screen and refine jointly.

    Views with fewer than ``cfg.min_keypoints`` survivors skip the body fit;
    in full mode they get a camera-only fit against the screened body when at
    least three keypoints survive and are otherwise inert. Before stage two
    every other fitted view's camera is re-fitted against the screened body
    (from the yaw restarts and from its own stage-one camera); these seated
    cameras initialize and anchor the per-view orientations.

    A single view can fit its keypoints well with a wrong body, so stage two
    runs from the bodies of the ``cfg.stage2_starts`` best-screened views and
    keeps the lowest final objective (ties to the better-screened view).
    ``screened_view`` is always the best-screened view; ``stage2_source`` the
    view whose body seeded the kept stage-two result.
    """
    cfg = cfg or FitConfig()
    if mode not in ("stage1", "full"):
        raise ValueError(f"mode must be 'stage1' or 'full', got {mode!r}")
    dets = [d if isinstance(d, FilteredDetection) else filter_confidence(d, cfg.threshold) for d in detections]
    stage1 = run_stage_one(model, intrinsics_list, dets, cfg)
    result = PipelineResult(stage1)
    if mode == "stage1":
        return result

    cams = [CameraView(k, np.zeros(3)) for k in intrinsics_list]
    ranked = rank_views(screening_losses(model, stage1, cams, dets))
    if not ranked:
        raise FitError("no view has a usable stage-one fit")
    result.screened_view = ranked[0]
    best = None
    for source in ranked[: cfg.stage2_starts]:
        seated, screened = _seat_views(model, intrinsics_list, dets, stage1, source, cfg)
        canonical = assemble_canonical(seated, screened)
        stage2 = fit_multi_view(model, canonical, cams, dets, cfg, anchor_from(seated, screened))
        if best is None or stage2.total_loss < best[2].total_loss:
            best = (seated, canonical, stage2, source)
    result.seated, result.canonical_init, result.stage2, result.stage2_source = best
    # sparse views report their camera-only fit against the kept body
    for i, vf in enumerate(stage1.views):
        if vf.status == "deferred":
            stage1.views[i] = result.seated.views[i]
    return result


def _seat_views(model, intrinsics_list, dets, stage1: StageOneResult, source: int, cfg: FitConfig):
    """Per-view cameras against the body of view ``source``."""
    src = stage1.views[source].params
    body = BodyParams(src.betas, np.zeros(3), src.body_pose)
    seated = StageOneResult(list(stage1.views))
    for i, vf in enumerate(stage1.views):
        if vf.status == "deferred":
            if dets[i].n_survivors >= 3:
                seated.views[i] = fit_camera_only(model, intrinsics_list[i], dets[i], body, cfg)
            else:
                seated.views[i] = inert_view_fit(model, dets[i], cfg)
        elif vf.status == "ok" and i != source:
            # A view's own orientation fits its own body, which may be a mirrored
            # solution; re-seat the camera against the source body.
            seated.views[i] = fit_camera_only(
                model, intrinsics_list[i], dets[i], body, cfg, extra_starts=[(vf.params.global_orient, vf.translation)]
            )
    return seated, (source, src.body_pose, src.betas)


def with_overrides(cfg: FitConfig, **kw) -> FitConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
