"""Damped Gauss-Newton (Levenberg-Marquardt) for sums of squared residuals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import NonPositiveDepthError

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Non-finite residuals or Jacobian; ``iteration`` says where."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    step_tol: float = 1e-10
    grad_tol: float = 1e-8
    rel_loss_tol: float = 1e-12
    initial_damping: float = 1e-3
    max_damping: float = 1e16


@dataclass
class SolverDiagnostics:
    iterations: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    depth_rejections: int = 0  # includes any ``reject_on`` trial failure
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_grad_norm: float = float("nan")
    termination: str = ""
    loss_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "accepted_steps": self.accepted_steps,
            "rejected_steps": self.rejected_steps,
            "depth_rejections": self.depth_rejections,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "final_grad_norm": self.final_grad_norm,
            "termination": self.termination,
            "loss_trace": list(self.loss_trace),
        }


def numeric_jacobian(fun: Callable, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences, one column per parameter."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=1)


def _retracted(fun, retract, x, r, loss, previous_loss, reject_on):
    try:
        xr = retract(x)
        rr = np.asarray(fun(xr), dtype=float)
    except reject_on:
        return x, r, loss
    lr = float(rr @ rr)
    if np.isfinite(lr) and lr < previous_loss:
        return xr, rr, lr
    return x, r, loss


def solve_least_squares(
    fun: Callable[[np.ndarray], np.ndarray],
    x0,
    cfg: SolverConfig | None = None,
    jac: Callable[[np.ndarray], np.ndarray] | None = None,
    reject_on: tuple[type[BaseException], ...] = (NonPositiveDepthError,),
    retract: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, SolverDiagnostics]:
    """Minimize ``||fun(x)||^2`` from ``x0``.

    Uses Nielsen's damping update. A step is accepted only if it strictly
    lowers the loss, so ``diagnostics.loss_trace`` is strictly decreasing.
    A trial point at which ``fun`` raises one of ``reject_on`` (by default a
    depth violation) counts as a rejected step: more damping, shorter step.

    Args:
        fun: residual vector as a function of parameters.
        x0: initial parameters.
        cfg: tolerances and iteration cap.
        jac: analytic Jacobian; central differences when omitted.
        reject_on: exception types that reject a trial step instead of
            propagating.
        retract: optional map onto equivalent coordinates (same residual up to
            rounding), applied to accepted iterates. The retracted point is kept
            only if its recomputed loss still beats the previous iterate.

    Returns:
        ``(x, diagnostics)``.

    Raises:
        SolverError: non-finite residual or Jacobian.
    """
    cfg = cfg or SolverConfig()
    jac = jac or (lambda x: numeric_jacobian(fun, x))
    x = np.array(x0, dtype=float)
    diag = SolverDiagnostics()

    r = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise SolverError("non-finite residual at initial point", 0)
    loss = float(r @ r)
    diag.initial_loss = loss
    diag.loss_trace.append(loss)

    def linearize(x, r, it):
        J = np.asarray(jac(x), dtype=float)
        if not np.all(np.isfinite(J)):
            raise SolverError("non-finite Jacobian", it)
        return J, J.T @ J, J.T @ r

    J, A, g = linearize(x, r, 0)
    mu = cfg.initial_damping * max(float(np.max(np.diag(A))) if A.size else 0.0, 1.0)
    nu = 2.0
    it = 0
    termination = "max_iterations"
    n = x.size
    while True:
        if np.max(np.abs(g), initial=0.0) <= cfg.grad_tol:
            termination = "grad_tol"
            break
        if it >= cfg.max_iterations:
            break
        it += 1
        try:
            h = np.linalg.solve(A + mu * np.eye(n), -g)
        except np.linalg.LinAlgError:
            h = np.linalg.lstsq(A + mu * np.eye(n), -g, rcond=None)[0]
        if np.linalg.norm(h) <= cfg.step_tol * (np.linalg.norm(x) + cfg.step_tol):
            termination = "step_tol"
            break
        x_new = x + h
        try:
            r_new = np.asarray(fun(x_new), dtype=float)
        except reject_on:
            diag.depth_rejections += 1
            r_new = None
        if r_new is not None and not np.all(np.isfinite(r_new)):
            raise SolverError("non-finite residual at trial point", it)
        new_loss = float(r_new @ r_new) if r_new is not None else np.inf
        predicted = -(2.0 * h @ g + h @ A @ h)
        if new_loss < loss:
            rho = (loss - new_loss) / predicted if predicted > 0 else 1.0
            rel = (loss - new_loss) / loss
            if retract is not None:
                x_new, r_new, new_loss = _retracted(fun, retract, x_new, r_new, new_loss, loss, reject_on)
            x = x_new
            r, loss = r_new, new_loss
            diag.accepted_steps += 1
            diag.loss_trace.append(loss)
            J, A, g = linearize(x, r, it)
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if rel <= cfg.rel_loss_tol:
                termination = "rel_loss_tol"
                break
        else:
            diag.rejected_steps += 1
            mu *= nu
            nu *= 2.0
            if mu > cfg.max_damping:
                termination = "stalled"
                break

    diag.iterations = it
    diag.final_loss = loss
    diag.final_grad_norm = float(np.linalg.norm(g))
    diag.termination = termination
    log.debug("LM finished: %s after %d iterations, loss %.6g", termination, it, loss)
    return x, diag
