"""Levenberg-Marquardt reconstruction of circular anomalies.

Given measured voltages, the solver minimizes half the squared misfit
between simulated and measured data over the anomaly parameters.  Each
iteration computes the measurement Jacobian (dual-number or adjoint
engine), solves the damped normal equations

    (J^T J + lambda I) delta = -J^T residual

for a step, and backtracks along it until the loss strictly decreases.
Damping shrinks after a full accepted step and grows when the line
search fails, so the method interpolates between Gauss-Newton and small
gradient steps.  Iterates are clamped to physical parameter bounds and
the full iteration history is traced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anomaly import PARAM_ORDER, params_to_vector, vector_to_params
from .jacobian import jacobian_ad, jacobian_analytic

__all__ = [
    "LmConfig",
    "LmIteration",
    "LmTrace",
    "LmStepError",
    "ReconstructionError",
    "loss",
    "relative_loss",
    "lm_step",
    "reconstruct",
    "DEFAULT_BOUNDS",
]

DEFAULT_BOUNDS = {
    "r": (0.02, 1.0),
    "cx": (-0.98, 0.98),
    "cy": (-0.98, 0.98),
    "sigma_in": (0.1, 5.0),
    "sigma_out": (0.1, 5.0),
}

ENGINES = {"ad": jacobian_ad, "analytic": jacobian_analytic}


class LmStepError(RuntimeError):
    """Raised when the damped normal equations cannot be solved."""


class ReconstructionError(RuntimeError):
    """Raised on a non-finite loss; carries the trace collected so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class LmConfig:
    """Solver settings; the defaults reconstruct all five parameters."""

    max_iterations: int = 20
    rel_loss_threshold: float = 1e-3
    lambda_init: float | None = None
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    line_search_shrink: float = 0.5
    line_search_max_steps: int = 8
    max_rejections: int = 4
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    engine: str = "ad"
    active: tuple = PARAM_ORDER

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.rel_loss_threshold > 0.0:
            raise ValueError("rel_loss_threshold must be positive")
        if not 0.0 < self.line_search_shrink < 1.0:
            raise ValueError("line_search_shrink must lie in (0, 1)")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown jacobian engine {self.engine!r}")
        for name in self.active:
            lo, hi = self.bounds[name]
            if not lo < hi:
                raise ValueError(f"invalid bounds for {name}: ({lo}, {hi})")


@dataclass(frozen=True)
class LmIteration:
    params: object
    loss: float
    relative_loss: float
    lam: float
    step_norm: float
    line_search_steps: int
    accepted: bool


@dataclass
class LmTrace:
    records: list = field(default_factory=list)

    def accepted_losses(self):
        return [rec.loss for rec in self.records if rec.accepted]

    def to_rows(self):
        return [
            {
                "iteration": i,
                "loss": rec.loss,
                "relative_loss": rec.relative_loss,
                "lambda": rec.lam,
                "step_norm": rec.step_norm,
                "line_search_steps": rec.line_search_steps,
                "accepted": rec.accepted,
                **{f"param_{k}": v for k, v in rec.params.to_dict().items()},
            }
            for i, rec in enumerate(self.records)
        ]


def loss(params, m_true, model):
    """Half squared misfit between simulated and measured voltages."""
    simulated = model.simulate(params)
    m_true = np.asarray(m_true)
    if simulated.shape != m_true.shape:
        raise ValueError(
            f"measurement length mismatch: {simulated.shape} vs {m_true.shape}"
        )
    residual = simulated - m_true
    return 0.5 * float(residual @ residual)


def relative_loss(params, m_true, model):
    """Misfit normalized by the measured energy: loss / ||m_true||^2."""
    m_true = np.asarray(m_true)
    norm2 = float(m_true @ m_true)
    if norm2 == 0.0:
        raise ValueError("measured voltages are identically zero")
    return loss(params, m_true, model) / norm2


def lm_step(jacobian, residual, lam):
    """Damped Gauss-Newton step -(J^T J + lambda I)^{-1} J^T residual."""
    if lam < 0.0:
        raise ValueError("damping must be nonnegative")
    jacobian = np.asarray(jacobian)
    hessian = jacobian.T @ jacobian + lam * np.eye(jacobian.shape[1])
    gradient = jacobian.T @ np.asarray(residual)
    try:
        step = np.linalg.solve(hessian, -gradient)
    except np.linalg.LinAlgError as exc:
        raise LmStepError("damped normal equations are singular") from exc
    if not np.all(np.isfinite(step)):
        raise LmStepError("damped normal equations produced non-finite step")
    return step


def reconstruct(m_true, initial, cfg, model):
    """Iterate Levenberg-Marquardt from ``initial`` to fit ``m_true``.

    Returns the best parameters seen and the full iteration trace.
    Stops when the relative loss falls below the threshold, the
    iteration budget is exhausted, or ``max_rejections`` consecutive
    iterations fail their line search (the loss has plateaued; further
    damping growth cannot produce a strictly decreasing step).  Within
    an iteration, backtracking accepts the first step fraction that
    strictly decreases the loss; when all fractions fail the iteration
    is recorded as rejected and the damping is increased.
    """
    m_true = np.asarray(m_true, dtype=float)
    norm2 = float(m_true @ m_true)
    if norm2 == 0.0:
        raise ValueError("measured voltages are identically zero")
    engine = ENGINES[cfg.engine]
    active = tuple(cfg.active)
    lower = np.array([cfg.bounds[name][0] for name in active])
    upper = np.array([cfg.bounds[name][1] for name in active])

    def clamp(vector):
        return np.clip(vector, lower, upper)

    def evaluate(vector):
        params = vector_to_params(vector, initial, active=active)
        simulated = model.simulate(params)
        if simulated.shape != m_true.shape:
            raise ValueError(
                f"measurement length mismatch: {simulated.shape} vs {m_true.shape}"
            )
        residual = simulated - m_true
        return params, residual, 0.5 * float(residual @ residual)

    trace = LmTrace()
    x = clamp(params_to_vector(initial, active=active))
    params, residual, current_loss = evaluate(x)
    if not np.isfinite(current_loss):
        raise ReconstructionError("initial loss is not finite", trace)
    best_loss, best_params = current_loss, params
    lam = cfg.lambda_init
    jacobian = None
    rejections = 0

    for _ in range(cfg.max_iterations):
        if current_loss / norm2 < cfg.rel_loss_threshold:
            break
        if rejections >= cfg.max_rejections:
            break
        if jacobian is None:
            jacobian = engine(
                params,
                model.mesh,
                model.layout,
                model.smoothing,
                active=active,
                patterns=model.patterns,
                cg_tol=model.cg_tol,
                method=model.method,
            )
            if lam is None:
                lam = 1e-3 * float(np.max(np.einsum("ij,ij->j", jacobian, jacobian)))

        try:
            delta = lm_step(jacobian, residual, lam)
        except LmStepError:
            rejections += 1
            trace.records.append(
                LmIteration(params, current_loss, current_loss / norm2, lam, 0.0, 0, False)
            )
            lam *= cfg.lambda_up
            continue

        step = 1.0
        accepted = False
        trials = 0
        for trials in range(1, cfg.line_search_max_steps + 1):
            candidate_x = clamp(x + step * delta)
            candidate, cand_residual, cand_loss = evaluate(candidate_x)
            if not np.isfinite(cand_loss):
                raise ReconstructionError("loss became non-finite", trace)
            if cand_loss < current_loss:
                accepted = True
                break
            step *= cfg.line_search_shrink

        if accepted:
            rejections = 0
            step_norm = float(np.linalg.norm(candidate_x - x))
            x, params, residual, current_loss = candidate_x, candidate, cand_residual, cand_loss
            jacobian = None
            trace.records.append(
                LmIteration(params, current_loss, current_loss / norm2, lam, step_norm, trials, True)
            )
            if step == 1.0:
                lam /= cfg.lambda_down
            if current_loss < best_loss:
                best_loss, best_params = current_loss, params
        else:
            rejections += 1
            trace.records.append(
                LmIteration(params, current_loss, current_loss / norm2, lam, 0.0, trials, False)
            )
            lam *= cfg.lambda_up

    return best_params, trace
