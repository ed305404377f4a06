"""Circular conductivity anomaly: level set and smoothed step function.

The conductivity field is described by five numbers: anomaly radius,
center coordinates, and the conductivity values inside and outside the
circle.  A circle level set (positive inside, zero on the circle,
negative outside) feeds an arctangent-smoothed Heaviside so the whole
map from parameters to per-element conductivities is differentiable.

Every function here is generic over the scalar algebra: it accepts plain
floats/arrays or :class:`~eitkit.dual.DualScalar` values and produces
results of matching kind, so derivatives flow through unchanged code.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dual
from .mesh import element_centroids

__all__ = [
    "PARAM_ORDER",
    "AnomalyParams",
    "SmoothingConfig",
    "level_set",
    "smooth_heaviside",
    "element_conductivities",
    "conductivity_gradient",
    "params_to_vector",
    "vector_to_params",
    "seed_params",
]

# Jacobian column order; every derivative consumer indexes parameters
# this way.
PARAM_ORDER = ("cx", "cy", "r", "sigma_in", "sigma_out")


@dataclass(frozen=True)
class AnomalyParams:
    """Circular anomaly: radius, center, and the two conductivities.

    Fields may hold plain floats or dual scalars; validation compares
    value parts only.
    """

    r: object
    cx: object
    cy: object
    sigma_in: object
    sigma_out: object

    def __post_init__(self):
        if not self.r > 0.0:
            raise ValueError("anomaly radius must be positive")
        if not self.sigma_in > 0.0 or not self.sigma_out > 0.0:
            raise ValueError("conductivities must be positive")

    def to_dict(self):
        return {
            "r": float(dual.value_of(self.r)),
            "cx": float(dual.value_of(self.cx)),
            "cy": float(dual.value_of(self.cy)),
            "sigma_in": float(dual.value_of(self.sigma_in)),
            "sigma_out": float(dual.value_of(self.sigma_out)),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            r=float(data["r"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            sigma_in=float(data["sigma_in"]),
            sigma_out=float(data["sigma_out"]),
        )


@dataclass(frozen=True)
class SmoothingConfig:
    """Width of the arctangent smoothing of the Heaviside step."""

    epsilon: float = 0.03

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise ValueError("smoothing width must be positive")


def level_set(params, point):
    """Circle level set r^2 - ((x-cx)^2 + (y-cy)^2) at ``point=(x, y)``."""
    x, y = point
    dx = x - params.cx
    dy = y - params.cy
    return params.r * params.r - (dx * dx + dy * dy)


def smooth_heaviside(z, cfg):
    """Smoothed step (1/pi) * arctan(z / epsilon) + 1/2, strictly in (0, 1)."""
    return dual.atan(z / cfg.epsilon) * (1.0 / np.pi) + 0.5


def element_conductivities(params, mesh, cfg):
    """Piecewise-constant conductivity: one value per element centroid.

    Written as sigma_out + (sigma_in - sigma_out) * H so equal inside and
    outside conductivities reproduce that value exactly.
    """
    centroids = element_centroids(mesh)
    ls = level_set(params, (centroids[:, 0], centroids[:, 1]))
    h = smooth_heaviside(ls, cfg)
    return params.sigma_out + (params.sigma_in - params.sigma_out) * h


def conductivity_gradient(params, mesh, cfg):
    """Closed-form derivatives of every element conductivity.

    Returns an array of shape (n_elements, 5) with columns ordered as
    ``PARAM_ORDER``.  The chain rule gives, for a geometry parameter w,
    (sigma_in - sigma_out) * H' (LS) * dLS/dw with
    H'(z) = (1/pi) * epsilon / (z^2 + epsilon^2).
    """
    centroids = element_centroids(mesh)
    x = centroids[:, 0]
    y = centroids[:, 1]
    r = float(dual.value_of(params.r))
    cx = float(dual.value_of(params.cx))
    cy = float(dual.value_of(params.cy))
    s_in = float(dual.value_of(params.sigma_in))
    s_out = float(dual.value_of(params.sigma_out))
    eps = cfg.epsilon

    ls = r * r - ((x - cx) ** 2 + (y - cy) ** 2)
    h = np.arctan(ls / eps) / np.pi + 0.5
    h_prime = eps / (np.pi * (ls * ls + eps * eps))
    contrast = (s_in - s_out) * h_prime

    grad = np.empty((len(x), len(PARAM_ORDER)))
    grad[:, 0] = contrast * 2.0 * (x - cx)
    grad[:, 1] = contrast * 2.0 * (y - cy)
    grad[:, 2] = contrast * 2.0 * r
    grad[:, 3] = h
    grad[:, 4] = 1.0 - h
    return grad


def params_to_vector(params, active=PARAM_ORDER):
    """Extract the active parameters as a float vector in column order."""
    return np.array([float(dual.value_of(getattr(params, name))) for name in active])


def vector_to_params(vector, template, active=PARAM_ORDER):
    """Rebuild params from a vector, keeping inactive fields from the template."""
    if len(vector) != len(active):
        raise ValueError(f"expected {len(active)} entries, got {len(vector)}")
    updates = {name: float(v) for name, v in zip(active, vector)}
    return replace(template, **updates)


def seed_params(params, active=PARAM_ORDER):
    """Lift the active parameters to dual scalars with unit tangents.

    Inactive parameters become duals with zero tangents, so derivatives
    are taken only along the active directions (tangent width equals
    ``len(active)``).
    """
    width = len(active)
    seeded = dual.seed([float(dual.value_of(getattr(params, name))) for name in active])
    updates = {name: seeded[i] for i, name in enumerate(active)}
    for name in PARAM_ORDER:
        if name not in updates:
            updates[name] = dual.constant(float(dual.value_of(getattr(params, name))), width)
    return replace(params, **updates)
