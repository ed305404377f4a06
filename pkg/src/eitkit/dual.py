"""Forward-mode automatic differentiation with fixed-width dual numbers.

A :class:`DualScalar` carries a value together with a tangent vector of
fixed width P (one slot per differentiation direction).  Arithmetic on
duals evaluates the value exactly as plain float arithmetic would and
propagates the tangent by the exact derivative rule of each primitive,
so a computation seeded with unit tangents yields all P directional
derivatives of every output in a single sweep.

The value part may be a scalar or a numpy array; the tangent then has
the value's shape plus a trailing axis of width P.  This lets the same
class drive both scalar expressions and whole fields evaluated at many
points at once.

Comparisons read only the value part.  Model code is smoothed before it
is differentiated, so branching on dual values is legitimate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DualScalar",
    "seed",
    "constant",
    "sqrt",
    "atan",
    "sin",
    "cos",
    "exp",
    "value_of",
    "tangent_of",
]


def _col(x):
    """Append a broadcast axis so values multiply against tangents."""
    return np.asarray(x, dtype=float)[..., None]


class DualScalar:
    """Value plus tangent vector of fixed width P.

    Instances are immutable by convention: no method mutates ``value``
    or ``tangent`` and tangents are frequently read-only numpy views.
    """

    __slots__ = ("value", "tangent")

    # Make numpy defer to the reflected operators instead of trying to
    # broadcast a DualScalar elementwise.
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        tangent = np.asarray(tangent, dtype=float)
        if tangent.ndim == 0:
            raise ValueError("tangent must have at least one axis (the width axis)")
        shape = np.shape(value) + (tangent.shape[-1],)
        if tangent.shape != shape:
            try:
                tangent = np.broadcast_to(tangent, shape)
            except ValueError as exc:
                raise ValueError(
                    f"tangent shape {tangent.shape} incompatible with value shape "
                    f"{np.shape(value)}"
                ) from exc
        self.value = value
        self.tangent = tangent

    @property
    def width(self):
        return self.tangent.shape[-1]

    def __repr__(self):
        return f"DualScalar(value={self.value!r}, tangent={self.tangent!r})"

    def _split(self, other):
        """Return (value, tangent-or-None) for the second operand."""
        if isinstance(other, DualScalar):
            if other.width != self.width:
                raise ValueError(
                    f"mixed tangent widths: {self.width} vs {other.width}"
                )
            return other.value, other.tangent
        return other, None

    def __getitem__(self, idx):
        return DualScalar(self.value[idx], self.tangent[idx])

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        ov, ot = self._split(other)
        if ot is None:
            return DualScalar(self.value + ov, self.tangent)
        return DualScalar(self.value + ov, self.tangent + ot)

    __radd__ = __add__

    def __sub__(self, other):
        ov, ot = self._split(other)
        if ot is None:
            return DualScalar(self.value - ov, self.tangent)
        return DualScalar(self.value - ov, self.tangent - ot)

    def __rsub__(self, other):
        return DualScalar(other - self.value, -self.tangent)

    def __neg__(self):
        return DualScalar(-self.value, -self.tangent)

    def __mul__(self, other):
        ov, ot = self._split(other)
        tangent = self.tangent * _col(ov)
        if ot is not None:
            tangent = tangent + ot * _col(self.value)
        return DualScalar(self.value * ov, tangent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, ot = self._split(other)
        if np.any(np.asarray(ov) == 0.0):
            raise ZeroDivisionError("division by a dual with zero value (singular evaluation)")
        value = self.value / ov
        if ot is None:
            return DualScalar(value, self.tangent / _col(ov))
        tangent = (self.tangent * _col(ov) - ot * _col(self.value)) / _col(ov * ov)
        return DualScalar(value, tangent)

    def __rtruediv__(self, other):
        if np.any(np.asarray(self.value) == 0.0):
            raise ZeroDivisionError("division by a dual with zero value (singular evaluation)")
        value = other / self.value
        tangent = -self.tangent * _col(other) / _col(self.value * self.value)
        return DualScalar(value, tangent)

    def __pow__(self, exponent):
        if isinstance(exponent, DualScalar):
            raise TypeError("dual exponents are not supported")
        value = self.value ** exponent
        tangent = self.tangent * _col(exponent * self.value ** (exponent - 1))
        return DualScalar(value, tangent)

    # -- comparisons read the value part only --------------------------

    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    # -- reductions used by generic linear-algebra code -----------------

    def sum(self, axis=None):
        if axis is None:
            axis = tuple(range(self.tangent.ndim - 1))
        return DualScalar(np.sum(self.value, axis=axis), np.sum(self.tangent, axis=axis))


def seed(values):
    """Seed a parameter vector for differentiation.

    Element i of the result carries ``values[i]`` with the i-th standard
    basis vector as tangent, so downstream arithmetic accumulates the
    Jacobian of every output with respect to all inputs at once.
    """
    values = [float(v) for v in values]
    width = len(values)
    basis = np.eye(width)
    return [DualScalar(values[i], basis[i]) for i in range(width)]


def constant(value, width):
    """Embed a plain value as a dual with zero tangent."""
    return DualScalar(value, np.zeros(np.shape(value) + (width,)))


def value_of(x):
    """Value part of ``x``, whether dual or plain."""
    return x.value if isinstance(x, DualScalar) else x


def tangent_of(x, width=None):
    """Tangent part of ``x``; zeros for plain inputs when width is given."""
    if isinstance(x, DualScalar):
        return x.tangent
    if width is None:
        raise ValueError("width required for plain inputs")
    return np.zeros(np.shape(x) + (width,))


def sqrt(x):
    if isinstance(x, DualScalar):
        root = np.sqrt(x.value)
        return DualScalar(root, x.tangent / _col(2.0 * root))
    return np.sqrt(x)


def atan(x):
    if isinstance(x, DualScalar):
        return DualScalar(np.arctan(x.value), x.tangent / _col(1.0 + x.value * x.value))
    return np.arctan(x)


def sin(x):
    if isinstance(x, DualScalar):
        return DualScalar(np.sin(x.value), x.tangent * _col(np.cos(x.value)))
    return np.sin(x)


def cos(x):
    if isinstance(x, DualScalar):
        return DualScalar(np.cos(x.value), -x.tangent * _col(np.sin(x.value)))
    return np.cos(x)


def exp(x):
    if isinstance(x, DualScalar):
        value = np.exp(x.value)
        return DualScalar(value, x.tangent * _col(value))
    return np.exp(x)
