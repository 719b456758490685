"""Activation functions with closed-form derivatives of every order.

The smooth kinds (identity, exp, sin, tanh, silu) have exact derivatives at
all orders; relu is handled almost-everywhere with the kink convention
sigma'(0) = 0 and all higher orders identically zero.
"""
from __future__ import annotations

from enum import Enum
from functools import lru_cache

import numpy as np

__all__ = ["ActivationKind", "OrderError", "act_value", "act_deriv", "act_nth",
           "MAX_SUPPORTED_ORDER", "DEFAULT_MAX_ORDER"]

# Engine default caps total derivative order at 4; the gradient tape needs one
# order beyond that, and we keep a little headroom.
DEFAULT_MAX_ORDER = 4
MAX_SUPPORTED_ORDER = 8


class OrderError(ValueError):
    """Requested derivative order exceeds the supported table."""


class ActivationKind(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    EXP = "exp"
    SIN = "sin"
    TANH = "tanh"
    SILU = "silu"

    @property
    def analytic(self) -> bool:
        return self is not ActivationKind.RELU


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _poly_derive_through(coeffs: tuple, link: tuple) -> tuple:
    """d/dx P(u(x)) = P'(u) * u'(x) where u' = link(u); returns coeffs of the result."""
    deriv = tuple(c * k for k, c in enumerate(coeffs))[1:] or (0.0,)
    # multiply polynomials deriv * link
    out = [0.0] * (len(deriv) + len(link) - 1)
    for i, a in enumerate(deriv):
        for j, b in enumerate(link):
            out[i + j] += a * b
    return tuple(out)


@lru_cache(maxsize=None)
def _tanh_poly(j: int) -> tuple:
    # tanh' = 1 - tanh^2; j-th derivative is a polynomial in u = tanh(x)
    if j == 0:
        return (0.0, 1.0)
    return _poly_derive_through(_tanh_poly(j - 1), (1.0, 0.0, -1.0))


@lru_cache(maxsize=None)
def _sigmoid_poly(j: int) -> tuple:
    # s' = s(1 - s); j-th derivative is a polynomial in s = sigmoid(x)
    if j == 0:
        return (0.0, 1.0)
    return _poly_derive_through(_sigmoid_poly(j - 1), (0.0, 1.0, -1.0))


def _polyval(coeffs: tuple, u):
    out = np.zeros_like(u)
    for c in reversed(coeffs):
        out = out * u + c
    return out


def _sigmoid_nth(j: int, x):
    return _polyval(_sigmoid_poly(j), _sigmoid(x))


def act_value(kind: ActivationKind, x):
    """Evaluate the activation elementwise."""
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.IDENTITY:
        return x.copy()
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0.0)
    if kind is ActivationKind.EXP:
        return np.exp(x)
    if kind is ActivationKind.SIN:
        return np.sin(x)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    if kind is ActivationKind.SILU:
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def act_deriv(kind: ActivationKind, j: int, x):
    """Exact j-th derivative (j >= 1) of the activation, elementwise."""
    if j < 1:
        raise OrderError("derivative order must be >= 1")
    if j > MAX_SUPPORTED_ORDER:
        raise OrderError(f"order {j} exceeds supported maximum {MAX_SUPPORTED_ORDER}")
    x = np.asarray(x, dtype=np.float64)
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(x) if j == 1 else np.zeros_like(x)
    if kind is ActivationKind.RELU:
        # a.e. derivative, with the kink mapped to 0
        return (x > 0).astype(np.float64) if j == 1 else np.zeros_like(x)
    if kind is ActivationKind.EXP:
        return np.exp(x)
    if kind is ActivationKind.SIN:
        return (np.sin(x), np.cos(x), -np.sin(x), -np.cos(x))[j % 4]
    if kind is ActivationKind.TANH:
        return _polyval(_tanh_poly(j), np.tanh(x))
    if kind is ActivationKind.SILU:
        # Leibniz on x * s(x): only two terms survive
        return x * _sigmoid_nth(j, x) + j * _sigmoid_nth(j - 1, x)
    raise ValueError(f"unknown activation {kind!r}")


def act_nth(kind: ActivationKind, j: int, x):
    """Value for j = 0, j-th derivative otherwise; the tape's entry point."""
    return act_value(kind, x) if j == 0 else act_deriv(kind, j, x)
