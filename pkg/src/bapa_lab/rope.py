"""Rotary position embedding.

Coordinates are rotated in interleaved pairs ``(v[2m], v[2m+1])`` by the angle
``position * theta[m]`` with ``theta[m] = base ** (-2m / d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    thetas: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ShapeError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not self.base > 0:
            raise ShapeError(f"base must be positive, got {self.base}")
        if self.thetas is None:
            exps = -2.0 * np.arange(self.head_dim // 2, dtype=np.float64) / self.head_dim
            thetas = np.power(float(self.base), exps)
            thetas.setflags(write=False)
            object.__setattr__(self, "thetas", thetas)


def make_thetas(head_dim: int, base: float = 10000.0) -> RopeParams:
    return RopeParams(head_dim=head_dim, base=base)


def rotate(x: np.ndarray, positions, thetas: np.ndarray) -> np.ndarray:
    """Rotate the last axis of ``x`` (length ``d``).

    ``positions`` broadcasts against ``x.shape[:-1]``; typically shape ``(T,)``
    for ``x`` of shape ``(..., T, d)``. Fractional positions are allowed.
    """
    d = x.shape[-1]
    if d != 2 * thetas.shape[0]:
        raise ShapeError(f"vector length {d} does not match head_dim {2 * thetas.shape[0]}")
    ang = np.asarray(positions, dtype=np.float64)[..., None] * thetas
    cos = np.cos(ang).astype(x.dtype, copy=False)
    sin = np.sin(ang).astype(x.dtype, copy=False)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def apply_rotation(params: RopeParams, position, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != params.head_dim:
        raise ShapeError(f"expected a vector of length {params.head_dim}, got shape {v.shape}")
    return rotate(v, position, params.thetas)


def rotated_dot_forms(params: RopeParams, p, u, q, v) -> tuple[float, float]:
    """Return ``(direct, relative)`` evaluations of the rotated query-key product.

    direct:   (R_p u) . (R_q v)
    relative: u . (R_{q-p} v)
    """
    direct = float(np.dot(apply_rotation(params, p, u), apply_rotation(params, q, v)))
    relative = float(np.dot(np.asarray(u, dtype=np.float64), apply_rotation(params, q - p, v)))
    return direct, relative


def rotated_dot(params: RopeParams, p, u, q, v, check: bool = False, tol: float = 1e-6) -> float:
    direct, relative = rotated_dot_forms(params, p, u, q, v)
    if check and abs(direct - relative) > tol * max(1.0, abs(direct)):
        raise AssertionError(
            f"direct ({direct!r}) and relative ({relative!r}) forms disagree"
        )
    return direct
