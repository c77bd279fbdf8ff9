"""Trajectory-aware 3D rotary position encoding.

Tokens carry frame-local coordinates; adding the block's scan anchor moves
them onto the global canvas before the rotary phases are computed, so the
attention layer sees where on the canvas each token sits rather than where
it sits in its frame.

Rotations act on interleaved pairs ``(x[2i], x[2i+1])``. The angle vector is
the concatenation of the t, h and w groups, each computed from that axis's
own frequency table.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError, DimensionError

AXES = ("t", "h", "w")


@dataclass(frozen=True)
class RopeParams:
    base: float = 10000.0
    head_dim: int = 96
    axis_split: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        if not self.base > 0:
            raise ConfigurationError(f"rope base must be positive, got {self.base}", keys=("rope.base",))
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even and positive, got {self.head_dim}",
                                     keys=("rope.head_dim",))
        if len(self.axis_split) != 3 or any(d < 2 or d % 2 for d in self.axis_split):
            raise ConfigurationError(f"axis_split entries must be even and >= 2, got {self.axis_split}",
                                     keys=("rope.axis_split",))
        if sum(self.axis_split) != self.head_dim:
            raise ConfigurationError(
                f"axis_split {self.axis_split} does not sum to head_dim {self.head_dim}",
                keys=("rope.axis_split", "rope.head_dim"),
            )

    @classmethod
    def for_dim(cls, head_dim: int, base: float = 10000.0) -> "RopeParams":
        """Even-as-possible split of ``head_dim`` over (t, h, w)."""
        pairs = head_dim // 2
        split = [pairs // 3] * 3
        for i in range(pairs - sum(split)):
            split[2 - i] += 1
        return cls(base=base, head_dim=head_dim, axis_split=tuple(2 * p for p in split))


class GlobalCoord(NamedTuple):
    t: float
    h: float
    w: float


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES.index(axis.lower())
        except ValueError:
            raise ValueError(f"axis must be one of {AXES}, got {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis!r}")
    return int(axis)


def frequencies(params: RopeParams, axis) -> np.ndarray:
    """``θ_j = base**(-2j / d_axis)`` for ``j = 0 .. d_axis/2 - 1``."""
    d_axis = params.axis_split[_axis_index(axis)]
    j = np.arange(d_axis // 2, dtype=np.float64)
    return np.power(float(params.base), -2.0 * j / d_axis)


def globalize(p_loc, anchor) -> tuple[int, int]:
    return (p_loc[0] + anchor[0], p_loc[1] + anchor[1])


def token_grid(height: int, width: int) -> np.ndarray:
    """Row-major local coordinates ``(h_loc, w_loc)``, shape ``(height*width, 2)``."""
    hh, ww = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([hh.ravel(), ww.ravel()], axis=1)


def global_coords(t: float, anchor, height: int, width: int) -> np.ndarray:
    """``(t, h_g, w_g)`` for every token of a ``height x width`` frame at ``anchor``."""
    local = token_grid(height, width)
    out = np.empty((local.shape[0], 3), dtype=np.float64)
    out[:, 0] = t
    out[:, 1] = local[:, 0] + anchor[0]
    out[:, 2] = local[:, 1] + anchor[1]
    return out


def rotary_phases(coords, params: RopeParams) -> np.ndarray:
    """Angles for a batch of coordinates: ``(..., 3)`` -> ``(..., head_dim/2)``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != 3:
        raise DimensionError(f"coordinates must have 3 components, got shape {coords.shape}")
    groups = [coords[..., i:i + 1] * frequencies(params, i) for i in range(3)]
    return np.concatenate(groups, axis=-1)


def rotary_phase(coord, params: RopeParams) -> np.ndarray:
    return rotary_phases(np.asarray(tuple(coord), dtype=np.float64), params)


def apply_rotation(v, phase) -> np.ndarray:
    """Rotate each pair ``(v[..., 2i], v[..., 2i+1])`` by ``phase[..., i]``."""
    v = np.asarray(v, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if v.shape[-1] != 2 * phase.shape[-1]:
        raise DimensionError(
            f"vector length {v.shape[-1]} does not match 2 x {phase.shape[-1]} phase angles")
    cos, sin = np.cos(phase), np.sin(phase)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape[:-1], phase.shape[:-1]) + v.shape[-1:], dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _check_tokens(queries, keys, values, coords, params):
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("queries, keys and values must be 2-D (tokens, features)")
    n = q.shape[0]
    if k.shape[0] != n or v.shape[0] != n or coords.shape != (n, 3):
        raise DimensionError(
            f"token counts disagree: q={q.shape}, k={k.shape}, v={v.shape}, coords={coords.shape}")
    if q.shape[1] != params.head_dim or k.shape[1] != params.head_dim:
        raise DimensionError(f"feature dim must equal head_dim={params.head_dim}")
    return q, k, v, coords


def attention_logits(queries, keys, coords, params: RopeParams) -> np.ndarray:
    """Scaled dot products ``<R(c_i) q_i, R(c_j) k_j> / sqrt(d)``."""
    q, k, _, coords = _check_tokens(queries, keys, keys, coords, params)
    phases = rotary_phases(coords, params)
    return apply_rotation(q, phases) @ apply_rotation(k, phases).T / np.sqrt(params.head_dim)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def scanpe_attention(queries, keys, values, coords, params: RopeParams, return_weights=False):
    """Single-head attention with q and k rotated by their tokens' global phases."""
    _, _, v, _ = _check_tokens(queries, keys, values, coords, params)
    weights = softmax(attention_logits(queries, keys, coords, params))
    out = weights @ v
    return (out, weights) if return_weights else out
