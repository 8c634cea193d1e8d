"""Compute kernels of the benchmark nodes.

These are pure functions on plain data.  The node behaviors in
``hwros.behaviors`` move bytes between the arena and these kernels.

Inverse kinematics
------------------
The servo transform is a fixed, simplified stand-in for a Stewart-platform
leg, chosen so that the whole computation is integer arithmetic plus an
iterative arctangent:

* input word: ``angle_x`` (Q8.6 degrees, bits 31..16) and ``angle_y`` (Q8.6
  degrees, bits 15..0), each within [-45, 45];
* ``h = cos(45deg) * (tan(angle_x) + tan(angle_y))``, the height of a lever
  anchor at 45 degrees azimuth on a unit-radius platform;
* ``theta = atan(h)`` in degrees, rounded to Q8.6;
* ``pwm = round(512 + theta / 90 * 511)`` clamped to [0, 1023], returned in
  the low 10 bits of the output word.

Tangent and arctangent both use 16-iteration CORDIC in Q16 fixed point
(degrees).  ``inverse_kinematics_reference`` evaluates the same transform in
double precision.
"""

from __future__ import annotations

import math
from typing import Iterable, List, Sequence, Tuple

import numpy as np

SOBEL_WIDTH = 640
SOBEL_HEIGHT = 480
SOBEL_CHANNELS = 3
SORT_LENGTH = 2048

CORDIC_ITERATIONS = 16
Q16 = 1 << 16
Q86_FRAC_BITS = 6
Q86_ONE = 1 << Q86_FRAC_BITS
IK_ANGLE_LIMIT = 45 * Q86_ONE

GX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int32)
GY = GX.T.copy()


class WorkloadError(ValueError):
    pass


# -- copy -------------------------------------------------------------------


def workload_copy(data: bytes) -> bytes:
    return bytes(data)


# -- sobel ------------------------------------------------------------------


def sobel_filter(image: np.ndarray) -> np.ndarray:
    """Per-channel ``clamp(|Gx| + |Gy|, 0, 255)``; the one-pixel border is 0.

    Accepts ``(H, W)`` or ``(H, W, C)`` uint8 arrays.
    """
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise WorkloadError(f"expected uint8 image, got {a.dtype}")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    if a.ndim != 3:
        raise WorkloadError(f"expected (H, W[, C]) image, got shape {a.shape}")
    h, w, _ = a.shape
    out = np.zeros_like(a)
    if h >= 3 and w >= 3:
        v = a.astype(np.int32)
        gx = (v[:-2, 2:] + 2 * v[1:-1, 2:] + v[2:, 2:]) - (v[:-2, :-2] + 2 * v[1:-1, :-2] + v[2:, :-2])
        gy = (v[2:, :-2] + 2 * v[2:, 1:-1] + v[2:, 2:]) - (v[:-2, :-2] + 2 * v[:-2, 1:-1] + v[:-2, 2:])
        out[1:-1, 1:-1] = np.clip(np.abs(gx) + np.abs(gy), 0, 255).astype(np.uint8)
    return out[:, :, 0] if squeeze else out


def workload_sobel(data: bytes, width: int = SOBEL_WIDTH, height: int = SOBEL_HEIGHT,
                   channels: int = SOBEL_CHANNELS) -> bytes:
    """Filter an interleaved ``height x width x channels`` u8 image."""
    if (width, height, channels) != (SOBEL_WIDTH, SOBEL_HEIGHT, SOBEL_CHANNELS):
        raise WorkloadError(f"sobel node expects {SOBEL_WIDTH}x{SOBEL_HEIGHT}x{SOBEL_CHANNELS}, "
                            f"got {width}x{height}x{channels}")
    if len(data) != width * height * channels:
        raise WorkloadError(f"image payload has {len(data)} bytes, expected {width * height * channels}")
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return sobel_filter(img).tobytes()


# -- sort -------------------------------------------------------------------


def odd_even_transposition_sort(values: Iterable[int]) -> np.ndarray:
    """n stages of alternating even/odd compare-exchange on n values."""
    a = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.uint32)
    n = len(a)
    for stage in range(n):
        start = stage & 1
        m = (n - start) // 2
        if m == 0:
            continue
        lo = a[start:start + 2 * m:2]
        hi = a[start + 1:start + 2 * m:2]
        small = np.minimum(lo, hi)
        large = np.maximum(lo, hi)
        a[start:start + 2 * m:2] = small
        a[start + 1:start + 2 * m:2] = large
    return a


def workload_sort(values: Sequence[int]) -> List[int]:
    if len(values) != SORT_LENGTH:
        raise WorkloadError(f"sort node expects {SORT_LENGTH} numbers, got {len(values)}")
    return odd_even_transposition_sort(values).tolist()


# -- fixed point helpers ----------------------------------------------------

_ATAN_TABLE = [round(math.degrees(math.atan(2.0 ** -i)) * Q16) for i in range(CORDIC_ITERATIONS)]
_CORDIC_GAIN = round(Q16 / math.prod(math.sqrt(1 + 2.0 ** (-2 * i)) for i in range(CORDIC_ITERATIONS)))
_COS45 = round(math.cos(math.radians(45)) * Q16)


def _round_div(num: int, den: int) -> int:
    """Integer division rounding half away from zero."""
    q, r = divmod(abs(num), abs(den))
    if 2 * r >= abs(den):
        q += 1
    return q if (num >= 0) == (den > 0) else -q


def q86_to_float(raw: int) -> float:
    return raw / Q86_ONE


def float_to_q86(value: float) -> int:
    return int(math.floor(value * Q86_ONE + 0.5))


def cordic_sincos(angle_q16: int) -> Tuple[int, int]:
    """(sin, cos) in Q16 of an angle given in Q16 degrees, |angle| <= 90."""
    x, y, z = _CORDIC_GAIN, 0, angle_q16
    for i in range(CORDIC_ITERATIONS):
        if z >= 0:
            x, y, z = x - (y >> i), y + (x >> i), z - _ATAN_TABLE[i]
        else:
            x, y, z = x + (y >> i), y - (x >> i), z + _ATAN_TABLE[i]
    return y, x


def cordic_tan(angle_q16: int) -> int:
    s, c = cordic_sincos(angle_q16)
    return _round_div(s * Q16, c)


def cordic_atan(y_q16: int, x_q16: int = Q16) -> int:
    """atan(y / x) in Q16 degrees by CORDIC vectoring; requires x > 0."""
    if x_q16 <= 0:
        raise WorkloadError("cordic_atan needs a positive x")
    x, y, z = x_q16, y_q16, 0
    for i in range(CORDIC_ITERATIONS):
        if y >= 0:
            x, y, z = x + (y >> i), y - (x >> i), z + _ATAN_TABLE[i]
        else:
            x, y, z = x - (y >> i), y + (x >> i), z - _ATAN_TABLE[i]
    return z


def iterative_arctan(ratio_q16: int) -> int:
    """arctan of a Q16 ratio, in Q8.6 degrees."""
    return _round_div(cordic_atan(ratio_q16), Q16 // Q86_ONE)


# -- inverse kinematics -----------------------------------------------------


def _signed16(v: int) -> int:
    v &= 0xFFFF
    return v - 0x10000 if v & 0x8000 else v


def pack_angles(angle_x_q86: int, angle_y_q86: int) -> int:
    return ((angle_x_q86 & 0xFFFF) << 16) | (angle_y_q86 & 0xFFFF)


def unpack_angles(packed: int) -> Tuple[int, int]:
    return _signed16(packed >> 16), _signed16(packed)


def pwm_from_angle(theta_q86: int) -> int:
    pwm = 512 + _round_div(theta_q86 * 511, 90 * Q86_ONE)
    return min(max(pwm, 0), 1023)


def workload_inverse_kinematics(packed: int) -> int:
    ax, ay = unpack_angles(packed)
    if abs(ax) > IK_ANGLE_LIMIT or abs(ay) > IK_ANGLE_LIMIT:
        raise WorkloadError(f"angles ({ax / Q86_ONE}, {ay / Q86_ONE}) outside +-45 degrees")
    shift = 16 - Q86_FRAC_BITS
    tx = cordic_tan(ax << shift)
    ty = cordic_tan(ay << shift)
    h = ((tx + ty) * _COS45) >> 16
    theta = iterative_arctan(h)
    return pwm_from_angle(theta) & 0x3FF


def inverse_kinematics_reference(packed: int) -> int:
    """Double-precision evaluation of the same transform."""
    ax, ay = unpack_angles(packed)
    h = math.cos(math.radians(45)) * (math.tan(math.radians(ax / Q86_ONE)) + math.tan(math.radians(ay / Q86_ONE)))
    theta = math.degrees(math.atan(h))
    pwm = math.floor(512 + theta / 90 * 511 + 0.5)
    return min(max(pwm, 0), 1023)
