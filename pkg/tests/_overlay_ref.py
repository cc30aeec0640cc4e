"""Pure-Python per-pixel reference for the hard-edged gaze disk (test oracle)."""

from __future__ import annotations

import hashlib
from fractions import Fraction


def half_up(v: Fraction) -> int:
    return int((v + Fraction(1, 2)).__floor__())


def reference_composite(width, height, src_rgb_at, point, radius, color, alpha):
    """Return raw RGB bytes; ``src_rgb_at(col, row)`` gives the source pixel."""
    a = Fraction(alpha)
    cx = half_up(Fraction(point[0]) * (width - 1)) if point else None
    cy = half_up(Fraction(point[1]) * (height - 1)) if point else None
    out = bytearray()
    for row in range(height):
        for col in range(width):
            src = src_rgb_at(col, row)
            if point is not None and (col - cx) ** 2 + (row - cy) ** 2 <= radius * radius:
                px = [half_up(a * c + (1 - a) * s) for c, s in zip(color, src)]
            else:
                px = list(src)
            out.extend(px)
    return bytes(out)


def gradient(col: int, row: int):
    return ((col * 7) % 256, (row * 13) % 256, (col * row) % 256)


def frame_hash(width: int, height: int, data: bytes) -> str:
    h = hashlib.sha256()
    h.update(f"{width}x{height}:".encode())
    h.update(data)
    return h.hexdigest()
