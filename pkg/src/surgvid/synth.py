"""Procedural stand-in for laparoscopic footage.

Each phase gets its own base hue and its own motion signature so that a
classifier (or a generator) has to get both appearance and dynamics right:

* preparation: static low-frequency texture drifting slowly
* calot triangle dissection: bright triangle, probe orbiting one vertex
* clipping and cutting: a band that splits into two halves mid-clip
* gallbladder dissection: an ellipse that shrinks while translating
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .text import SurgicalPhase

NOISE_STD = 0.02
EDGE = 0.6  # soft-edge width in pixels

BASE_RGB = {
    SurgicalPhase.PREPARATION: (0.55, -0.35, -0.30),
    SurgicalPhase.CALOT_TRIANGLE_DISSECTION: (0.45, 0.20, -0.55),
    SurgicalPhase.CLIPPING_AND_CUTTING: (-0.30, -0.35, 0.45),
    SurgicalPhase.GALLBLADDER_DISSECTION: (-0.35, 0.40, -0.20),
}
SHAPE_RGB = {
    SurgicalPhase.PREPARATION: (0.2, -0.6, -0.5),
    SurgicalPhase.CALOT_TRIANGLE_DISSECTION: (0.95, 0.85, 0.4),
    SurgicalPhase.CLIPPING_AND_CUTTING: (0.7, 0.75, 0.95),
    SurgicalPhase.GALLBLADDER_DISSECTION: (0.6, 0.9, 0.1),
}
PROBE_RGB = (-0.8, -0.8, -0.8)


def _soft(signed_dist):
    """Coverage in [0, 1] from a signed distance in pixels (negative = inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / EDGE, -30, 30)))


def _paint(img, mask, rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return img * (1.0 - mask[..., None]) + mask[..., None] * rgb


def _texture(rng, ys, xs, h, w):
    """Smooth two-wave texture; returns a callable of a (dy, dx) drift in pixels."""
    waves = []
    for _ in range(2):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.06, 0.12)
        waves.append((fy / h, fx / w, ph, amp))

    def at(dy, dx):
        out = np.zeros_like(ys, dtype=np.float64)
        for fy, fx, ph, amp in waves:
            out += amp * np.sin(2 * np.pi * (fy * (ys - dy) + fx * (xs - dx)) + ph)
        return out

    return at


def synth_phase_video(phase: SurgicalPhase, seed: int, frames: int, h: int, w: int) -> np.ndarray:
    """Deterministic clip ``[frames, h, w, 3]`` in ``[-1, 1]`` (float32) for ``phase``."""
    phase = SurgicalPhase(phase)
    if frames < 1 or frames % 4 != 1:
        raise ShapeError(f"frames must be 1 + 4k, got {frames}")
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise ShapeError(f"h and w must be positive multiples of 8, got {h}x{w}")

    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(phase)])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = _texture(rng, ys, xs, h, w)
    base = np.asarray(BASE_RGB[phase]) + rng.uniform(-0.08, 0.08, size=3)
    shape_rgb = np.clip(np.asarray(SHAPE_RGB[phase]) + rng.uniform(-0.08, 0.08, size=3), -1, 1)
    taus = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)

    # per-phase geometry, drawn once per clip
    drift = rng.uniform(0.08, 0.18) * np.array([h, w]) * rng.choice([-1, 1], size=2)
    if phase == SurgicalPhase.CALOT_TRIANGLE_DISSECTION:
        cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
        size = rng.uniform(0.28, 0.4) * h
        rot = rng.uniform(0, 2 * np.pi)
        verts = [(cy + size * np.sin(rot + k * 2 * np.pi / 3), cx + size * np.cos(rot + k * 2 * np.pi / 3)) for k in range(3)]
        orbit_r = rng.uniform(0.12, 0.18) * h
        orbit_w = rng.uniform(1.5, 2.5) * 2 * np.pi
        orbit_ph = rng.uniform(0, 2 * np.pi)
    elif phase == SurgicalPhase.CLIPPING_AND_CUTTING:
        horizontal = bool(rng.integers(2))
        center = rng.uniform(0.4, 0.6) * (h if horizontal else w)
        half_thick = rng.uniform(0.12, 0.18) * h
        split_at = rng.uniform(0.4, 0.6)
        max_gap = rng.uniform(0.25, 0.35) * (w if horizontal else h)
    elif phase == SurgicalPhase.GALLBLADDER_DISSECTION:
        start = np.array([rng.uniform(0.3, 0.7) * h, rng.uniform(0.25, 0.45) * w])
        move = np.array([rng.uniform(-0.15, 0.15) * h, rng.uniform(0.2, 0.35) * w])
        ry0, rx0 = rng.uniform(0.28, 0.36) * h, rng.uniform(0.28, 0.36) * w
        shrink = rng.uniform(0.35, 0.5)
    else:
        blob = np.array([rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w])
        blob_r = rng.uniform(0.15, 0.25) * h

    out = np.empty((frames, h, w, 3), dtype=np.float64)
    for i, tau in enumerate(taus):
        if phase == SurgicalPhase.PREPARATION:
            d = drift * tau
            img = base + tex(*d)[..., None]
            dist = np.hypot(ys - blob[0] - d[0], xs - blob[1] - d[1]) - blob_r
            img = _paint(img, 0.5 * _soft(dist), shape_rgb)
        else:
            img = base + tex(0.0, 0.0)[..., None]
        if phase == SurgicalPhase.CALOT_TRIANGLE_DISSECTION:
            dist = _triangle_sdf(ys, xs, verts)
            img = _paint(img, _soft(dist), shape_rgb)
            ang = orbit_w * tau + orbit_ph
            py, px = verts[0][0] + orbit_r * np.sin(ang), verts[0][1] + orbit_r * np.cos(ang)
            img = _paint(img, _soft(np.hypot(ys - py, xs - px) - 0.07 * h), PROBE_RGB)
        elif phase == SurgicalPhase.CLIPPING_AND_CUTTING:
            gap = max(0.0, tau - split_at) / max(1e-9, 1.0 - split_at) * max_gap
            across, along = (ys, xs) if horizontal else (xs, ys)
            length = w if horizontal else h
            mid = length / 2.0
            band = np.abs(across - center) - half_thick
            if gap > 0:
                band = np.maximum(band, gap / 2.0 - np.abs(along - mid))
            img = _paint(img, _soft(band), shape_rgb)
        elif phase == SurgicalPhase.GALLBLADDER_DISSECTION:
            c = start + move * tau
            scale = 1.0 - shrink * tau
            ry, rx = ry0 * scale, rx0 * scale
            r = np.hypot((ys - c[0]) / ry, (xs - c[1]) / rx)
            dist = (r - 1.0) * min(ry, rx)
            img = _paint(img, _soft(dist), shape_rgb)
        out[i] = img

    out += rng.normal(0.0, NOISE_STD, size=out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _triangle_sdf(ys, xs, verts):
    """Approximate signed distance to a triangle: max over edge half-planes."""
    (ay, ax), (by, bx), (cy, cx) = verts
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    sign = 1.0 if area > 0 else -1.0
    d = None
    for (p0y, p0x), (p1y, p1x) in (((ay, ax), (by, bx)), ((by, bx), (cy, cx)), ((cy, cx), (ay, ax))):
        ey, ex = p1y - p0y, p1x - p0x
        norm = np.hypot(ey, ex)
        side = -sign * (ex * (ys - p0y) - ey * (xs - p0x)) / norm
        d = side if d is None else np.maximum(d, side)
    return d
