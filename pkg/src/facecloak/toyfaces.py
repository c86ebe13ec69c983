"""Procedural face corpus for desk-scale experiments.

Each identity is a fixed set of appearance parameters (face shape, skin and
hair colour, eye spacing and iris colour, brows, nose, mouth, freckles,
glasses).  Each image of an identity re-renders those parameters under a new
pose, lighting, expression and background, so held-out images differ from
training images the way real photos of one person differ from each other.
Faces are drawn in the canonical aligned layout the landmark fallback
assumes: eyes near (0.30, 0.40) / (0.70, 0.40), nose (0.50, 0.58), mouth
(0.50, 0.78).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _smooth(d, width):
    """Soft inside-indicator for a signed distance (negative inside)."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def _ellipse_sd(u, v, cu, cv, au, av):
    return (np.sqrt(((u - cu) / au) ** 2 + ((v - cv) / av) ** 2) - 1.0) * min(au, av)


def _paint(img, alpha, color):
    a = alpha[..., None]
    img *= 1 - a
    img += a * np.asarray(color)


@dataclass
class IdentityParams:
    face_w: float
    face_h: float
    skin: np.ndarray
    hair: np.ndarray
    hair_volume: float
    hairline: float
    fringe: float
    hair_freq: float
    eye_dx: float
    eye_dy: float
    eye_w: float
    eye_h: float
    iris: np.ndarray
    brow_thick: float
    brow_tilt: float
    nose_len: float
    nose_w: float
    mouth_w: float
    lip: np.ndarray
    lip_thick: float
    freckles: np.ndarray  # K x 3 (u, v, radius)
    glasses: bool
    glasses_color: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "IdentityParams":
        tone = rng.uniform(0.25, 0.95)
        skin = np.array([tone, tone * rng.uniform(0.68, 0.85), tone * rng.uniform(0.5, 0.72)])
        hair = rng.uniform(0.02, 0.75, 3) * rng.uniform(0.3, 1.0)
        k = rng.integers(6, 18)
        freckles = np.column_stack([
            rng.uniform(0.28, 0.72, k), rng.uniform(0.45, 0.85, k), rng.uniform(0.006, 0.016, k)
        ])
        return cls(
            face_w=rng.uniform(0.29, 0.37),
            face_h=rng.uniform(0.37, 0.45),
            skin=skin,
            hair=hair,
            hair_volume=rng.uniform(1.02, 1.18),
            hairline=rng.uniform(0.22, 0.34),
            fringe=rng.uniform(0.0, 1.0),
            hair_freq=rng.uniform(30, 90),
            eye_dx=rng.uniform(0.17, 0.23),
            eye_dy=rng.uniform(-0.02, 0.02),
            eye_w=rng.uniform(0.055, 0.085),
            eye_h=rng.uniform(0.022, 0.036),
            iris=rng.uniform(0.05, 0.7, 3),
            brow_thick=rng.uniform(0.008, 0.022),
            brow_tilt=rng.uniform(-0.25, 0.25),
            nose_len=rng.uniform(0.08, 0.15),
            nose_w=rng.uniform(0.035, 0.07),
            mouth_w=rng.uniform(0.09, 0.16),
            lip=np.array([rng.uniform(0.45, 0.85), rng.uniform(0.1, 0.4), rng.uniform(0.15, 0.45)]),
            lip_thick=rng.uniform(0.012, 0.028),
            freckles=freckles,
            glasses=bool(rng.random() < 0.3),
            glasses_color=rng.uniform(0.0, 0.5, 3),
        )


@dataclass
class ViewParams:
    shift: tuple
    rotation: float
    scale: float
    light_dir: float
    light_amp: float
    brightness: float
    contrast: float
    mouth_open: float
    smile: float
    eye_open: float
    bg_a: np.ndarray
    bg_b: np.ndarray
    bg_freq: float
    bg_angle: float
    noise_seed: int

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "ViewParams":
        return cls(
            shift=(rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)),
            rotation=np.deg2rad(rng.uniform(-7, 7)),
            scale=rng.uniform(0.94, 1.06),
            light_dir=rng.uniform(0, 2 * np.pi),
            light_amp=rng.uniform(0.0, 0.12),
            brightness=rng.uniform(-0.06, 0.06),
            contrast=rng.uniform(0.88, 1.12),
            mouth_open=rng.uniform(0.0, 1.0),
            smile=rng.uniform(-0.5, 1.0),
            eye_open=rng.uniform(0.6, 1.1),
            bg_a=rng.uniform(0.1, 0.9, 3),
            bg_b=rng.uniform(0.1, 0.9, 3),
            bg_freq=rng.uniform(3, 14),
            bg_angle=rng.uniform(0, np.pi),
            noise_seed=int(rng.integers(0, 2**31)),
        )


def render_face(ident: IdentityParams, view: ViewParams, size: int = 64) -> np.ndarray:
    """Render one H x W x 3 face in [0, 1]."""
    px = 1.0 / size
    xs = (np.arange(size) + 0.5) / size
    x, y = np.meshgrid(xs, xs)
    # background in image coordinates
    ang = view.bg_angle
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * view.bg_freq * (x * np.cos(ang) + y * np.sin(ang)))
    img = view.bg_a * (1 - wave[..., None]) + view.bg_b * wave[..., None]

    # face frame: undo pose
    c, s = np.cos(-view.rotation), np.sin(-view.rotation)
    dx, dy = x - 0.5 - view.shift[0], y - 0.5 - view.shift[1]
    u = (c * dx - s * dy) / view.scale + 0.5
    v = (s * dx + c * dy) / view.scale + 0.5
    edge = 1.5 * px / view.scale

    fcv = 0.56
    # hair behind the face
    hair_sd = _ellipse_sd(u, v, 0.5, fcv - 0.04, ident.face_w * ident.hair_volume, ident.face_h * ident.hair_volume)
    hair_tex = 0.85 + 0.15 * np.sin(2 * np.pi * ident.hair_freq * (u + 0.3 * v))
    hair_alpha = _smooth(hair_sd, edge) * (v < fcv + 0.1)
    _paint(img, hair_alpha * 1.0, 0)  # clear under hair
    img += hair_alpha[..., None] * ident.hair * hair_tex[..., None]

    # face with directional shading
    face_sd = _ellipse_sd(u, v, 0.5, fcv, ident.face_w, ident.face_h)
    face_alpha = _smooth(face_sd, edge)
    shade = 1 + view.light_amp * ((u - 0.5) * np.cos(view.light_dir) + (v - fcv) * np.sin(view.light_dir)) * 4
    _paint(img, face_alpha, 0)
    img += face_alpha[..., None] * ident.skin * shade[..., None]

    # fringe: hair over the forehead above the hairline
    fringe_line = ident.hairline + 0.04 * ident.fringe * np.sin(np.pi * (u - 0.5) / ident.face_w * 2)
    fr_alpha = face_alpha * _smooth(v - fringe_line, edge)
    _paint(img, fr_alpha, ident.hair * 0.9)

    # freckles
    for fu, fv, r in ident.freckles:
        a = _smooth(np.hypot(u - fu, v - fv) - r, edge) * face_alpha * 0.6
        _paint(img, a, ident.skin * 0.55)

    # eyes
    eye_y = 0.40 + ident.eye_dy
    eh = ident.eye_h * view.eye_open
    for side in (-1, 1):
        ex = 0.5 + side * ident.eye_dx
        white = _smooth(_ellipse_sd(u, v, ex, eye_y, ident.eye_w, eh), edge)
        _paint(img, white, (0.95, 0.95, 0.92))
        iris = _smooth(np.hypot(u - ex, v - eye_y) - ident.eye_w * 0.45, edge) * white
        _paint(img, iris, ident.iris)
        pupil = _smooth(np.hypot(u - ex, v - eye_y) - ident.eye_w * 0.18, edge) * white
        _paint(img, pupil, (0.03, 0.03, 0.03))
        by = eye_y - 0.06 + side * ident.brow_tilt * (u - ex)
        brow = _smooth(np.abs(v - by) - ident.brow_thick, edge) * _smooth(np.abs(u - ex) - ident.eye_w * 1.15, edge)
        _paint(img, brow, ident.hair * 0.6)
        if ident.glasses:
            ring = _smooth(np.abs(np.hypot((u - ex) / 1.1, v - eye_y) - ident.eye_w * 1.35) - 0.008, edge)
            _paint(img, ring, ident.glasses_color)

    # nose: shaded ridge plus nostrils
    nose_top, nose_bot = 0.58 - ident.nose_len * 0.6, 0.58 + ident.nose_len * 0.4
    width = ident.nose_w * (v - nose_top) / (nose_bot - nose_top)
    ridge = _smooth(np.abs(u - 0.5) - width * 0.5, edge) * (v > nose_top) * (v < nose_bot)
    _paint(img, ridge * 0.45, ident.skin * 0.6)
    for side in (-1, 1):
        nostril = _smooth(_ellipse_sd(u, v, 0.5 + side * ident.nose_w * 0.35, nose_bot, 0.012, 0.007), edge)
        _paint(img, nostril, ident.skin * 0.3)

    # mouth with expression
    mu = (u - 0.5) / ident.mouth_w
    curve = 0.78 - view.smile * 0.02 * (1 - mu ** 2)
    thick = ident.lip_thick * (1 + 0.8 * view.mouth_open)
    lips = _smooth(np.abs(v - curve) - thick * np.clip(1 - mu ** 2, 0, 1), edge) * (np.abs(mu) < 1)
    _paint(img, lips, ident.lip)
    gap = _smooth(np.abs(v - curve) - thick * 0.35 * view.mouth_open * np.clip(1 - mu ** 2, 0, 1), edge) * (np.abs(mu) < 0.9)
    _paint(img, gap * (view.mouth_open > 0.3), (0.15, 0.02, 0.04))

    img = (img - 0.5) * view.contrast + 0.5 + view.brightness
    noise = np.random.default_rng(view.noise_seed).normal(0, 0.015, img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def make_corpus(n_identities: int = 40, images_per_identity: int = 10, size: int = 64, seed: int = 0):
    """Return (images N x H x W x 3 float64, labels) ordered identity-major."""
    rng = np.random.default_rng(seed)
    idents = [IdentityParams.sample(rng) for _ in range(n_identities)]
    images, labels = [], []
    for k, ident in enumerate(idents):
        for _ in range(images_per_identity):
            images.append(render_face(ident, ViewParams.sample(rng), size))
            labels.append(f"id{k:03d}")
    return np.stack(images), labels
