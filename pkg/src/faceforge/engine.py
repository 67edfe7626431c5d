"""Deterministic procedural face engine.

Renders a ParameterVector to a 64x64 grayscale sketch plus a per-pixel
label map. Continuous knobs drive geometric primitives rasterized with
1-pixel anti-aliasing from approximate signed distances; primitives are
composited back to front, so a pixel's label is the topmost primitive that
covers it with alpha > 0.5. The argmax of each discrete group selects a
fixed template (hair silhouette, eyebrow shape).

Layout conventions: canvas is 64x64, x to the right, y downward, pixel
centers at integer coordinates + 0.5. All geometry derives from the face
anchor (center, half-axes), never from other feature groups, which keeps
each group's pixel footprint inside a fixed bounding region
(see REGION_TABLE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .params import DEFAULT_SPEC, ParameterError, ParameterSpec, ParameterVector, one_hot

SIZE = 64
BACKGROUND_VALUE = 0.10

# label ids, fixed 7-class set
LABELS = {
    "background": 0,
    "skin": 1,
    "brow": 2,
    "eye": 3,
    "nose": 4,
    "mouth": 5,
    "hair": 6,
}
N_LABELS = 7

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE]
_XX = _XX + 0.5
_YY = _YY + 0.5

# per-knob documentation: (index within group, name, monotone effect or None).
# A monotone entry (measure, +1) asserts that increasing the knob weakly
# increases the named mask measurement; tests/test_engine.py exercises every
# entry over random contexts.
PARAM_TABLE = {
    "eyebrow": [
        (0, "height above eye line", None),
        (1, "length", ("brow_mask_width", +1)),
        (2, "thickness", ("brow_mask_area", +1)),
        (3, "arch curvature", None),
        (4, "tilt", None),
        (5, "darkness", None),
    ],
    "eye": [
        (0, "eye line height", None),
        (1, "spacing", ("eye_centroid_distance", +1)),
        (2, "eye width", ("eye_mask_width", +1)),
        (3, "eye openness", ("eye_mask_area", +1)),
        (4, "tilt", None),
        (5, "pupil size", None),
        (6, "pupil darkness", None),
        (7, "sclera brightness", None),
        (8, "outline darkness", None),
        (9, "left-eye height offset", None),
    ],
    "nose": [
        (0, "length", ("nose_mask_height", +1)),
        (1, "base width", ("nose_mask_width", +1)),
        (2, "bridge width", None),
        (3, "nostril size", None),
        (4, "nostril flare", None),
        (5, "shading darkness", None),
    ],
    "mouth": [
        (0, "vertical position", None),
        (1, "width", ("mouth_mask_width", +1)),
        (2, "upper lip thickness", None),
        (3, "lower lip thickness", ("mouth_mask_area", +1)),
        (4, "corner droop", None),
        (5, "corner taper", None),
        (6, "lip darkness", None),
        (7, "seam darkness", None),
    ],
    "face": [
        (0, "center x", None),
        (1, "center y", None),
        (2, "half width", ("skin_mask_width", +1)),
        (3, "half height", ("skin_mask_height", +1)),
        (4, "chin taper", None),
        (5, "cheek fullness", None),
        (6, "jaw exponent", None),
        (7, "skin brightness", None),
        (8, "outline darkness", None),
        (9, "hairline height", None),
        (10, "vertical feature spread", None),
        (11, "horizontal feature spread", None),
    ],
}

# conservative pixel bounding boxes (x0, y0, x1, y1), inclusive, derived by
# sweeping each group over random contexts and freezing the union + margin;
# perturbing a continuous group never changes pixels outside its box
REGION_TABLE = {
    "eyebrow": (12, 16, 52, 32),
    "eye": (14, 20, 50, 38),
    "nose": (22, 26, 42, 46),
    "mouth": (16, 33, 48, 53),
    "face": (0, 0, 63, 63),
}


def _signed(p):
    return 2.0 * p - 1.0


def _alpha_from_distance(d, aa=1.0):
    return np.clip(0.5 - d / aa, 0.0, 1.0)


class _Canvas:
    def __init__(self):
        self.image = np.full((SIZE, SIZE), BACKGROUND_VALUE, np.float64)
        self.labels = np.zeros((SIZE, SIZE), np.uint8)

    def paint(self, alpha, value, label):
        self.image = self.image * (1.0 - alpha) + value * alpha
        self.labels[alpha > 0.5] = label


def _ellipse_distance(cx, cy, ax, ay, tilt=0.0, width_profile=None):
    """Approximate signed distance (px) to an axis-scaled, optionally tilted ellipse."""
    x = _XX - cx
    y = _YY - cy
    if tilt:
        c, s = np.cos(tilt), np.sin(tilt)
        x, y = c * x + s * y, -s * x + c * y
    ax_eff = ax * width_profile(y) if width_profile is not None else ax
    r = np.sqrt((x / ax_eff) ** 2 + (y / ay) ** 2)
    return (r - 1.0) * min(float(np.min(ax_eff)) if width_profile else ax, ay)


def _box_distance(x0, y0, x1, y1):
    dx = np.maximum(x0 - _XX, _XX - x1)
    dy = np.maximum(y0 - _YY, _YY - y1)
    return np.maximum(dx, dy)


def _polyline_distance(points):
    """Distance from every pixel to a polyline given as an (n,2) array of (x,y)."""
    best = np.full((SIZE, SIZE), np.inf)
    for i in range(len(points) - 1):
        px, py = points[i]
        qx, qy = points[i + 1]
        vx, vy = qx - px, qy - py
        denom = vx * vx + vy * vy
        if denom < 1e-12:
            t = 0.0
        else:
            t = np.clip(((_XX - px) * vx + (_YY - py) * vy) / denom, 0.0, 1.0)
        d = np.sqrt((_XX - (px + t * vx)) ** 2 + (_YY - (py + t * vy)) ** 2)
        best = np.minimum(best, d)
    return best


@dataclass(frozen=True)
class _FaceFrame:
    cx: float
    cy: float
    a: float
    b: float
    sx: float
    sy: float
    skin: float


def _face_frame(face):
    u = _signed(face)
    return _FaceFrame(
        cx=32.0 + 3.0 * u[0],
        cy=33.0 + 2.0 * u[1],
        a=17.0 + 4.0 * u[2],
        b=21.0 + 3.0 * u[3],
        sx=1.0 + 0.06 * u[11],
        sy=1.0 + 0.08 * u[10],
        skin=0.68 + 0.07 * u[7],
    )


def _paint_face(cv, face, fr):
    u = _signed(face)
    taper = 0.25 + 0.2 * face[4]
    cheek = 0.08 * u[5]
    q = 1.6 + 1.2 * face[6]

    def width_profile(y_rel):
        t = np.clip(y_rel / fr.b, 0.0, 1.0)
        return 1.0 + cheek * np.sin(np.pi * t) - taper * t**q

    d = _ellipse_distance(fr.cx, fr.cy, fr.a, fr.b, width_profile=width_profile)
    cv.paint(_alpha_from_distance(d), fr.skin, LABELS["skin"])
    outline = 0.12 + 0.18 * face[8]
    ring = np.clip(1.1 - np.abs(d), 0.0, 1.0)
    cv.paint(ring, fr.skin - outline, LABELS["skin"])
    return d


def _paint_nose(cv, nose, fr):
    u = _signed(nose)
    bridge_y = fr.cy - fr.b * fr.sy * 0.10
    tip_y = fr.cy + fr.b * fr.sy * (0.14 + 0.08 * u[0])
    base_w = fr.a * (0.09 + 0.05 * nose[1])
    bridge_w = base_w * (0.25 + 0.25 * nose[2])
    value = fr.skin - (0.06 + 0.10 * nose[5])

    t = np.clip((_YY - bridge_y) / max(tip_y - bridge_y, 1e-6), 0.0, 1.0)
    w = bridge_w + (base_w - bridge_w) * t
    d = np.maximum(np.abs(_XX - fr.cx) - w, np.maximum(bridge_y - _YY, _YY - tip_y))
    cv.paint(_alpha_from_distance(d), value, LABELS["nose"])

    r = 0.7 + 0.7 * nose[3]
    off = base_w * (0.55 + 0.35 * nose[4])
    for sx in (-1.0, 1.0):
        dd = np.sqrt((_XX - (fr.cx + sx * off)) ** 2 + (_YY - (tip_y - 0.5)) ** 2) - r
        cv.paint(_alpha_from_distance(dd), value - 0.12, LABELS["nose"])


def _paint_mouth(cv, mouth, fr):
    u = _signed(mouth)
    my = fr.cy + fr.b * fr.sy * (0.48 + 0.06 * u[0])
    mw = fr.a * fr.sx * (0.30 + 0.12 * u[1])
    ut = 1.0 + 1.4 * mouth[2]
    lt = 1.4 + 1.8 * mouth[3]
    curve = 2.2 * u[4]
    fe = 0.7 + 0.8 * mouth[5]
    lip = 0.40 - 0.16 * mouth[6]

    t = (_XX - fr.cx) / mw
    env = np.clip(1.0 - t * t, 0.0, 1.0) ** fe
    y_center = my + curve * t * t
    d = np.maximum.reduce(
        [
            (y_center - ut * env) - _YY,
            _YY - (y_center + lt * env),
            (np.abs(t) - 1.0) * mw,
        ]
    )
    cv.paint(_alpha_from_distance(d), lip, LABELS["mouth"])

    seam = lip - (0.08 + 0.10 * mouth[7])
    d_seam = np.maximum(np.abs(_YY - y_center) - 0.55, (np.abs(t) - 0.92) * mw)
    cv.paint(_alpha_from_distance(d_seam), seam, LABELS["mouth"])


def _paint_eyes(cv, eye, fr):
    u = _signed(eye)
    eye_y = fr.cy - fr.b * fr.sy * (0.16 + 0.06 * u[0])
    spacing = fr.a * fr.sx * (0.42 + 0.10 * u[1])
    ew = fr.a * (0.15 + 0.05 * u[2])
    eh = fr.b * (0.040 + 0.022 * u[3])
    tilt = 0.22 * u[4]
    pupil_r = min(ew, eh) * (0.50 + 0.30 * u[5])
    pupil_v = 0.16 + 0.10 * u[6]
    sclera_v = 0.88 + 0.06 * u[7]
    ring_v = fr.skin - (0.25 + 0.15 * eye[8])
    dy_left = 1.2 * u[9]

    for side in (-1.0, 1.0):
        cx = fr.cx + side * spacing
        cy = eye_y + (dy_left if side < 0 else 0.0)
        d = _ellipse_distance(cx, cy, ew, eh, tilt=side * tilt)
        cv.paint(_alpha_from_distance(d), sclera_v, LABELS["eye"])
        ring = np.clip(0.7 - np.abs(d), 0.0, 1.0)
        cv.paint(ring, ring_v, LABELS["eye"])
        dd = np.sqrt((_XX - cx) ** 2 + (_YY - cy) ** 2) - pupil_r
        cv.paint(_alpha_from_distance(dd), pupil_v, LABELS["eye"])


_BROW_STYLES = {  # (arch multiplier, thickness multiplier)
    0: (0.35, 1.0),   # straight
    1: (1.8, 1.0),    # arched
    2: (0.9, 1.9),    # thick
}


def _paint_brows(cv, brow, fr, style):
    u = _signed(brow)
    arch_mul, th_mul = _BROW_STYLES[style]
    brow_y = fr.cy - fr.b * fr.sy * (0.25 + 0.07 * brow[0])
    half_len = fr.a * (0.09 + 0.05 * brow[1])
    thickness = (0.9 + 1.6 * brow[2]) * th_mul
    arch = (0.5 + 2.5 * brow[3]) * arch_mul
    tilt = 0.3 * u[4]
    value = 0.40 - 0.22 * brow[5]
    spacing = fr.a * fr.sx * 0.44

    ts = np.linspace(-1.0, 1.0, 9)
    for side in (-1.0, 1.0):
        cx = fr.cx + side * spacing
        xs = cx + ts * half_len
        ys = brow_y - arch * (1 - ts**2) + side * tilt * ts * half_len
        d = _polyline_distance(np.column_stack([xs, ys])) - thickness * 0.5
        cv.paint(_alpha_from_distance(d), value, LABELS["brow"])


def _paint_hair(cv, face, fr, style, face_d):
    if style == 0:
        return
    hairline_y = fr.cy - fr.b * (0.42 + 0.23 * face[9])
    value = 0.175
    cap_d = _ellipse_distance(fr.cx, fr.cy - 0.06 * fr.b, fr.a * 1.18 + 1.0, fr.b * 1.15 + 1.0)
    alpha = _alpha_from_distance(cap_d)
    if style >= 2:
        depth = 0.45 if style == 2 else 1.35
        band_d = _box_distance(
            fr.cx - (fr.a * 1.16 + 1.0),
            fr.cy - 0.9 * fr.b,
            fr.cx + (fr.a * 1.16 + 1.0),
            fr.cy + depth * fr.b,
        )
        alpha = np.maximum(alpha, _alpha_from_distance(band_d))
    # hair covers the scalp above the hairline and anything outside the face
    above = np.clip(hairline_y - _YY + 0.5, 0.0, 1.0)
    outside = np.clip(0.5 + face_d, 0.0, 1.0)
    cv.paint(alpha * np.maximum(above, outside), value, LABELS["hair"])


def render(params: ParameterVector, spec: ParameterSpec = DEFAULT_SPEC):
    """Rasterize a parameter vector into (image (1,64,64) float32, labels (64,64) uint8).

    Pure and deterministic: equal inputs produce bit-identical outputs.
    """
    params.validate(spec)
    groups = {name: params.group(spec, name) for name, _ in spec.continuous_groups}
    choices = params.choices(spec)
    fr = _face_frame(groups["face"])

    cv = _Canvas()
    face_d = _paint_face(cv, groups["face"], fr)
    _paint_nose(cv, groups["nose"], fr)
    _paint_mouth(cv, groups["mouth"], fr)
    _paint_eyes(cv, groups["eye"], fr)
    _paint_brows(cv, groups["eyebrow"], fr, choices["eyebrow_style"])
    _paint_hair(cv, groups["face"], fr, choices["hair_style"], face_d)

    image = np.clip(cv.image, 0.0, 1.0).astype(np.float32)[None]
    return image, cv.labels


# ---------------------------------------------------------------------------
# perturbations (pose analogue / blur / illumination / sensor noise)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Perturbation:
    """Photo-space degradations; the identity element is Perturbation()."""

    dx: int = 0
    dy: int = 0
    blur_sigma: float = 0.0
    brightness: float = 1.0
    noise_std: float = 0.0

    def validate(self) -> "Perturbation":
        if not (-6 <= self.dx <= 6 and -6 <= self.dy <= 6):
            raise ParameterError(f"shift ({self.dx},{self.dy}) outside [-6,6]")
        if not 0.0 <= self.blur_sigma <= 2.0:
            raise ParameterError(f"blur_sigma {self.blur_sigma} outside [0,2]")
        if not 0.6 <= self.brightness <= 1.4:
            raise ParameterError(f"brightness {self.brightness} outside [0.6,1.4]")
        if not 0.0 <= self.noise_std <= 0.05:
            raise ParameterError(f"noise_std {self.noise_std} outside [0,0.05]")
        return self

    @property
    def is_frontal(self) -> bool:
        return self.dx == 0 and self.dy == 0

    def to_json_dict(self) -> dict:
        return {
            "dx": self.dx,
            "dy": self.dy,
            "sigma": self.blur_sigma,
            "brightness": self.brightness,
            "noise": self.noise_std,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Perturbation":
        return cls(
            dx=int(d["dx"]),
            dy=int(d["dy"]),
            blur_sigma=float(d["sigma"]),
            brightness=float(d["brightness"]),
            noise_std=float(d["noise"]),
        )


def shift_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer-pixel translation with zero fill."""
    out = np.zeros_like(image)
    h, w = image.shape[-2:]
    sx0, sx1 = max(0, -dx), min(w, w - dx)
    sy0, sy1 = max(0, -dy), min(h, h - dy)
    if sx0 < sx1 and sy0 < sy1:
        out[..., sy0 + dy:sy1 + dy, sx0 + dx:sx1 + dx] = image[..., sy0:sy1, sx0:sx1]
    return out


def perturb(image: np.ndarray, p: Perturbation, rng_seed: int = 0) -> np.ndarray:
    """Apply shift, blur, brightness scale and additive noise, then clamp.

    The order is fixed (shift -> blur -> brightness -> noise -> clamp); the
    noise draw is the only randomness and is fully determined by rng_seed.
    """
    p.validate()
    out = np.asarray(image, np.float32)
    if p.dx or p.dy:
        out = shift_image(out, p.dx, p.dy)
    if p.blur_sigma > 0:
        out = np.stack(
            [ndimage.gaussian_filter(ch, p.blur_sigma, mode="nearest") for ch in out]
        )
    if p.brightness != 1.0:
        out = out * np.float32(p.brightness)
    if p.noise_std > 0:
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
        out = out + gen.standard_normal(out.shape).astype(np.float32) * np.float32(p.noise_std)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# parameter samplers
# ---------------------------------------------------------------------------

def sample_parameters(rng_seed, spec: ParameterSpec = DEFAULT_SPEC) -> ParameterVector:
    """Uniform draw: continuous iid U[0,1], one uniform category per discrete group."""
    gen = _as_generator(rng_seed)
    continuous = gen.uniform(0.0, 1.0, spec.cn)
    picks = [int(gen.integers(0, card)) for _, card in spec.discrete_groups]
    return ParameterVector(continuous, one_hot(spec, picks))


# The identity population lives on a low-dimensional affine subspace per
# group (real facial parameters are strongly correlated); the mixing bases
# are fixed constants of the synthetic world, independent of dataset seeds.
_IDENTITY_BASIS_SEED = 1377
_IDENTITY_DIM_STD = 0.16
_IDENTITY_JITTER_STD = 0.02
_basis_cache: dict = {}


def identity_basis(spec: ParameterSpec = DEFAULT_SPEC):
    """Per-group (orthonormal basis, latent scales) defining the identity manifold."""
    key = spec.digest()
    if key not in _basis_cache:
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_IDENTITY_BASIS_SEED)))
        bases = {}
        for name, d in spec.continuous_groups:
            r = (d + 1) // 2
            q, _ = np.linalg.qr(gen.standard_normal((d, d)))
            basis = q[:, :r]
            raw = 0.75 ** np.arange(r)
            scales = raw * np.sqrt(d * _IDENTITY_DIM_STD**2 / np.sum(raw**2))
            bases[name] = (basis, scales)
        _basis_cache[key] = bases
    return _basis_cache[key]


def sample_identity_parameters(rng_seed, spec: ParameterSpec = DEFAULT_SPEC) -> ParameterVector:
    """Draw one identity from the correlated low-rank population."""
    gen = _as_generator(rng_seed)
    bases = identity_basis(spec)
    parts = []
    for name, d in spec.continuous_groups:
        basis, scales = bases[name]
        z = gen.standard_normal(len(scales)) * scales
        x = 0.5 + basis @ z + gen.standard_normal(d) * _IDENTITY_JITTER_STD
        parts.append(np.clip(x, 0.0, 1.0))
    picks = [int(gen.integers(0, card)) for _, card in spec.discrete_groups]
    return ParameterVector(np.concatenate(parts), one_hot(spec, picks))


def _as_generator(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
