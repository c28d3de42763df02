"""Synthetic detection scenes with controllable style shift.

A scene is a 64x64 RGB image containing 1-3 textured shapes on a plain
background. Class is carried by high-frequency content — the silhouette
plus a class-specific fill texture (solid / checkerboard / stripes) —
while color is drawn independently of class, so photometric style shifts
never move label-relevant information. Shape geometry, class, and box
labels are drawn *before* any style-dependent value, so for a fixed
stream every domain produces the same content with a different look.
Domain style = background palette + a photometric transform (hue rotation
about the gray axis, contrast, brightness, additive noise), applied in
that order and clamped to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..numcore import RngStream

IMG_SIZE = 64
# Class = silhouette + fill texture: solid circle, checkered square,
# striped triangle. Texture is the fast-to-learn high-frequency cue.
CLASS_NAMES = ("circle", "square", "triangle")

# Object colors are drawn independently of class: shape alone carries the
# label, so photometric shifts are pure style (content is never encoded in
# the statistics a style shift moves).
OBJECT_COLORS = (
    (0.85, 0.25, 0.20),
    (0.20, 0.75, 0.30),
    (0.25, 0.40, 0.90),
    (0.88, 0.80, 0.22),
    (0.78, 0.28, 0.80),
    (0.22, 0.78, 0.78),
)

SOURCE_BACKGROUND_PALETTE = (
    (0.52, 0.52, 0.52),
    (0.58, 0.57, 0.55),
    (0.47, 0.49, 0.51),
)

MAX_OBJECTS = 3
MAX_PLACEMENT_TRIES = 40
MAX_GEN_IOU = 0.3


@dataclass(frozen=True)
class DomainSpec:
    """A named style: rendering palette plus photometric shift parameters.

    ``brightness_jitter`` / ``contrast_jitter`` add a per-scene uniform
    draw on top of the fixed shift — natural within-domain lighting
    variety (used by the source domain; zero for the shifted test domains
    so their style is a fixed, nameable condition)."""

    name: str
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0        # degrees, about the RGB gray axis
    additive_noise_std: float = 0.0
    illumination_gradient: float = 0.0  # smooth directional gain in [1-g, 1+g]
    brightness_jitter: float = 0.0   # +- range, uniform per scene
    contrast_jitter: float = 0.0     # +- range around contrast_scale
    background_palette: tuple[tuple[float, float, float], ...] = SOURCE_BACKGROUND_PALETTE


@dataclass
class SceneSample:
    image: np.ndarray   # (1, 3, 64, 64) float in [0, 1]
    boxes: np.ndarray   # (m, 4) normalized (cx, cy, w, h)
    labels: np.ndarray  # (m,) ints indexing CLASS_NAMES
    domain: str = "source"


def standard_domains() -> dict[str, DomainSpec]:
    """The source domain plus four named style shifts used throughout the
    experiments. Shifted domains share the source palette so that, for a
    fixed stream, they render the *same* scene with a different look."""
    return {
        "source": DomainSpec(name="source", brightness_jitter=0.06,
                             contrast_jitter=0.10),
        "dim": DomainSpec(name="dim", brightness_shift=-0.28,
                          contrast_scale=0.55,
                          illumination_gradient=0.30,
                          additive_noise_std=0.02),
        "washed": DomainSpec(name="washed", contrast_scale=0.42,
                             brightness_shift=0.15),
        "dark_noisy": DomainSpec(name="dark_noisy", brightness_shift=-0.22,
                                 contrast_scale=0.55,
                                 illumination_gradient=0.28,
                                 additive_noise_std=0.08),
        "tinted": DomainSpec(name="tinted", hue_rotation=100.0,
                             contrast_scale=0.50,
                             illumination_gradient=0.22,
                             brightness_shift=0.05),
    }


def _box_iou_xyxy(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation about the (1,1,1)/sqrt(3) axis in RGB space; 120 degrees
    cyclically permutes the channels."""
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    ones = np.full((3, 3), 1.0 / 3.0)
    skew = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / np.sqrt(3.0)
    return cos * np.eye(3) + (1.0 - cos) * ones + sin * skew


def apply_domain_style(image: np.ndarray, domain: DomainSpec,
                       rng: RngStream) -> np.ndarray:
    """Photometric transform of a rendered (3, h, w) image. The identity
    domain returns the input array unchanged (bitwise)."""
    out = image
    touched = False
    contrast = domain.contrast_scale
    brightness = domain.brightness_shift
    if domain.contrast_jitter > 0.0:
        contrast = contrast + float(rng.uniform(-domain.contrast_jitter,
                                                domain.contrast_jitter))
    if domain.brightness_jitter > 0.0:
        brightness = brightness + float(rng.uniform(-domain.brightness_jitter,
                                                    domain.brightness_jitter))
    if domain.hue_rotation != 0.0:
        rot = _hue_rotation_matrix(domain.hue_rotation).astype(out.dtype)
        out = np.tensordot(rot, out, axes=([1], [0]))
        touched = True
    if domain.illumination_gradient > 0.0:
        # smooth linear lighting field in a random direction: the purest
        # low-frequency style shift (content/texture structure untouched)
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        size = out.shape[-1]
        yy, xx = _pixel_grid(size)
        unit = ((xx / size - 0.5) * np.cos(theta)
                + (yy / size - 0.5) * np.sin(theta)) / np.sqrt(0.5)
        field = 1.0 + domain.illumination_gradient * unit
        out = out * field.astype(out.dtype)
        touched = True
    if contrast != 1.0:
        out = (out - 0.5) * contrast + 0.5
        touched = True
    if brightness != 0.0:
        out = out + brightness
        touched = True
    if domain.additive_noise_std > 0.0:
        out = out + rng.normal(0.0, domain.additive_noise_std, size=out.shape).astype(out.dtype)
        touched = True
    return np.clip(out, 0.0, 1.0) if touched else out


_GRID_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(size: int):
    if size not in _GRID_CACHE:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        _GRID_CACHE[size] = (yy, xx)
    return _GRID_CACHE[size]


def _shape_mask(cls: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = _pixel_grid(size)
    if cls == 0:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == 1:  # square
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= r
    # upward triangle inscribed in the box
    return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - cy + r) / 2.0)


def _texture_mask(cls: int, size: int) -> np.ndarray | None:
    """Class-specific fill pattern over the whole canvas: None for solid,
    a boolean mask (True = secondary tone) for checker / stripes."""
    yy, xx = _pixel_grid(size)
    if cls == 1:  # checkerboard, 2 px period
        return ((xx // 2).astype(int) + (yy // 2).astype(int)) % 2 == 1
    if cls == 2:  # horizontal stripes, 2 px period
        return (yy // 2).astype(int) % 2 == 1
    return None


def generate_scene(rng: RngStream, domain: DomainSpec, size: int = IMG_SIZE,
                   dtype=np.float64) -> SceneSample:
    """Render one scene under ``domain``. All geometry (object count,
    classes, sizes, positions, color jitter) is drawn before any
    domain-dependent value, so labels are invariant to the style."""
    n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    objects = []
    for _ in range(n_objects):
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        placed = None
        for _attempt in range(MAX_PLACEMENT_TRIES):
            r = float(rng.uniform(9.0, 16.0))
            cx = float(rng.uniform(r + 2.0, size - r - 2.0))
            cy = float(rng.uniform(r + 2.0, size - r - 2.0))
            box = (cx - r, cy - r, cx + r, cy + r)
            if all(_box_iou_xyxy(box, o[3]) <= MAX_GEN_IOU for o in objects):
                placed = (cls, cx, cy, box, r)
                break
        color_idx = int(rng.integers(0, len(OBJECT_COLORS)))
        jitter = rng.uniform(-0.06, 0.06, size=3)
        if placed is not None:
            cls, cx, cy, box, r = placed
            color = np.clip(np.asarray(OBJECT_COLORS[color_idx]) + jitter, 0.0, 1.0)
            objects.append((cls, cx, cy, box, r, color))

    bg_idx = int(rng.integers(0, len(domain.background_palette)))
    bg = np.asarray(domain.background_palette[bg_idx], dtype=dtype)

    image = np.empty((3, size, size), dtype=dtype)
    image[:] = bg[:, None, None]
    boxes, labels = [], []
    for cls, cx, cy, _box, r, color in objects:
        mask = _shape_mask(cls, cx, cy, r, size)
        image[:, mask] = color[:, None].astype(dtype)
        texture = _texture_mask(cls, size)
        if texture is not None:
            image[:, mask & texture] = (0.45 * color)[:, None].astype(dtype)
        boxes.append((cx / size, cy / size, 2.0 * r / size, 2.0 * r / size))
        labels.append(cls)

    image = apply_domain_style(image, domain, rng)
    return SceneSample(image=image[None], boxes=np.asarray(boxes, dtype=dtype),
                       labels=np.asarray(labels, dtype=np.int64), domain=domain.name)


def write_ppm(path, image: np.ndarray) -> None:
    """Dump a (3, h, w) or (1, 3, h, w) image in [0, 1] as binary PPM."""
    img = image[0] if image.ndim == 4 else image
    h, w = img.shape[1], img.shape[2]
    pixels = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def write_scene(path_stem, sample: SceneSample) -> None:
    """PPM image plus a JSON label sidecar for visual inspection."""
    write_ppm(str(path_stem) + ".ppm", sample.image)
    sidecar = {
        "domain": sample.domain,
        "boxes_cxcywh": sample.boxes.tolist(),
        "labels": sample.labels.tolist(),
        "class_names": list(CLASS_NAMES),
    }
    with open(str(path_stem) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
