"""Seeded synthetic lesion scenes with exact ground-truth masks.

Each scene is a noisy background with one brighter lesion (ellipse or
irregular polygon). The lesion's eccentricity is its irregularity; scenes
above the cutoff are labelled malignant.
"""

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from .exceptions import InvalidInputError
from .formats import decode_pbm, decode_pgm, encode_pbm, encode_pgm, read_bytes, write_bytes

QUERY_TEMPLATE = "Can you segment the lesion and give the diagnosis?"
LABELS = ("benign", "malignant")
SHAPES = ("ellipse", "polygon")
POLYGON_VERTICES = 12
POLYGON_RADIAL_JITTER = 0.12


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    shape: str = "ellipse"
    size_range: Tuple[float, float] = (0.10, 0.18)
    irregularity_range: Tuple[float, float] = (0.3, 0.9)
    cutoff: float = 0.6
    texture_noise: float = 0.2
    background: float = 0.35
    contrast: float = 0.3
    seed: int = 0
    subset: str = ""

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidInputError(f"shape must be one of {SHAPES}")
        lo, hi = self.size_range
        if not 0.0 < lo <= hi <= 0.5:
            raise InvalidInputError("size fractions must satisfy 0 < lo <= hi <= 0.5")
        ilo, ihi = self.irregularity_range
        if not 0.0 <= ilo <= ihi < 1.0:
            raise InvalidInputError("irregularity range must lie in [0, 1)")
        if not 0.0 < self.cutoff < 1.0:
            raise InvalidInputError("cutoff must lie in (0, 1)")
        if self.height < 4 or self.width < 4:
            raise InvalidInputError("image must be at least 4x4")

    @property
    def tag(self):
        return self.subset or self.shape

    def max_semi_axis(self):
        area = self.size_range[1] * self.height * self.width
        ratio = math.sqrt(1.0 - self.irregularity_range[1] ** 2)
        a = math.sqrt(area / (math.pi * ratio))
        if self.shape == "polygon":
            a *= 1.0 + POLYGON_RADIAL_JITTER
        return a

    def label_for(self, irregularity):
        return LABELS[1] if irregularity > self.cutoff else LABELS[0]


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image: np.ndarray  # uint8
    mask: np.ndarray  # bool
    label: str
    query: str
    subset: str
    irregularity: float = float("nan")
    area: float = float("nan")
    perimeter: float = float("nan")


def _pixel_centres(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys + 0.5, xs + 0.5


def rasterize_ellipse(h, w, cy, cx, a, b, angle):
    ys, xs = _pixel_centres(h, w)
    dy, dx = ys - cy, xs - cx
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def rasterize_polygon(h, w, vertices):
    """Even-odd test of every pixel centre against the closed polygon ``(y, x)`` vertices."""
    ys, xs = _pixel_centres(h, w)
    inside = np.zeros((h, w), dtype=bool)
    vy, vx = vertices[:, 0], vertices[:, 1]
    for i in range(len(vertices)):
        y0, x0 = vy[i - 1], vx[i - 1]
        y1, x1 = vy[i], vx[i]
        if y0 == y1:
            continue
        crosses = (y0 > ys) != (y1 > ys)
        x_at = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_at)
    return inside


def _shoelace(vertices):
    y, x = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _place(rng, extent_y, extent_x, h, w):
    """Centre on the half-pixel lattice with equal parity on both axes, lesion fully inside."""
    lo_x, hi_x = math.ceil(2 * (extent_x + 1)), math.floor(2 * (w - extent_x - 1))
    lo_y, hi_y = math.ceil(2 * (extent_y + 1)), math.floor(2 * (h - extent_y - 1))
    if lo_x > hi_x or lo_y > hi_y:
        raise InvalidInputError("lesion does not fit inside the image")
    kx = int(rng.integers(lo_x, hi_x + 1))
    choices = [k for k in range(lo_y, hi_y + 1) if (k - kx) % 2 == 0]
    if not choices:
        raise InvalidInputError("lesion does not fit inside the image")
    ky = choices[int(rng.integers(len(choices)))]
    return ky / 2.0, kx / 2.0


def _generate_one(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    frac = rng.uniform(*spec.size_range)
    irregularity = float(rng.uniform(*spec.irregularity_range))
    angle = float(rng.uniform(0.0, math.pi))
    area = frac * h * w
    ratio = math.sqrt(1.0 - irregularity ** 2)
    a = math.sqrt(area / (math.pi * ratio))
    b = a * ratio
    if spec.shape == "ellipse":
        ext_x = math.sqrt((a * math.cos(angle)) ** 2 + (b * math.sin(angle)) ** 2)
        ext_y = math.sqrt((a * math.sin(angle)) ** 2 + (b * math.cos(angle)) ** 2)
        cy, cx = _place(rng, ext_y, ext_x, h, w)
        mask = rasterize_ellipse(h, w, cy, cx, a, b, angle)
        # Ramanujan's approximation
        perimeter = math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))
    else:
        step = 2 * math.pi / POLYGON_VERTICES
        phis = np.arange(POLYGON_VERTICES) * step + rng.uniform(-0.3, 0.3, POLYGON_VERTICES) * step
        radii = a * b / np.sqrt((b * np.cos(phis)) ** 2 + (a * np.sin(phis)) ** 2)
        radii *= 1.0 + rng.uniform(-POLYGON_RADIAL_JITTER, POLYGON_RADIAL_JITTER, POLYGON_VERTICES)
        px, py = radii * np.cos(phis), radii * np.sin(phis)
        rx = px * math.cos(angle) - py * math.sin(angle)
        ry = px * math.sin(angle) + py * math.cos(angle)
        local = np.stack([ry, rx], axis=1)
        local *= math.sqrt(area / _shoelace(local))
        cy, cx = _place(rng, np.abs(local[:, 0]).max(), np.abs(local[:, 1]).max(), h, w)
        vertices = local + np.array([cy, cx])
        mask = rasterize_polygon(h, w, vertices)
        perimeter = float(np.sum(np.hypot(*(vertices - np.roll(vertices, 1, axis=0)).T)))
    image = spec.background + spec.texture_noise * rng.standard_normal((h, w))
    image = image + spec.contrast * mask
    image = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return Sample(
        sample_id=f"{spec.tag}-{spec.seed}-{index:05d}",
        image=image,
        mask=mask,
        label=spec.label_for(irregularity),
        query=QUERY_TEMPLATE,
        subset=spec.tag,
        irregularity=irregularity,
        area=area,
        perimeter=perimeter,
    )


def generate(spec, count):
    if count < 1:
        raise InvalidInputError("sample count must be >= 1")
    if spec.max_semi_axis() > min(spec.height, spec.width) / 2.0 - 1.0:
        raise InvalidInputError(
            "largest lesion allowed by the scene settings does not fit inside the image")
    return [_generate_one(spec, i) for i in range(count)]


def write_dataset(samples, directory, spec=None):
    """Write PGM images, PBM masks and ``manifest.json`` under ``directory``."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    entries = []
    for s in samples:
        image_rel = os.path.join("images", f"{s.sample_id}.pgm")
        mask_rel = os.path.join("masks", f"{s.sample_id}.pbm")
        write_bytes(os.path.join(directory, image_rel), encode_pgm(s.image))
        write_bytes(os.path.join(directory, mask_rel), encode_pbm(s.mask))
        entries.append({"id": s.sample_id, "image": image_rel, "mask": mask_rel,
                        "label": s.label, "subset": s.subset, "query": s.query})
    manifest = {"samples": entries}
    if spec is not None:
        manifest["spec"] = asdict(spec)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_dataset(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        samples = []
        for e in manifest["samples"]:
            samples.append(Sample(
                sample_id=e["id"],
                image=decode_pgm(read_bytes(os.path.join(directory, e["image"]))),
                mask=decode_pbm(read_bytes(os.path.join(directory, e["mask"]))),
                label=e["label"],
                query=e.get("query", QUERY_TEMPLATE),
                subset=e.get("subset", "default"),
            ))
    except (OSError, KeyError, ValueError) as exc:
        raise OSError(f"cannot read dataset at {directory}: {exc}") from exc
    return samples
