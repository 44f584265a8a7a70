"""Synthetic crowd scene generation.

Domains are parameterized by a DomainSpec; scenes are rendered as head
blobs on a textured background with controllable style (brightness,
contrast, noise). Geometry and style draw from separate RNG streams so a
pure style shift reproduces the same head layout under matching seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError
from .tensorcore import Tensor

TEXTURES = ("flat", "gradient", "speckle")
PRESET_NAMES = ("scale_up", "density_up", "style_dark", "resolution_down", "mixed")

_MAX_PLACE_ATTEMPTS = 1000


@dataclass(frozen=True)
class DomainSpec:
    """Generative parameters of one synthetic crowd domain."""

    image_size: tuple[int, int] = (64, 64)
    count_range: tuple[int, int] = (3, 8)
    head_radius_range: tuple[float, float] = (2.0, 3.0)
    brightness: float = 0.55
    contrast: float = 1.0
    noise_sigma: float = 0.02
    background_texture: str = "flat"
    seed_stream: int = 0

    def __post_init__(self):
        if self.count_range[0] > self.count_range[1] or self.count_range[0] < 0:
            raise ConfigError(f"bad count_range {self.count_range}")
        if self.head_radius_range[0] > self.head_radius_range[1] or self.head_radius_range[0] < 1:
            raise ConfigError(f"bad head_radius_range {self.head_radius_range} (min radius is 1)")
        if not (0.0 <= self.brightness <= 1.0):
            raise ConfigError(f"brightness {self.brightness} outside [0,1]")
        if not (0.0 < self.contrast <= 2.0):
            raise ConfigError(f"contrast {self.contrast} outside (0,2]")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma {self.noise_sigma} < 0")
        if self.background_texture not in TEXTURES:
            raise ConfigError(f"unknown background_texture {self.background_texture!r}")


@dataclass
class Scene:
    """One rendered scene: RGB image, head points, hard binary ground truth."""

    image: Tensor                      # (3,H,W) in [0,1]
    points: list[tuple[int, int, float]]  # (row, col, radius)
    gt_binary: Tensor                  # (1,H,W) in {0,1}


def render_binary_map(points, image_size) -> Tensor:
    """Union of hard discs at the annotated radii; overlap does not double-count."""
    h, w = image_size
    gt = np.zeros((h, w), dtype=np.float64)
    for (r0, c0, rad) in points:
        if not (0 <= r0 < h and 0 <= c0 < w):
            raise ConfigError(f"point ({r0},{c0}) outside {h}x{w} image")
        ri = int(np.floor(rad))
        rows = np.arange(max(0, int(r0) - ri), min(h, int(r0) + ri + 1))
        cols = np.arange(max(0, int(c0) - ri), min(w, int(c0) + ri + 1))
        dr = (rows - r0)[:, None]
        dc = (cols - c0)[None, :]
        inside = dr * dr + dc * dc <= rad * rad
        gt[np.ix_(rows, cols)] = np.maximum(gt[np.ix_(rows, cols)], inside.astype(np.float64))
    return Tensor(gt[None])


def _place_heads(spec: DomainSpec, geo_rng: np.random.Generator):
    h, w = spec.image_size
    count = int(geo_rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    radii = geo_rng.uniform(spec.head_radius_range[0], spec.head_radius_range[1], size=count)
    points: list[tuple[int, int, float]] = []
    for rad in radii:
        margin = int(np.ceil(rad))
        if h - 1 - margin < margin or w - 1 - margin < margin:
            raise CapacityError(f"radius {rad:.1f} does not fit a {h}x{w} image")
        for attempt in range(_MAX_PLACE_ATTEMPTS):
            r0 = int(geo_rng.integers(margin, h - margin))
            c0 = int(geo_rng.integers(margin, w - margin))
            # discs must stay 4-disconnected so each head is its own component
            ok = all((r0 - pr) ** 2 + (c0 - pc) ** 2 >= (rad + prad + 2.0) ** 2
                     for (pr, pc, prad) in points)
            if ok:
                points.append((r0, c0, float(rad)))
                break
        else:
            raise CapacityError(
                f"could not place head {len(points) + 1}/{count} after "
                f"{_MAX_PLACE_ATTEMPTS} attempts (spec too crowded: {spec})")
    return points


def _background(spec: DomainSpec, style_rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    if spec.background_texture == "flat":
        return np.full((h, w), 0.25)
    if spec.background_texture == "gradient":
        theta = style_rng.uniform(0.0, 2.0 * np.pi)
        rr, cc = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        ramp = rr * np.cos(theta) + cc * np.sin(theta)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
        return 0.1 + 0.3 * ramp
    # speckle
    return np.clip(0.25 + 0.12 * style_rng.standard_normal((h, w)), 0.0, 0.5)


def _head_field(points, image_size) -> np.ndarray:
    h, w = image_size
    field = np.zeros((h, w), dtype=np.float64)
    for (r0, c0, rad) in points:
        ri = int(np.floor(rad))
        rows = np.arange(max(0, r0 - ri), min(h, r0 + ri + 1))
        cols = np.arange(max(0, c0 - ri), min(w, c0 + ri + 1))
        dr = (rows - r0)[:, None]
        dc = (cols - c0)[None, :]
        d = np.sqrt(dr * dr + dc * dc)
        blob = np.where(d <= rad, np.cos(0.5 * np.pi * d / rad), 0.0)
        field[np.ix_(rows, cols)] = np.maximum(field[np.ix_(rows, cols)], blob)
    return field


def sample_scene(spec: DomainSpec, seed: int) -> Scene:
    """Draw one scene. Identical (spec, seed) always yields an identical Scene."""
    ss = np.random.SeedSequence([spec.seed_stream, int(seed)])
    geo_ss, style_ss = ss.spawn(2)
    geo_rng = np.random.default_rng(geo_ss)
    style_rng = np.random.default_rng(style_ss)

    points = _place_heads(spec, geo_rng)
    gray = np.maximum(_background(spec, style_rng), _head_field(points, spec.image_size))
    gray = spec.contrast * (gray - 0.5) + 0.5 + (spec.brightness - 0.5)
    img = np.repeat(gray[None], 3, axis=0)
    if spec.noise_sigma > 0:
        img = img + style_rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    return Scene(image=Tensor(img), points=points,
                 gt_binary=render_binary_map(points, spec.image_size))


def generate_set(spec: DomainSpec, n: int, seed0: int) -> list[Scene]:
    return [sample_scene(spec, seed0 + i) for i in range(n)]


# ---------------------------------------------------------------------------
# domain-shift presets

SOURCE_SPEC = DomainSpec()

_PRESET_TARGETS = {
    "scale_up": replace(SOURCE_SPEC, head_radius_range=(3.5, 5.0)),
    "density_up": replace(SOURCE_SPEC, count_range=(10, 16)),
    "style_dark": replace(SOURCE_SPEC, brightness=0.25),
    "resolution_down": replace(SOURCE_SPEC, image_size=(48, 48)),
    "mixed": replace(SOURCE_SPEC, head_radius_range=(3.0, 4.0), count_range=(8, 12),
                     brightness=0.3, noise_sigma=0.08, background_texture="speckle"),
}


def shift_preset(name: str) -> tuple[DomainSpec, DomainSpec]:
    """Fixed (source, target) spec pair for one named shift factor."""
    if name not in _PRESET_TARGETS:
        raise ConfigError(f"unknown shift preset {name!r}; choose from {PRESET_NAMES}")
    return SOURCE_SPEC, _PRESET_TARGETS[name]


def interpolate_specs(a: DomainSpec, b: DomainSpec, alpha: float) -> DomainSpec:
    """Fieldwise interpolation from a (alpha=0) to b (alpha=1).

    Integer fields round to the nearest valid value; image sizes snap to
    multiples of 4 (the locator's stride requirement); the texture flips
    to b's at alpha >= 0.5. Used to construct intermediate proxy domains.
    """

    def lerp(x, y):
        return (1 - alpha) * x + alpha * y

    def snap4(x):
        return max(4, int(round(x / 4.0)) * 4)

    return DomainSpec(
        image_size=(snap4(lerp(a.image_size[0], b.image_size[0])),
                    snap4(lerp(a.image_size[1], b.image_size[1]))),
        count_range=(int(round(lerp(a.count_range[0], b.count_range[0]))),
                     int(round(lerp(a.count_range[1], b.count_range[1])))),
        head_radius_range=(lerp(a.head_radius_range[0], b.head_radius_range[0]),
                           lerp(a.head_radius_range[1], b.head_radius_range[1])),
        brightness=lerp(a.brightness, b.brightness),
        contrast=lerp(a.contrast, b.contrast),
        noise_sigma=lerp(a.noise_sigma, b.noise_sigma),
        background_texture=a.background_texture if alpha < 0.5 else b.background_texture,
        seed_stream=a.seed_stream,
    )


def proxy_spec_for(preset_name: str) -> DomainSpec:
    """Midpoint proxy domain for one shift preset."""
    src, tgt = shift_preset(preset_name)
    return interpolate_specs(src, tgt, 0.5)


# ---------------------------------------------------------------------------
# cropping and persistence

def random_crop(scene: Scene, size: int, rng: np.random.Generator):
    """Random square crop of (image, gt) as a training sample."""
    h, w = scene.gt_binary.shape[1:]
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds scene {h}x{w}")
    r0 = int(rng.integers(0, h - size + 1))
    c0 = int(rng.integers(0, w - size + 1))
    img = Tensor(scene.image.data[:, r0:r0 + size, c0:c0 + size].copy())
    gt = Tensor(scene.gt_binary.data[:, r0:r0 + size, c0:c0 + size].copy())
    return img, gt


_MAGIC = b"DPDSCNE1"


def save_scene(path, scene: Scene):
    """Flat binary dump: magic, H, W, count header then image, gt, points."""
    h, w = scene.gt_binary.shape[1:]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", h, w, len(scene.points)))
        fh.write(scene.image.data.tobytes())
        fh.write(scene.gt_binary.data.tobytes())
        for (r, c, rad) in scene.points:
            fh.write(struct.pack("<ddd", float(r), float(c), rad))


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a scene file (magic {magic!r})")
        h, w, n = struct.unpack("<III", fh.read(12))
        img = np.frombuffer(fh.read(8 * 3 * h * w), dtype=np.float64).reshape(3, h, w)
        gt = np.frombuffer(fh.read(8 * h * w), dtype=np.float64).reshape(1, h, w)
        points = []
        for _ in range(n):
            r, c, rad = struct.unpack("<ddd", fh.read(24))
            points.append((int(r), int(c), rad))
    return Scene(image=Tensor(img.copy()), points=points, gt_binary=Tensor(gt.copy()))


def save_ppm(path, image: Tensor):
    """Lossless 8-bit portable pixmap for quick visual inspection."""
    arr = np.clip(np.round(image.data * 255.0), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def save_set(directory, scenes: list[Scene], with_ppm: bool = False):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        save_scene(directory / f"scene_{i:05d}.bin", sc)
        if with_ppm:
            save_ppm(directory / f"scene_{i:05d}.ppm", sc.image)
