"""Synthetic source/target detection domains and their on-disk format.

Source scenes are coloured shapes (disk, square, triangle) on a textured grey
background. The target domain is the same scene distribution pushed through a
geometry-preserving appearance shift: hue rotation, fog blending and sensor
noise. Boxes never change under the shift.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray                       # [3, H, W] in [0, 1]
    annotations: list = field(default_factory=list)   # [(BBox, category)]
    id: str = ""


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 24
    class_hues: tuple = (0.0, 120.0, 240.0)
    hue_jitter: float = 15.0
    background_low: float = 0.3
    background_high: float = 0.6
    texture_amplitude: float = 0.08
    gap: int = 2
    placement_retries: int = 50


@dataclass(frozen=True)
class ShiftConfig:
    fog_intensity: float = 0.6
    fog_color: tuple = (0.8, 0.8, 0.82)
    noise_sigma: float = 0.03
    hue_rotation: float = 20.0


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _shape_mask(kind: str, size: int, n: int, x0: int, y0: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    u = xx - x0
    v = yy - y0
    if kind == "disk":
        r = size / 2
        return (u - r) ** 2 + (v - r) ** 2 <= r * r
    if kind == "square":
        return (u >= 0) & (u <= size) & (v >= 0) & (v <= size)
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        inside_v = (v >= 0) & (v <= size)
        half_width = 0.5 * v
        return inside_v & (np.abs(u - size / 2) <= half_width)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    n = cfg.image_size
    base = rng.uniform(cfg.background_low, cfg.background_high)
    yy, xx = np.mgrid[0:n, 0:n] / n
    tex = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    tex *= cfg.texture_amplitude / 3
    tint = rng.uniform(-0.02, 0.02, size=3)
    return np.clip(base + tex[None] + tint[:, None, None], 0, 1)


def class_color(rng: np.random.Generator, cfg: SceneConfig, category: int) -> np.ndarray:
    hue = (cfg.class_hues[category] + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)) % 360
    sat = rng.uniform(0.55, 0.9)
    val = rng.uniform(0.55, 0.95)
    return quantize(np.array(colorsys.hsv_to_rgb(hue / 360, sat, val)))


def generate_scene(seed, config: SceneConfig = SceneConfig(), sample_id: str | None = None) -> Sample:
    """Render one labelled scene; identical seeds give identical samples."""
    rng = np.random.default_rng(seed)
    cfg = config
    n = cfg.image_size
    image = _background(rng, cfg)
    wanted = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[np.ndarray] = []
    annotations = []
    for _ in range(wanted):
        category = int(rng.integers(cfg.num_classes))
        kind = SHAPES[category % len(SHAPES)]
        color = class_color(rng, cfg, category)
        for _attempt in range(cfg.placement_retries):
            size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            x0 = int(rng.integers(0, n - size))
            y0 = int(rng.integers(0, n - size))
            mask = _shape_mask(kind, size, n, x0, y0)
            ys, xs = np.nonzero(mask)
            box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=float)
            g = cfg.gap
            if all(
                box[0] - g >= o[2] or o[0] >= box[2] + g or box[1] - g >= o[3] or o[1] >= box[3] + g
                for o in placed
            ):
                break
        else:
            log.info("scene %s: placement gave up after %d retries", seed, cfg.placement_retries)
            continue
        image[:, mask] = color[:, None]
        placed.append(box)
        annotations.append((BBox(*map(float, box)), category))
    sid = sample_id if sample_id is not None else f"scene{seed}"
    return Sample(quantize(image), annotations, sid)


def hue_rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate colours about the grey axis of the RGB cube; greys are fixed."""
    if degrees == 0:
        return image.copy()
    t = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.cos(t) * np.eye(3) + np.sin(t) * kx + (1 - np.cos(t)) * np.outer(k, k)
    out = np.einsum("ij,jhw->ihw", rot, image)
    return np.clip(out, 0.0, 1.0)


def apply_shift(sample: Sample, shift: ShiftConfig, seed=0) -> Sample:
    """Fog/hue/noise appearance shift; annotations are copied unchanged."""
    rng = np.random.default_rng(seed)
    fog = np.asarray(shift.fog_color, dtype=np.float64)[:, None, None]
    out = (1 - shift.fog_intensity) * hue_rotate(sample.image, shift.hue_rotation) + shift.fog_intensity * fog
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    return Sample(out, list(sample.annotations), sample.id)


def make_domains(
    seed: int,
    scene: SceneConfig = SceneConfig(),
    shift: ShiftConfig = ShiftConfig(),
    n_source: int = 200,
    n_target: int = 200,
    n_test: int = 100,
) -> dict[str, list[Sample]]:
    """Source train, target train and target test splits with disjoint scene seeds."""
    def seeds(split: int, count: int):
        return [np.random.SeedSequence([seed, split, i]) for i in range(count)]

    source = [generate_scene(s, scene, f"src{i:05d}") for i, s in enumerate(seeds(0, n_source))]
    target, test = [], []
    for split, count, name, dest in ((1, n_target, "tgt", target), (2, n_test, "test", test)):
        for i, s in enumerate(seeds(split, count)):
            clean = generate_scene(s, scene, f"{name}{i:05d}")
            shifted = apply_shift(clean, shift, np.random.SeedSequence([seed, split + 10, i]))
            shifted.image = quantize(shifted.image)
            dest.append(shifted)
    return {"source_train": source, "target_train": target, "target_test": test}


# ----------------------------------------------------------------------- disk IO

def write_ppm(path, image: np.ndarray):
    """Binary P6, 8-bit; ``image`` is [3, H, W] in [0, 1]."""
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} image, found {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit images are supported")
    data = raw[pos + 1:]
    if len(data) < w * h * channels:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(data[: w * h * channels], dtype=np.uint8).reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, gray: np.ndarray):
    """Binary P5 from an [H, W] uint8 array."""
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.asarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)[:, :, 0]


def write_dataset(samples, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(directory / f"{s.id}.ppm", s.image)
        lines = [
            f"{k} {int(round(b.x_min))} {int(round(b.y_min))} {int(round(b.x_max))} {int(round(b.y_max))}"
            for b, k in s.annotations
        ]
        (directory / f"{s.id}.txt").write_text("".join(line + "\n" for line in lines))
    (directory / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))


def _parse_annotations(path: Path) -> list:
    annotations = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError
            k, x1, y1, x2, y2 = (int(p) for p in parts)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed annotation {line!r}") from None
        if x1 >= x2 or y1 >= y2 or k < 0:
            raise DatasetError(f"{path}:{lineno}: invalid box or category {line!r}")
        annotations.append((BBox(float(x1), float(y1), float(x2), float(y2)), k))
    return annotations


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"{directory}: missing manifest.txt")
    samples = []
    for sid in manifest.read_text().split():
        image_path = directory / f"{sid}.ppm"
        if not image_path.exists():
            raise DatasetError(f"{directory}: missing image {image_path.name}")
        ann_path = directory / f"{sid}.txt"
        annotations = _parse_annotations(ann_path) if ann_path.exists() else []
        samples.append(Sample(read_ppm(image_path), annotations, sid))
    return samples


def pixel_statistics(samples) -> np.ndarray:
    """Per-channel mean and standard deviation per image, shape (N, 6)."""
    return np.asarray([np.concatenate([s.image.mean(axis=(1, 2)), s.image.std(axis=(1, 2))]) for s in samples])
