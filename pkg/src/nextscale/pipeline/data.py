"""Procedural captioned shapes dataset and binary PPM image I/O."""
from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics import seeded_rng

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SHAPES = ("square", "circle")
BACKGROUNDS = {"black": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}
COLOR_NAMES = tuple(COLORS)
BACKGROUND_NAMES = tuple(BACKGROUNDS)
IMAGE_SIZE = 32
COMBOS = tuple(itertools.product(range(len(COLORS)), range(len(SHAPES)), range(len(BACKGROUNDS))))

_CAPTION_RE = re.compile(r"^a (\w+) (\w+) on a (\w+) background$")


@dataclass
class ShapeSample:
    image: np.ndarray  # (32, 32, 3) float32 in [0, 1]
    caption: str
    color: int
    shape: int
    background: int


def make_caption(color: int, shape: int, background: int) -> str:
    return f"a {COLOR_NAMES[color]} {SHAPES[shape]} on a {BACKGROUND_NAMES[background]} background"


def parse_caption(caption: str) -> tuple[int, int, int]:
    m = _CAPTION_RE.match(caption)
    if not m:
        raise ValueError(f"not a shapes caption: {caption!r}")
    color, shape, bg = m.groups()
    return COLOR_NAMES.index(color), SHAPES.index(shape), BACKGROUND_NAMES.index(bg)


def render(color: int, shape: int, background: int, area: float, center: tuple[float, float],
           size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize one shape covering ``area`` (fraction of the canvas)."""
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = BACKGROUNDS[BACKGROUND_NAMES[background]]
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = center
    if SHAPES[shape] == "square":
        half = math.sqrt(area * size * size) / 2
        inside = (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
    else:
        r = math.sqrt(area * size * size / math.pi)
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    img[inside] = COLORS[COLOR_NAMES[color]]
    return img


def generate_samples(n: int, seed: int) -> list[ShapeSample]:
    """Sample i gets the (color, shape, background) combination i mod 16, so
    classes are exactly balanced whenever n is a multiple of 16."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seeded_rng(seed)
    out = []
    for i in range(n):
        color, shape, bg = COMBOS[i % len(COMBOS)]
        area = float(rng.uniform((), 0.25, 0.5))
        cy, cx = (IMAGE_SIZE / 2 + rng.uniform((2,), -2.0, 2.0)).tolist()
        img = render(color, shape, bg, area, (cy, cx))
        out.append(ShapeSample(img, make_caption(color, shape, bg), color, shape, bg))
    return out


def generate_dataset(n: int, seed: int, out_dir) -> list[ShapeSample]:
    """Write images as PPM plus a JSON-lines manifest {id, caption, image_path}."""
    out_dir = Path(out_dir)
    samples = generate_samples(n, seed)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.ppm"
        write_ppm(out_dir / rel, s.image)
        lines.append(json.dumps({"id": i, "caption": s.caption, "image_path": rel}))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return samples


def load_dataset(data_dir) -> tuple[np.ndarray, list[str]]:
    """Images as (N, 3, 32, 32) float32 plus captions, in manifest order."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    images, captions = [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        images.append(read_ppm(data_dir / rec["image_path"]))
        captions.append(rec["caption"])
    arr = np.stack(images).transpose(0, 3, 1, 2).astype(np.float32)
    return np.ascontiguousarray(arr), captions


# -- PPM ------------------------------------------------------------------

def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255; ``image`` is (H, W, 3) in [0, 1]."""
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_bytes(image).tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PPM_HEADER.match(raw)
    if not m or m.group(3) != b"255":
        raise ValueError(f"{path}: not a P6 maxval-255 PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pix = np.frombuffer(raw, dtype=np.uint8, offset=m.end())
    if pix.size < w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return pix[: w * h * 3].reshape(h, w, 3).astype(np.float32) / 255.0


def write_png(path, image: np.ndarray) -> bool:
    """PNG via Pillow when it is installed; returns False otherwise."""
    try:
        from PIL import Image
    except ImportError:
        return False
    Image.fromarray(to_bytes(image)).save(path)
    return True
