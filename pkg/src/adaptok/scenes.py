"""Synthetic desk-scale scenes: axis-aligned rectangles and ellipses of
flat-colored classes over a background, with per-pixel labels. Boundary
density is controlled by region count and size; everything is derived
deterministically from (seed, index)."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .params import rng_for
from . import pnm


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 6  # class 0 is the background
    max_regions: int = 4
    min_region: int = 10
    uniform_fraction: float = 0.125  # scenes forced to a single class
    noise: float = 0.002

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64
    seed: int


def class_color(cls: int) -> np.ndarray:
    # fixed low-discrepancy palette; distinct enough for flat regions
    return np.array(
        [
            (0.12 + 0.618033 * cls) % 1.0,
            (0.45 + 0.381966 * cls) % 1.0,
            (0.78 + 0.218033 * cls) % 1.0,
        ]
    )


def generate_scene(seed: int, spec: SceneSpec) -> SyntheticScene:
    rng = rng_for(seed, "scene")
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    uniform = rng.random() < spec.uniform_fraction
    n_regions = 0 if uniform else int(rng.integers(0, spec.max_regions + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_regions):
        cls = int(rng.integers(1, spec.n_classes))
        kind = rng.random() < 0.5
        ry = int(rng.integers(spec.min_region, max(h // 2, spec.min_region + 1)))
        rx = int(rng.integers(spec.min_region, max(w // 2, spec.min_region + 1)))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        if kind:
            mask = (np.abs(yy - cy) <= ry // 2) & (np.abs(xx - cx) <= rx // 2)
        else:
            mask = ((yy - cy) / (ry / 2)) ** 2 + ((xx - cx) / (rx / 2)) ** 2 <= 1.0
        labels[mask] = cls
    image = np.empty((h, w, 3))
    for cls in np.unique(labels):
        image[labels == cls] = class_color(int(cls))
    image = image + spec.noise * rng.standard_normal((h, w, 3))
    return SyntheticScene(image=np.clip(image, 0.0, 1.0), labels=labels, seed=seed)


def scene_seed(corpus_seed: int, index: int) -> int:
    return int(rng_for(corpus_seed, "corpus", index).integers(0, 2**63 - 1))


def generate_corpus(corpus_seed: int, count: int, spec: SceneSpec) -> list[SyntheticScene]:
    return [generate_scene(scene_seed(corpus_seed, i), spec) for i in range(count)]


def corpus_descriptor(corpus_seed: int, count: int, spec: SceneSpec) -> dict:
    return {
        "kind": "synthetic",
        "seed": corpus_seed,
        "count": count,
        "scene_spec": spec.to_json_dict(),
    }


def corpus_from_descriptor(desc: dict) -> list[SyntheticScene]:
    if desc.get("kind") != "synthetic":
        raise ValueError(f"unsupported corpus descriptor kind {desc.get('kind')!r}")
    spec = SceneSpec.from_json_dict(desc["scene_spec"])
    return generate_corpus(desc["seed"], desc["count"], spec)


def save_corpus(out_dir, scenes: list[SyntheticScene], desc: dict | None = None):
    """Materialize image/label pairs (PPM + 16-bit PGM) plus the descriptor."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    for i, sc in enumerate(scenes):
        pnm.write_ppm8(os.path.join(out_dir, f"scene_{i:05d}.ppm"), sc.image)
        pnm.write_pgm16(os.path.join(out_dir, f"scene_{i:05d}.pgm"), sc.labels.astype(np.uint16))
    if desc is not None:
        with open(os.path.join(out_dir, "corpus.json"), "w") as f:
            json.dump(desc, f, indent=2, sort_keys=True)
            f.write("\n")


def pad_to_grid(image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad bottom/right to the next multiple of the coarse patch side;
    padded label pixels become IGNORE so they never contribute boundaries."""
    from . import boundary, geometry

    h, w = labels.shape
    hp, wp = geometry.padded_extent(h, w)
    if (hp, wp) == (h, w):
        return image, labels
    img = np.zeros((hp, wp, image.shape[2]), dtype=image.dtype)
    img[:h, :w] = image
    return img, boundary.pad_labels(labels, hp, wp)


def load_corpus_dir(path) -> list[SyntheticScene]:
    """Read back image/label pairs written by save_corpus (or any PPM/PGM
    pairs following the same naming). Ragged sizes are padded to the token
    grid."""
    import os

    scenes = []
    names = sorted(n for n in os.listdir(path) if n.endswith(".ppm"))
    for n in names:
        img = pnm.read_ppm8(os.path.join(path, n)).astype(np.float64) / 255.0
        lab = pnm.read_pgm16(os.path.join(path, n[:-4] + ".pgm")).astype(np.int64)
        img, lab = pad_to_grid(img, lab)
        scenes.append(SyntheticScene(image=img, labels=lab, seed=-1))
    return scenes
