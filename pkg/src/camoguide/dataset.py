"""Synthetic camouflage dataset: shape categories hidden in matched textures.

Each category is one parametric shape family. Query images place the shape
on a procedural texture with a small intensity offset (the contrast knob,
drawn from the configured range) plus an amorphous distractor blob, so that
finding the right region genuinely requires shape knowledge. Reference
images show the same family at high contrast on a plain background. Masks
are exact binary rasterizations.

Generation is a pure function of (config, seed): the SHA-256 of the
directory tree is stable across runs. The last ``unseen_categories``
category ids never occur among training queries, giving an unseen-category
evaluation subset.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "diamond", "ring",
                  "star", "cross", "crescent", "hexagon", "bowtie")

REFERENCE_BG = 0.9
REFERENCE_FG = 0.1


class DatasetError(ValueError):
    pass


@dataclass
class GenConfig:
    categories: int = 8
    train_queries: int = 400
    test_queries: int = 100
    refs_per_cat: int = 10
    size: int = 64
    contrast_lo: float = 0.05
    contrast_hi: float = 0.2
    unseen_categories: int = 2
    distractors: bool = True


@dataclass
class SampleRecord:
    id: str
    split: str
    category: int
    role: str
    image_path: str
    mask_path: str


# -- shape rasterization -----------------------------------------------------


def _rotated_coords(size: int, cy: float, cx: float, angle: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx - cx
    v = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    return u * ca + v * sa, -u * sa + v * ca


def rasterize_shape(family: str, size: int, cy: float, cx: float, scale: float,
                    aspect: float, angle: float) -> np.ndarray:
    """Exact binary mask of one shape instance on a size x size grid."""
    u, v = _rotated_coords(size, cy, cx, angle)
    a = scale
    b = scale * aspect
    if family == "ellipse":
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif family == "rectangle":
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    elif family == "triangle":
        inside = (v >= -b) & (v <= b) & (np.abs(u) <= a * (b - v) / (2.0 * b))
    elif family == "diamond":
        inside = np.abs(u) / a + np.abs(v) / b <= 1.0
    elif family == "ring":
        rho = np.sqrt(u ** 2 + (v / aspect) ** 2)
        inside = (rho <= a) & (rho >= 0.55 * a)
    elif family == "star":
        rho = np.sqrt(u ** 2 + v ** 2)
        phi = np.arctan2(v, u)
        inside = rho <= a * (0.35 + 0.65 * (0.5 + 0.5 * np.cos(5.0 * phi)))
    elif family == "cross":
        w = 0.35 * a
        inside = ((np.abs(u) <= a) & (np.abs(v) <= w)) | ((np.abs(v) <= a) & (np.abs(u) <= w))
    elif family == "crescent":
        inside = (np.sqrt(u ** 2 + v ** 2) <= a) & \
                 (np.sqrt((u - 0.5 * a) ** 2 + v ** 2) > 0.8 * a)
    elif family == "hexagon":
        h = a * np.cos(np.pi / 6.0)
        inside = np.ones((size, size), dtype=bool)
        for k in range(3):
            th = k * np.pi / 3.0
            inside &= np.abs(u * np.cos(th) + v * np.sin(th)) <= h
    elif family == "bowtie":
        inside = (np.abs(u) <= a) & (np.abs(v) <= b * np.abs(u) / a)
    else:
        raise DatasetError(f"unknown shape family {family!r}")
    return inside


def _sample_mask(family: str, size: int, rng: np.random.Generator,
                 frac_lo: float = 0.05, frac_hi: float = 0.5) -> np.ndarray:
    """Draw a shape whose foreground fraction lands inside [frac_lo, frac_hi]."""
    target = rng.uniform(0.08, 0.28)
    scale = size * 0.30
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(0.3, 0.7) * size
    aspect = rng.uniform(0.6, 1.0)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    mask = rasterize_shape(family, size, cy, cx, scale, aspect, angle)
    for _ in range(12):
        frac = mask.mean()
        if frac_lo <= frac <= frac_hi:
            return mask
        grow = np.sqrt(target / max(frac, 1e-4))
        scale = float(np.clip(scale * grow, 2.0, size * 0.48))
        mask = rasterize_shape(family, size, cy, cx, scale, aspect, angle)
    raise DatasetError(f"could not fit {family} mask into fraction range")


# -- texture synthesis ----------------------------------------------------------


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxW or CxHxW array (align_corners=false)."""
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    _, h, w = arr.shape

    def grid(n_in, n_out):
        x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        x0 = np.clip(np.floor(x).astype(int), 0, n_in - 1)
        x1 = np.clip(x0 + 1, 0, n_in - 1)
        t = np.clip(x - np.floor(x), 0.0, 1.0)
        return x0, x1, t

    y0, y1, ty = grid(h, out_h)
    x0, x1, tx = grid(w, out_w)
    top = arr[:, y0][:, :, x0] * (1 - tx) + arr[:, y0][:, :, x1] * tx
    bot = arr[:, y1][:, :, x0] * (1 - tx) + arr[:, y1][:, :, x1] * tx
    out = top * (1 - ty)[None, :, None] + bot * ty[None, :, None]
    return out[0] if squeeze else out


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural luminance texture: value noise plus an oriented grating.

    Grids stay fine relative to object size so regional luminance bias
    cannot masquerade as foreground contrast.
    """
    grid = int(rng.choice([8, 16]))
    noise = rng.standard_normal((grid, grid))
    base = rng.uniform(0.4, 0.6)
    amp_n = rng.uniform(0.05, 0.12)
    amp_g = rng.uniform(0.03, 0.08)
    freq = rng.uniform(2.0, 6.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = resize_bilinear(noise, size, size)
    grating = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size
                     + phase)
    return base + amp_n * field + amp_g * grating


def _distractor_mask(size: int, rng: np.random.Generator,
                     avoid: np.ndarray) -> np.ndarray | None:
    """Amorphous blob (union of three discs) that avoids the target mask."""
    for _ in range(8):
        cy = rng.uniform(0.15, 0.85) * size
        cx = rng.uniform(0.15, 0.85) * size
        blob = np.zeros((size, size), dtype=bool)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        for _ in range(3):
            oy = cy + rng.uniform(-0.08, 0.08) * size
            ox = cx + rng.uniform(-0.08, 0.08) * size
            rad = rng.uniform(0.05, 0.10) * size
            blob |= (yy - oy) ** 2 + (xx - ox) ** 2 <= rad ** 2
        if not (blob & avoid).any():
            return blob
    return None


def _to_rgb(lum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    tint = rng.uniform(-0.04, 0.04, size=3)
    img = np.clip(lum[None] + tint[:, None, None], 0.02, 0.98)
    return img.astype(np.float32)


def _render_query(cat: int, cfg: GenConfig, rng: np.random.Generator):
    mask = _sample_mask(SHAPE_FAMILIES[cat], cfg.size, rng)
    lum = _texture(cfg.size, rng)
    delta = rng.uniform(cfg.contrast_lo, cfg.contrast_hi)
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    lum = lum + sign * delta * mask
    if cfg.distractors:
        blob = _distractor_mask(cfg.size, rng, mask)
        if blob is not None:
            d_delta = rng.uniform(cfg.contrast_lo, cfg.contrast_hi)
            d_sign = 1.0 if rng.uniform() < 0.5 else -1.0
            lum = lum + d_sign * d_delta * blob
    return _to_rgb(lum, rng), mask


def _render_reference(cat: int, cfg: GenConfig, rng: np.random.Generator):
    mask = _sample_mask(SHAPE_FAMILIES[cat], cfg.size, rng)
    noise = 0.03 * resize_bilinear(rng.standard_normal((8, 8)), cfg.size, cfg.size)
    lum = REFERENCE_BG + noise
    lum = np.where(mask, REFERENCE_FG + noise, lum)
    return _to_rgb(lum, rng), mask


# -- generation / loading -----------------------------------------------------------


def generate_dataset(out_dir: str, cfg: GenConfig, seed: int) -> list[SampleRecord]:
    if cfg.categories < 2:
        raise DatasetError("need at least 2 categories")
    if cfg.categories > len(SHAPE_FAMILIES):
        raise DatasetError(f"{cfg.categories} categories requested but only "
                           f"{len(SHAPE_FAMILIES)} shape families exist")
    if not 0 <= cfg.unseen_categories <= cfg.categories - 1:
        raise DatasetError("unseen_categories must leave at least one seen category")
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    seen = cfg.categories - cfg.unseen_categories
    records: list[SampleRecord] = []

    def emit(sid: str, split: str, cat: int, role: str, img, mask):
        ip = os.path.join("images", sid + ".ppm")
        mp = os.path.join("masks", sid + ".pgm")
        write_ppm(os.path.join(out_dir, ip), img)
        write_pgm(os.path.join(out_dir, mp), mask.astype(np.float32))
        records.append(SampleRecord(sid, split, cat, role, ip, mp))

    for i in range(cfg.train_queries):
        cat = i % seen
        img, mask = _render_query(cat, cfg, rng)
        emit(f"q_train_{i:04d}", "train", cat, "query", img, mask)
    for i in range(cfg.test_queries):
        cat = i % cfg.categories
        img, mask = _render_query(cat, cfg, rng)
        emit(f"q_test_{i:04d}", "test", cat, "query", img, mask)
    for cat in range(cfg.categories):
        for j in range(cfg.refs_per_cat):
            img, mask = _render_reference(cat, cfg, rng)
            emit(f"ref_{cat}_{j:03d}", "train", cat, "reference", img, mask)

    with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("id\tsplit\tcategory\trole\timage\tmask\n")
        for r in records:
            fh.write(f"{r.id}\t{r.split}\t{r.category}\t{r.role}\t{r.image_path}\t{r.mask_path}\n")
    return records


def load_dataset(root: str) -> list[SampleRecord]:
    """Read and validate the manifest; paths stay relative to ``root``."""
    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DatasetError(f"missing manifest: {manifest}")
    records = []
    with open(manifest, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "id\tsplit\tcategory\trole\timage\tmask":
            raise DatasetError(f"unexpected manifest header: {header!r}")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise DatasetError(f"malformed manifest row: {line!r}")
            sid, split, cat, role, ip, mp = parts
            if split not in ("train", "test"):
                raise DatasetError(f"record {sid}: unknown split {split!r}")
            if role not in ("query", "reference"):
                raise DatasetError(f"record {sid}: unknown role {role!r}")
            records.append(SampleRecord(sid, split, int(cat), role, ip, mp))
    for r in records:
        for p in (r.image_path, r.mask_path):
            if not os.path.exists(os.path.join(root, p)):
                raise DatasetError(f"record {r.id}: missing file {p}")
        with open(os.path.join(root, r.mask_path), "rb") as fh:
            raw = fh.read()
        payload = np.frombuffer(raw[raw.index(b"255\n") + 4:], dtype=np.uint8)
        nonbinary = float(((payload > 32) & (payload < 224)).mean())
        if nonbinary > 0.01:
            raise DatasetError(f"record {r.id}: mask is not binary "
                               f"({nonbinary:.1%} ambiguous pixels)")
    train_cats = {r.category for r in records if r.split == "train" and r.role == "query"}
    ref_cats = {r.category for r in records if r.role == "reference"}
    missing = train_cats - ref_cats
    if missing:
        raise DatasetError(f"no references for training categories {sorted(missing)}")
    return records


def load_sample(root: str, rec: SampleRecord):
    """Returns (image 3xSxS float32, mask 1xSxS float32 in {0,1})."""
    img = read_ppm(os.path.join(root, rec.image_path))
    mask = (read_pgm(os.path.join(root, rec.mask_path)) >= 0.5).astype(np.float32)
    return img, mask[None]


def dataset_sha256(root: str) -> str:
    """Order-independent digest of the directory tree (paths + contents)."""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            digest.update(rel.encode("utf-8"))
            with open(full, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
