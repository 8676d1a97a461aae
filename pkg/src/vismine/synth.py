"""Planted-motif dataset generation and image/manifest I/O.

Images are (3, h, w) float tensors in [0, 1], written as binary PPM (P6).
Each positive image carries its class motifs at random interior positions on
a seeded textured-noise background, with the exact planted boxes recorded in
a line-oriented manifest.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .localize import BBox


class ImageFormatError(ValueError):
    """Malformed or unsupported PPM/PGM data."""


class TruncatedImageError(ImageFormatError):
    pass


class ManifestError(ValueError):
    """Malformed dataset manifest."""


MOTIF_KINDS = ("cross", "ring", "checker", "corner_l", "stripes")


@dataclass(frozen=True)
class MotifSpec:
    kind: str
    size: int = 16
    contrast: float = 1.0
    color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in MOTIF_KINDS:
            raise ValueError(f"unknown motif kind {self.kind!r}, expected one of {MOTIF_KINDS}")


@dataclass
class ImageRecord:
    path: str
    label: str
    boxes: list  # list[BBox]


@dataclass
class DatasetManifest:
    images: list  # list[ImageRecord]
    classes: dict  # label -> list[MotifSpec]
    seed: int
    height: int
    width: int
    noise: float

    def by_label(self, label):
        return [rec for rec in self.images if rec.label == label]


def _paint(canvas, y0, x0, mask, color, contrast):
    """Blend a motif mask into the canvas box at (y0, x0).

    mask holds values in [-1, 1]: +1 paints the motif color at full contrast,
    -1 paints black, 0 leaves the background.
    """
    s = mask.shape[0]
    pos = np.clip(mask, 0, 1)
    neg = np.clip(-mask, 0, 1)
    cover = np.clip(pos + neg, 0, 1)
    for c in range(3):
        tile = canvas[c, y0:y0 + s, x0:x0 + s]
        tile[:] = tile * (1 - cover * contrast) + pos * color[c] * contrast
        np.clip(tile, 0.0, 1.0, out=tile)


def motif_mask(spec: MotifSpec) -> np.ndarray:
    """Render the motif as a mask in [-1, 1] of shape (size, size)."""
    s = spec.size
    m = np.zeros((s, s), dtype=np.float64)
    if spec.kind == "cross":
        wbar = max(3, s // 5)
        lo = (s - wbar) // 2
        m[lo:lo + wbar, :] = 1.0
        m[:, lo:lo + wbar] = 1.0
    elif spec.kind == "ring":
        r_out = s / 2.0 - 0.5
        r_in = r_out - max(2.5, s / 6.0)
        yy, xx = np.mgrid[0:s, 0:s]
        d = np.hypot(yy - (s - 1) / 2.0, xx - (s - 1) / 2.0)
        m[(d <= r_out) & (d >= r_in)] = 1.0
    elif spec.kind == "checker":
        tile = max(3, s // 4)
        yy, xx = np.mgrid[0:s, 0:s]
        parity = (yy // tile + xx // tile) % 2
        m[parity == 0] = 1.0
        m[parity == 1] = -1.0
    elif spec.kind == "corner_l":
        wbar = max(3, s // 5)
        m[:wbar, :] = 1.0
        m[:, :wbar] = 1.0
    elif spec.kind == "stripes":
        period = max(4, s // 4)
        yy = np.mgrid[0:s, 0:s][0]
        m[(yy % period) < period // 2] = 1.0
    return m


def textured_background(height, width, noise, rng) -> np.ndarray:
    """Mid-gray canvas with seeded smoothed uniform noise of the given
    amplitude; noise 0 yields an exactly constant background."""
    canvas = np.full((3, height, width), 0.5, dtype=np.float64)
    if noise > 0:
        rough = rng.uniform(-1.0, 1.0, size=(height, width))
        smooth = uniform_filter(rough, size=5, mode="wrap")
        smooth /= max(np.abs(smooth).max(), 1e-12)
        canvas += noise * smooth[None, :, :]
        tint = rng.uniform(-1.0, 1.0, size=(3, height, width))
        canvas += 0.25 * noise * uniform_filter(tint, size=5, mode="wrap")
    return np.clip(canvas, 0.0, 1.0)


def render_image(motifs, positions, height, width, noise, rng) -> np.ndarray:
    canvas = textured_background(height, width, noise, rng)
    for spec, (y0, x0) in zip(motifs, positions):
        _paint(canvas, y0, x0, motif_mask(spec), spec.color, spec.contrast)
    return canvas.astype(np.float32)


def _place_motifs(motifs, height, width, margin, rng):
    """Uniform interior positions, rejection-sampled to avoid overlap."""
    boxes = []
    positions = []
    for spec in motifs:
        s = spec.size
        if height - 2 * margin - s < 0 or width - 2 * margin - s < 0:
            raise ValueError(
                f"motif of size {s} with margin {margin} does not fit in {height}x{width}"
            )
        for _ in range(200):
            y0 = int(rng.integers(margin, height - margin - s + 1))
            x0 = int(rng.integers(margin, width - margin - s + 1))
            box = BBox(x_min=x0, y_min=y0, x_max=x0 + s, y_max=y0 + s)
            if all(
                box.x_max <= b.x_min or b.x_max <= box.x_min
                or box.y_max <= b.y_min or b.y_max <= box.y_min
                for b in boxes
            ):
                break
        else:
            raise ValueError("could not place motifs without overlap")
        boxes.append(box)
        positions.append((y0, x0))
    return positions, boxes


def generate(class_motifs, counts, out_dir, image_size=(64, 64), noise=0.15,
             seed=0, margin=10) -> DatasetManifest:
    """Generate a labeled image set.

    class_motifs maps label -> list of MotifSpec (an empty list makes a
    background-only class); counts maps label -> image count.  Per-image
    randomness derives from (seed, image index), so generation is
    bit-reproducible and order-independent.
    """
    if not class_motifs:
        raise ValueError("need at least one class")
    height, width = image_size
    os.makedirs(out_dir, exist_ok=True)
    records = []
    index = 0
    for label in class_motifs:
        n = counts[label]
        if n < 1:
            raise ValueError(f"class {label!r} needs at least one image")
        motifs = class_motifs[label]
        for _ in range(n):
            rng = np.random.default_rng([seed, index])
            positions, boxes = _place_motifs(motifs, height, width, margin, rng)
            image = render_image(motifs, positions, height, width, noise, rng)
            name = f"img_{index:05d}.ppm"
            write_image(os.path.join(out_dir, name), image)
            records.append(ImageRecord(path=name, label=label, boxes=boxes))
            index += 1
    manifest = DatasetManifest(
        images=records, classes=dict(class_motifs), seed=seed,
        height=height, width=width, noise=noise,
    )
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    return manifest


# --- PPM / PGM ---------------------------------------------------------------

def write_image(path, tensor):
    """Write a (3,h,w) tensor as binary PPM or a (h,w) map as binary PGM,
    8-bit, maxval 255."""
    tensor = np.asarray(tensor)
    data = np.clip(np.rint(tensor * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        if tensor.ndim == 3:
            c, h, w = tensor.shape
            if c != 3:
                raise ImageFormatError(f"PPM needs 3 channels, got {c}")
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.moveaxis(data, 0, 2).tobytes())
        elif tensor.ndim == 2:
            h, w = tensor.shape
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        else:
            raise ImageFormatError(f"cannot write tensor of shape {tensor.shape}")


def _read_token(fh):
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise TruncatedImageError("file ends inside header")
        if ch.isspace():
            if tok:
                return tok
            continue
        if ch == b"#":  # comment to end of line
            while ch and ch != b"\n":
                ch = fh.read(1)
            continue
        tok += ch


def read_image(path) -> np.ndarray:
    """Read binary PPM (P6) into (3,h,w) or PGM (P5) into (h,w), mapping
    8-bit samples to reals k/255."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ImageFormatError(f"unsupported magic {magic!r}")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            maxval = int(_read_token(fh))
        except ValueError as exc:
            raise ImageFormatError(f"malformed header in {path}") from exc
        if maxval != 255:
            raise ImageFormatError(f"unsupported maxval {maxval}, only 255")
        channels = 3 if magic == b"P6" else 1
        n = w * h * channels
        raw = fh.read(n)
        if len(raw) != n:
            raise TruncatedImageError(f"expected {n} pixel bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 3:
        return np.moveaxis(data.reshape(h, w, 3), 2, 0)
    return data.reshape(h, w)


# --- manifest ----------------------------------------------------------------
#
# Line grammar (version 1):
#   VPMANIFEST 1
#   seed <int>
#   size <height> <width>
#   noise <float>
#   class <label> <n> (<kind>:<size>:<contrast>:<r>:<g>:<b>)*
#   image <path> <label> <n> (<x_min> <y_min> <x_max> <y_max>)*

def write_manifest(path, manifest: DatasetManifest):
    lines = ["VPMANIFEST 1",
             f"seed {manifest.seed}",
             f"size {manifest.height} {manifest.width}",
             f"noise {manifest.noise!r}"]
    for label in manifest.classes:
        parts = [
            f"{m.kind}:{m.size}:{m.contrast!r}:{m.color[0]!r}:{m.color[1]!r}:{m.color[2]!r}"
            for m in manifest.classes[label]
        ]
        lines.append(f"class {label} {len(parts)}" + ("" if not parts else " " + " ".join(parts)))
    for rec in manifest.images:
        coords = " ".join(f"{b.x_min} {b.y_min} {b.x_max} {b.y_max}" for b in rec.boxes)
        lines.append(f"image {rec.path} {rec.label} {len(rec.boxes)}" + ("" if not coords else " " + coords))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != "VPMANIFEST 1":
        raise ManifestError(f"bad manifest header in {path}")
    seed, height, width, noise = None, None, None, None
    classes = {}
    images = []
    for ln in lines[1:]:
        parts = ln.split()
        try:
            if parts[0] == "seed":
                seed = int(parts[1])
            elif parts[0] == "size":
                height, width = int(parts[1]), int(parts[2])
            elif parts[0] == "noise":
                noise = float(parts[1])
            elif parts[0] == "class":
                label, n = parts[1], int(parts[2])
                motifs = []
                for tok in parts[3:3 + n]:
                    kind, size, contrast, r, g, b = tok.split(":")
                    motifs.append(MotifSpec(kind=kind, size=int(size), contrast=float(contrast),
                                            color=(float(r), float(g), float(b))))
                classes[label] = motifs
            elif parts[0] == "image":
                rel, label, n = parts[1], parts[2], int(parts[3])
                coords = [int(v) for v in parts[4:4 + 4 * n]]
                if len(coords) != 4 * n:
                    raise ManifestError(f"image line has {len(coords)} coords, expected {4 * n}")
                boxes = [BBox(*coords[i:i + 4]) for i in range(0, len(coords), 4)]
                images.append(ImageRecord(path=rel, label=label, boxes=boxes))
            else:
                raise ManifestError(f"unknown manifest line {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ManifestError(f"malformed manifest line: {ln!r}") from exc
    if seed is None or height is None or noise is None:
        raise ManifestError("manifest missing seed/size/noise header lines")
    for label in {rec.label for rec in images}:
        if label not in classes:
            raise ManifestError(f"image label {label!r} has no class line")
    return DatasetManifest(images=images, classes=classes, seed=seed,
                           height=height, width=width, noise=noise)


def load_images(manifest: DatasetManifest, base_dir):
    """Read every image in manifest order."""
    return [read_image(os.path.join(base_dir, rec.path)) for rec in manifest.images]
