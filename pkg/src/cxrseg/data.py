"""Dataset files: images, masks, manifests, synthesis, and weights.

Grayscale images and masks travel as 8-bit binary portable graymaps
("P5", maxval 255), readable bit-exactly everywhere; PNG is accepted on
read. A manifest is a tab-separated text file, one record per line, with
a header row naming the fields

    id  image  lung_mask  infection_mask  class  split  fold

Images resize bilinearly (half-pixel-center sampling); masks resize
nearest-neighbor so they stay binary. The synthetic generator produces
deterministic desk-scale datasets with ground-truth lung and infection
masks. Model parameters round-trip bitwise through the "SEGW" container.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, ParseError
from .models import ModelConfig, SegModel, build_model
from .tensor import Tensor

CLASSES = ("covid", "non_covid", "normal")
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("id", "image", "lung_mask", "infection_mask", "class", "split", "fold")

# GrayImage: HxW uint8 array. BinaryMask: HxW uint8 {0,1} array.


# ---------------------------------------------------------------------------
# portable graymap


def _next_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= len(buf):
        raise ParseError("unexpected end of header", offset=pos)
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise ParseError(f"not a P5 graymap (magic {buf[:2]!r})", offset=0)
    pos = 2
    dims = []
    for _ in range(3):
        token, pos = _next_token(buf, pos)
        try:
            dims.append(int(token))
        except ValueError:
            raise ParseError(f"non-numeric header field {token!r}", offset=pos - len(token))
    width, height, maxval = dims
    if width <= 0 or height <= 0:
        raise ParseError(f"invalid dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise ParseError(f"maxval must be 255, got {maxval}", offset=pos)
    pos += 1  # single whitespace byte separates header from payload
    payload = buf[pos : pos + width * height]
    if len(payload) != width * height:
        raise ParseError(
            f"truncated payload: expected {width * height} bytes, got {len(payload)}",
            offset=pos + len(payload),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def read_image(path) -> np.ndarray:
    """Read a grayscale image (P5 graymap, or PNG where Pillow has it)."""
    buf = Path(path).read_bytes()
    if buf[:4] == b"\x89PNG":
        from PIL import Image

        with Image.open(io.BytesIO(buf)) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    return parse_pgm(buf)


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DimensionError(f"images are 2-D, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a mask; any nonzero pixel is foreground."""
    return (read_image(path) > 0).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    write_image(path, (m > 0).astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# resizing


def _bilinear_coords(n_out: int, n_in: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, size: int = 256) -> np.ndarray:
    """Bilinear resize to size x size with half-pixel-center sampling."""
    if size < 8:
        raise ConfigurationError(f"target size must be >= 8, got {size}")
    arr = np.asarray(image, dtype=np.float64)
    h, w = arr.shape
    if (h, w) == (size, size):
        return np.asarray(image, dtype=np.uint8).copy()
    r0, r1, wr = _bilinear_coords(size, h)
    c0, c1, wc = _bilinear_coords(size, w)
    top = arr[r0][:, c0] * (1 - wc) + arr[r0][:, c1] * wc
    bot = arr[r1][:, c0] * (1 - wc) + arr[r1][:, c1] * wc
    out = top * (1 - wr)[:, None] + bot * wr[:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, size: int = 256) -> np.ndarray:
    """Nearest-neighbor resize; output stays strictly binary."""
    if size < 8:
        raise ConfigurationError(f"target size must be >= 8, got {size}")
    m = (np.asarray(mask) > 0).astype(np.uint8)
    h, w = m.shape
    if (h, w) == (size, size):
        return m.copy()
    rows = np.minimum((np.floor((np.arange(size) + 0.5) * (h / size))).astype(int), h - 1)
    cols = np.minimum((np.floor((np.arange(size) + 0.5) * (w / size))).astype(int), w - 1)
    return m[rows][:, cols]


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    image: Optional[Path]
    lung_mask: Optional[Path]
    infection_mask: Optional[Path]
    cls: str
    split: Optional[str] = None
    fold: Optional[int] = None


def load_manifest(path, check_files: bool = True) -> List[DatasetRecord]:
    """Parse and validate a manifest file; diagnostics carry line numbers."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    rows = list(reader)
    header = tuple(rows[0])
    if header != MANIFEST_FIELDS:
        raise ParseError(f"manifest header {header} != expected {MANIFEST_FIELDS}")

    records: List[DatasetRecord] = []
    seen: Dict[str, int] = {}
    base = path.parent
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(MANIFEST_FIELDS):
            raise ParseError(f"line {lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
        rid, image, lung, inf, cls, split, fold = (cell.strip() for cell in row)
        if rid in seen:
            raise ParseError(f"line {lineno}: duplicate id {rid!r} (first seen on line {seen[rid]})")
        seen[rid] = lineno
        if cls not in CLASSES:
            raise ParseError(f"line {lineno}: unknown class {cls!r}; expected one of {CLASSES}")
        if split and split not in SPLITS:
            raise ParseError(f"line {lineno}: unknown split {split!r}; expected one of {SPLITS}")
        try:
            fold_idx = int(fold) if fold else None
        except ValueError:
            raise ParseError(f"line {lineno}: fold must be an integer, got {fold!r}")
        paths = {}
        for field_name, cell in (("image", image), ("lung_mask", lung), ("infection_mask", inf)):
            if not cell:
                paths[field_name] = None
                continue
            p = base / cell
            if check_files and not p.exists():
                raise ParseError(f"line {lineno}: missing file {p}")
            paths[field_name] = p
        records.append(
            DatasetRecord(
                id=rid,
                image=paths["image"],
                lung_mask=paths["lung_mask"],
                infection_mask=paths["infection_mask"],
                cls=cls,
                split=split or None,
                fold=fold_idx,
            )
        )
    return records


def write_manifest(path, records: Sequence[DatasetRecord]) -> None:
    path = Path(path)
    base = path.parent
    lines = ["\t".join(MANIFEST_FIELDS)]
    for r in records:
        rel = lambda p: str(p.relative_to(base)) if p is not None else ""
        lines.append(
            "\t".join(
                [
                    r.id,
                    rel(r.image),
                    rel(r.lung_mask),
                    rel(r.infection_mask),
                    r.cls,
                    r.split or "",
                    "" if r.fold is None else str(r.fold),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_samples(records: Sequence[DatasetRecord], kind: str = "lung"):
    """Load (image in [0,1], mask) training pairs for the given task.

    ``kind`` selects the lung or infection mask; records without the
    requested mask contribute an all-background mask (infection-negative
    classes have genuinely empty infection masks).
    """
    if kind not in ("lung", "infection"):
        raise ConfigurationError(f"kind must be 'lung' or 'infection', got {kind!r}")
    samples = []
    for r in records:
        img = read_image(r.image).astype(np.float64) / 255.0
        mask_path = r.lung_mask if kind == "lung" else r.infection_mask
        mask = read_mask(mask_path) if mask_path else np.zeros(img.shape, dtype=np.uint8)
        if mask.shape != img.shape:
            raise DimensionError(f"record {r.id}: mask shape {mask.shape} != image {img.shape}")
        samples.append((img, mask))
    return samples


# ---------------------------------------------------------------------------
# synthetic dataset


def _ellipse(size: int, cr: float, cc: float, sr: float, sc: float) -> np.ndarray:
    rr, cc_grid = np.mgrid[0:size, 0:size]
    return ((rr - cr) / sr) ** 2 + ((cc_grid - cc) / sc) ** 2 <= 1.0


def _make_sample(rng: np.random.Generator, size: int, cls: str):
    img = rng.uniform(150, 180) + rng.normal(0.0, 5.0, (size, size))
    lung = np.zeros((size, size), dtype=bool)
    for side_c in (0.29, 0.71):
        cr = size * rng.uniform(0.46, 0.54)
        cc = size * (side_c + rng.uniform(-0.02, 0.02))
        sr = size * rng.uniform(0.26, 0.34)
        sc = size * rng.uniform(0.13, 0.175)
        lung |= _ellipse(size, cr, cc, sr, sc)
    img[lung] = rng.uniform(45, 62) + rng.normal(0.0, 5.0, int(lung.sum()))

    infection = np.zeros((size, size), dtype=bool)
    if cls == "non_covid":
        # Interior texture only; no infection ground truth.
        lung_px = np.argwhere(lung)
        for _ in range(rng.integers(1, 4)):
            r, c = lung_px[rng.integers(len(lung_px))]
            patch = _ellipse(size, r, c, size * rng.uniform(0.03, 0.07), size * rng.uniform(0.03, 0.07))
            img[patch & lung] = rng.uniform(95, 115)
    elif cls == "covid":
        lung_px = np.argwhere(lung)
        for _ in range(rng.integers(1, 4)):
            r, c = lung_px[rng.integers(len(lung_px))]
            blob = _ellipse(size, r, c, size * rng.uniform(0.05, 0.10), size * rng.uniform(0.05, 0.10))
            blob &= lung
            img[blob] = rng.uniform(225, 245) + rng.normal(0.0, 3.0, int(blob.sum()))
            infection |= blob

    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, lung.astype(np.uint8), infection.astype(np.uint8)


def synth_generate(n_per_class: int, size: int, seed: int, out_dir) -> Path:
    """Write a deterministic synthetic dataset; returns the manifest path.

    Each sample is two darker elliptical lung lobes on a noisy bright
    background. The covid class adds 1-3 bright infection blobs strictly
    inside the lobes; non_covid adds lobe texture with an empty infection
    mask; normal stays plain. Infection masks are subsets of lung masks
    by construction.
    """
    if size % 4:
        raise ConfigurationError(f"size must be divisible by 4, got {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records: List[DatasetRecord] = []
    for cls in CLASSES:
        for i in range(n_per_class):
            rid = f"{cls}_{i:04d}"
            image, lung, infection = _make_sample(rng, size, cls)
            image_path = out / f"{rid}.pgm"
            lung_path = out / f"{rid}_lung.pgm"
            inf_path = out / f"{rid}_inf.pgm"
            write_image(image_path, image)
            write_mask(lung_path, lung)
            write_mask(inf_path, infection)
            records.append(
                DatasetRecord(
                    id=rid, image=image_path, lung_mask=lung_path,
                    infection_mask=inf_path, cls=cls,
                )
            )
    manifest = out / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest


# ---------------------------------------------------------------------------
# weights container

WEIGHTS_MAGIC = b"SEGW"
WEIGHTS_VERSION = 1
ARCH_CODES = {"unet": 0, "unetpp": 1, "fpn": 2}
ARCH_NAMES = {code: name for name, code in ARCH_CODES.items()}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
DTYPE_NAMES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_weights(model: SegModel, path) -> None:
    cfg = model.config
    chunks = [
        WEIGHTS_MAGIC,
        struct.pack("<I", WEIGHTS_VERSION),
        struct.pack("<BBHH", ARCH_CODES[cfg.arch], cfg.depth, cfg.base_channels, cfg.in_channels),
        struct.pack("<I", len(model.params)),
    ]
    for name, p in model.params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, expected: Optional[ModelConfig] = None) -> SegModel:
    """Rebuild a model from a weights file; parameters restore bitwise."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != WEIGHTS_VERSION:
        raise ParseError(f"unsupported weights version {version}", offset=4)
    arch_code, depth, base, cin = struct.unpack_from("<BBHH", buf, 8)
    if arch_code not in ARCH_NAMES:
        raise ParseError(f"unknown architecture code {arch_code}", offset=8)
    config = ModelConfig(
        arch=ARCH_NAMES[arch_code], depth=depth, base_channels=base, in_channels=cin
    )
    if expected is not None and expected != config:
        raise ConfigurationError(f"weights are for {config}, expected {expected}")
    (count,) = struct.unpack_from("<I", buf, 14)
    pos = 18

    model = build_model(config, seed=0)
    if count != len(model.params):
        raise ParseError(f"tensor count {count} != model structure {len(model.params)}", offset=14)
    loaded = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dtype_code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if dtype_code not in DTYPE_NAMES:
            raise ParseError(f"tensor {name!r}: unknown dtype code {dtype_code}", offset=pos - 2)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = DTYPE_NAMES[dtype_code]
        nbytes = int(np.prod(dims)) * dtype.itemsize
        payload = buf[pos : pos + nbytes]
        if len(payload) != nbytes:
            raise ParseError(
                f"tensor {name!r}: truncated payload ({len(payload)} of {nbytes} bytes)",
                offset=pos + len(payload),
            )
        loaded[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        pos += nbytes

    for name, p in model.params.items():
        if name not in loaded:
            raise ParseError(f"weights file lacks tensor {name!r}")
        if loaded[name].shape != p.data.shape:
            raise ParseError(
                f"tensor {name!r}: shape {loaded[name].shape} != model shape {p.data.shape}"
            )
        fresh = Tensor.__new__(Tensor)
        fresh.data = loaded[name]
        fresh.requires_grad = True
        model.params[name] = fresh
    return model
