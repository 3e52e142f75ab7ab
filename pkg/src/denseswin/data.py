"""Image ingestion, manifests, stratified splits, augmentation and batching.

Images are ``float32`` arrays of shape ``[3, H, W]`` with values in ``[0, 1]``.
The canonical on-disk format is binary PPM (P6); other formats are decoded
through Pillow when it is installed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import container
from .config import AugmentationSpec
from .errors import ConfigError, ContractError, IngestionError

CLASS_NAMES = ("Bacterial Blight", "Brown Streak", "Green Mottle", "Healthy", "Mosaic")


@dataclass(frozen=True)
class LabelSet:
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(self.names) != 5 or len(set(self.names)) != 5:
            raise ContractError(f"label set must hold 5 distinct names, got {self.names}")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown class name {name!r}; expected one of {self.names}") from None

    def __len__(self) -> int:
        return len(self.names)


LABELS = LabelSet()


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _ppm_tokens(buf: bytes, path) -> tuple[list[int], int]:
    """Parse the four header fields; return them and the payload offset."""
    tokens: list[int] = []
    i = 0
    n = len(buf)
    while len(tokens) < 4:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise IngestionError(f"{path}: truncated PPM header")
        tok = buf[start:i]
        if not tokens:
            if tok != b"P6":
                raise IngestionError(f"{path}: not a binary PPM (magic {tok[:8]!r})")
            tokens.append(6)
        else:
            if not tok.isdigit():
                raise IngestionError(f"{path}: bad PPM header field {tok[:16]!r}")
            tokens.append(int(tok))
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not buf[i : i + 1].isspace():
        raise IngestionError(f"{path}: truncated PPM header")
    return tokens, i + 1


def decode_ppm(buf: bytes, path="<bytes>") -> np.ndarray:
    """Decode P6 bytes to a ``uint8`` array of shape ``[H, W, 3]``."""
    (_, w, h, maxval), off = _ppm_tokens(buf, path)
    if maxval != 255:
        raise IngestionError(f"{path}: only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise IngestionError(f"{path}: empty image {w}x{h}")
    need = w * h * 3
    if len(buf) - off < need:
        raise IngestionError(f"{path}: truncated raster ({len(buf) - off} of {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy()


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Encode ``[H, W, 3]`` uint8 pixels as P6."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"expected [H, W, 3] pixels, got {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3, H, W]`` image in [0, 1] as an 8-bit PPM."""
    rgb = np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(encode_ppm(rgb))


def _decode_other(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:
        raise IngestionError(f"{path}: only PPM is supported without Pillow") from None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise IngestionError(f"{path}: cannot decode image ({e})") from e


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` with half-pixel centres and edge clamping."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = image.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(image.dtype)


def load_image(path, size: int | None = None) -> np.ndarray:
    """Decode an image to ``[3, size, size]`` float32 in [0, 1]."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"{path}: cannot read image ({e.strerror or e})") from e
    rgb = decode_ppm(buf, path) if buf[:2] == b"P6" else _decode_other(path)
    img = np.transpose(rgb, (2, 0, 1)).astype(np.float32) / np.float32(255.0)
    if size is not None:
        img = np.clip(resize_bilinear(img, size, size), 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32)


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Entry:
    path: str
    label: int
    split: str = "train"
    copy: int = 0


@dataclass
class DatasetManifest:
    entries: list[Entry]
    root: Path = field(default_factory=Path)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def split(self, name: str) -> "DatasetManifest":
        if name not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {name!r}")
        return DatasetManifest([e for e in self.entries if e.split == name], self.root, self.seed)

    def class_counts(self, k: int = 5) -> np.ndarray:
        return np.bincount(self.labels, minlength=k)

    def resolve(self, entry: Entry) -> Path:
        return self.root / entry.path


def read_manifest(path, labels: LabelSet = LABELS) -> DatasetManifest:
    """Read ``relative/path<TAB>class_name`` lines; paths are relative to the manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestionError(f"{path}: cannot read manifest ({e.strerror or e})") from e
    entries = []
    seen = set()
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'path<TAB>class_name'")
        rel, name = parts
        if rel in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate path {rel!r}")
        seen.add(rel)
        entries.append(Entry(rel, labels.index(name)))
    return DatasetManifest(entries, path.parent)


def write_manifest(path, manifest: DatasetManifest, labels: LabelSet = LABELS) -> None:
    lines = [f"{e.path}\t{labels.names[e.label]}\n" for e in manifest.entries]
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(manifest: DatasetManifest, test_fraction: float = 0.2, seed: int = 0) -> DatasetManifest:
    """Tag each entry train or test, holding out ``round(fraction * n_c)`` per class.

    ``test_fraction == 0`` keeps every entry in the train split.
    """
    if not 0 <= test_fraction < 1:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    if test_fraction == 0:
        entries = [replace(e, split="train") for e in manifest.entries]
        return DatasetManifest(entries, manifest.root, seed)
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    for c, idx in sorted(by_class.items()):
        if len(idx) < 2:
            raise ConfigError(f"class {c} has {len(idx)} entries; a split needs at least 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    test = set()
    for c in sorted(by_class):
        idx = by_class[c]
        n_test = min(max(_round_half_up(test_fraction * len(idx)), 1), len(idx) - 1)
        perm = rng.permutation(len(idx))
        test.update(idx[j] for j in perm[:n_test])
    entries = [replace(e, split="test" if i in test else "train") for i, e in enumerate(manifest.entries)]
    return DatasetManifest(entries, manifest.root, seed)


def minority_oversample(manifest: DatasetManifest, balance_factor: float = 1.0) -> DatasetManifest:
    """Duplicate minority-class entries until each class reaches ``ceil(max * factor)``.

    Duplicates carry increasing ``copy`` ids, so their augmentation seeds differ.
    """
    if any(e.split != "train" for e in manifest.entries):
        raise ContractError("oversampling applies to the train split only")
    counts: dict[int, list[Entry]] = {}
    for e in manifest.entries:
        counts.setdefault(e.label, []).append(e)
    if not counts:
        return manifest
    target = math.ceil(max(len(v) for v in counts.values()) * balance_factor)
    out = list(manifest.entries)
    for c in sorted(counts):
        members = counts[c]
        need = target - len(members)
        for j in range(max(need, 0)):
            src = members[j % len(members)]
            out.append(replace(src, copy=1 + j // len(members)))
    return DatasetManifest(out, manifest.root, manifest.seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def sample_rng(seed: int, epoch: int, index: int, copy: int = 0) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample, duplicate)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index, copy]))


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def vflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def rescale(image: np.ndarray, factor: float) -> np.ndarray:
    """Resize by ``factor`` then centre-crop or edge-pad back to the input size."""
    _, h, w = image.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return image.copy()
    out = resize_bilinear(image, nh, nw)
    if nh >= h:
        top = (nh - h) // 2
        out = out[:, top : top + h]
    else:
        top = (h - nh) // 2
        out = np.pad(out, ((0, 0), (top, h - nh - top), (0, 0)), mode="edge")
    if nw >= w:
        left = (nw - w) // 2
        out = out[:, :, left : left + w]
    else:
        left = (w - nw) // 2
        out = np.pad(out, ((0, 0), (0, 0), (left, w - nw - left)), mode="edge")
    return np.ascontiguousarray(out)


def shear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Horizontal shear about the image centre, bilinear, border replicated."""
    if degrees == 0:
        return image.copy()
    _, h, w = image.shape
    t = math.tan(math.radians(degrees))
    ys = np.arange(h, dtype=np.float64) - (h - 1) / 2.0
    src = np.arange(w, dtype=np.float64)[None, :] - t * ys[:, None]
    src = np.clip(src, 0.0, w - 1)
    x0 = np.floor(src).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = src - x0
    rows = np.arange(h)[:, None]
    img = image.astype(np.float64)
    out = img[:, rows, x0] * (1 - fx) + img[:, rows, x1] * fx
    return out.astype(image.dtype)


def augment(image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Flip, flip, scale, shear in that order; values clamped to [0, 1].

    Random draws happen in a fixed order whether or not a transform fires,
    so the stream consumed per sample does not depend on earlier outcomes.
    """
    if not spec.enabled:
        return image
    do_h = rng.random() < spec.hflip_p
    do_v = rng.random() < spec.vflip_p
    lo, hi = spec.scale_range
    factor = rng.uniform(lo, hi)
    angle = rng.uniform(-spec.shear_degrees, spec.shear_degrees)
    out = image
    if do_h:
        out = hflip(out)
    if do_v:
        out = vflip(out)
    out = rescale(out, factor)
    out = shear(out, angle)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets and batching
# ---------------------------------------------------------------------------


@dataclass
class ImageSet:
    """Decoded images for a manifest split, in manifest order."""

    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int64
    copies: np.ndarray  # [N] int64
    sources: np.ndarray  # [N] index of the decoded source image
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def load_split(manifest: DatasetManifest, size: int) -> ImageSet:
    """Decode every distinct path once; duplicates share the decoded image."""
    decoded: dict[str, int] = {}
    images = []
    sources = []
    for e in manifest.entries:
        if e.path not in decoded:
            decoded[e.path] = len(images)
            images.append(load_image(manifest.resolve(e), size))
        sources.append(decoded[e.path])
    if not images:
        raise ContractError("split is empty")
    return ImageSet(
        np.stack(images),
        manifest.labels,
        np.array([e.copy for e in manifest.entries], dtype=np.int64),
        np.array(sources, dtype=np.int64),
        [e.path for e in manifest.entries],
    )


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def batch_iterator(
    data: ImageSet,
    batch_size: int = 16,
    seed: int = 0,
    epoch: int = 0,
    spec: AugmentationSpec | None = None,
    shuffle: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images [B, 3, H, W], labels [B])``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = epoch_order(len(data), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs = data.images[data.sources[idx]]
        if spec is not None and spec.enabled:
            imgs = np.stack(
                [
                    augment(data.images[data.sources[i]], spec, sample_rng(seed, epoch, int(data.sources[i]), int(data.copies[i])))
                    for i in idx
                ]
            )
        yield np.ascontiguousarray(imgs, dtype=np.float32), data.labels[idx]


# ---------------------------------------------------------------------------
# synthetic textures
# ---------------------------------------------------------------------------


def synthetic_image(label: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One procedural texture for class ``label``.

    0: horizontal stripes, 1: vertical stripes, 2: checkerboard,
    3: smooth radial blob, 4: scattered dots. Each class has its own hue.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    if label == 0:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy + phase)
    elif label == 1:
        base = 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx + phase)
    elif label == 2:
        base = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy + phase))
    elif label == 3:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        base = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(0.1, 0.2) ** 2))
    elif label == 4:
        base = np.zeros((size, size))
        for cy, cx in rng.uniform(0, 1, size=(12, 2)):
            base += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.03**2))
        base = np.clip(base, 0, 1)
    else:
        raise ContractError(f"synthetic label must be in [0, 5), got {label}")
    hues = np.array(
        [[0.9, 0.4, 0.2], [0.5, 0.3, 0.1], [0.3, 0.8, 0.3], [0.2, 0.6, 0.2], [0.7, 0.8, 0.2]]
    )
    img = base[None] * hues[label][:, None, None] + 0.1 * rng.standard_normal((3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(out_dir, per_class: int = 10, seed: int = 0, size: int = 64, labels: LabelSet = LABELS) -> Path:
    """Write ``5 * per_class`` PPM textures plus ``manifest.tsv``; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in range(len(labels)):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i]))
            rel = f"class{c}/img{i:04d}.ppm"
            (out / rel).parent.mkdir(exist_ok=True)
            write_ppm(out / rel, synthetic_image(c, rng, size))
            entries.append(Entry(rel, c))
    path = out / "manifest.tsv"
    write_manifest(path, DatasetManifest(entries, out), labels)
    return path


def save_image_set(path, data: ImageSet, split: str = "train") -> None:
    """Store decoded images in the binary container (no resizing on reload)."""
    container.save(
        path,
        {
            "images": data.images[data.sources].astype(np.float32),
            "labels": data.labels.astype(np.int64),
            "split": np.full(len(data), 0 if split == "train" else 1, dtype=np.int64),
            "paths": container.json_section(list(data.paths)),
        },
    )


def load_image_set(path, split: str | None = None) -> ImageSet:
    sec = container.load(path)
    try:
        images, labels = sec["images"].astype(np.float32), sec["labels"]
        paths = container.read_json_section(sec["paths"])
        keep = np.ones(len(labels), dtype=bool) if split is None else sec["split"] == (0 if split == "train" else 1)
    except KeyError as e:
        raise IngestionError(f"{path}: missing dataset section {e}") from None
    if images.ndim != 4 or images.shape[0] != len(labels):
        raise IngestionError(f"{path}: images {images.shape} do not match {len(labels)} labels")
    idx = np.nonzero(keep)[0]
    return ImageSet(
        images[idx],
        labels[idx],
        np.zeros(len(idx), dtype=np.int64),
        np.arange(len(idx), dtype=np.int64),
        [paths[i] for i in idx],
    )


def prepare_manifest(manifest_path, test_fraction: float, seed: int) -> DatasetManifest:
    return stratified_split(read_manifest(manifest_path), test_fraction, seed)


def labels_from(names: Sequence[str]) -> LabelSet:
    return LabelSet(tuple(names))
