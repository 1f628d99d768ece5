"""Image I/O, corpus preparation and the low/high-resolution pair pipeline.

Images are numpy arrays of shape [H, W, 3] with values in [0, 1] (the
working form); 8-bit quantisation happens only on save.  Boxes are
(left, top, right, bottom) with exclusive right/bottom.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.color import rgb2hsv

from .diffusion import ConditionedBatch, to_model_range
from .tensor import Rng, get_dtype

RAW_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}

# hue in degrees, saturation and value in [0, 1]
GREEN_HUE = (90.0, 150.0)
GREEN_S_MIN = 0.4
GREEN_V_MIN = 0.2
MIN_BLOCK_FRACTION = 0.005
MIN_KEEP_FRACTION = 0.6


class ImageFormatError(OSError):
    pass


# I/O ---------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a lossless PNG (8 bits per channel)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


# green annotation blocks ---------------------------------------------------------

@dataclass
class GreenBlock:
    mask: np.ndarray
    box: tuple  # left, top, right, bottom


def green_mask(img: np.ndarray, h_range=GREEN_HUE, s_min=GREEN_S_MIN, v_min=GREEN_V_MIN) -> np.ndarray:
    hsv = rgb2hsv(np.asarray(img, dtype=np.float64))
    hue = hsv[..., 0] * 360.0
    return (hue >= h_range[0]) & (hue <= h_range[1]) & (hsv[..., 1] >= s_min) & (hsv[..., 2] >= v_min)


def detect_green_block(img: np.ndarray, h_range=GREEN_HUE, s_min=GREEN_S_MIN,
                       v_min=GREEN_V_MIN) -> GreenBlock | None:
    """Largest green component, if it is big enough and centred in the bottom-left quadrant."""
    mask = green_mask(img, h_range, s_min, v_min)
    if not mask.any():
        return None
    labels, n = ndimage.label(mask)
    sizes = np.bincount(labels.ravel())[1:]
    k = int(np.argmax(sizes)) + 1
    comp = labels == k
    h, w = mask.shape
    if sizes[k - 1] < MIN_BLOCK_FRACTION * h * w:
        return None
    rows, cols = np.nonzero(comp)
    if not (cols.mean() < w / 2 and rows.mean() >= h / 2):
        return None
    box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    return GreenBlock(comp, box)


@dataclass
class CleanResult:
    image: np.ndarray | None
    action: str  # kept | cropped | rejected-area
    box: tuple | None = None  # crop box applied, if any


def clean_image(img: np.ndarray, h_range=GREEN_HUE, s_min=GREEN_S_MIN, v_min=GREEN_V_MIN) -> CleanResult:
    """Crop away a detected annotation block, or reject the image if too little survives."""
    block = detect_green_block(img, h_range, s_min, v_min)
    if block is None:
        return CleanResult(img, "kept")
    h, w = img.shape[:2]
    left, top, right, bottom = block.box
    candidates = [(0, 0, w, top), (right, 0, w, h), (0, bottom, w, h), (0, 0, left, h)]
    best = max(candidates, key=lambda b: (b[2] - b[0]) * (b[3] - b[1]))
    area = (best[2] - best[0]) * (best[3] - best[1])
    if area < MIN_KEEP_FRACTION * h * w:
        return CleanResult(None, "rejected-area", best)
    return CleanResult(img[best[1]:best[3], best[0]:best[2]], "cropped", best)


# bicubic resampling -------------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] weights for 1-D cubic resampling with edge clamping.

    Pixel centres are aligned (half-pixel mapping).  When shrinking, the
    kernel is stretched by the size ratio so it also acts as a low-pass filter.
    """
    scale = n_out / n_in
    support = min(scale, 1.0)
    m = np.zeros((n_out, n_in))
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    radius = 2.0 / support
    for i, c in enumerate(centres):
        taps = np.arange(math.floor(c - radius), math.ceil(c + radius) + 1)
        wts = cubic_kernel((taps - c) * support)
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), wts)
    return m / m.sum(axis=1, keepdims=True)


def bicubic_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    rows = resample_matrix(h, out_h)
    cols = resample_matrix(w, out_w)
    if img.ndim == 2:
        return rows @ img @ cols.T
    return np.einsum("oh,hwc,pw->opc", rows, img, cols, optimize=True)


# pairs ---------------------------------------------------------------------------

class TooSmallError(ValueError):
    pass


@dataclass
class Pair:
    lr: np.ndarray
    hr: np.ndarray
    lr_up: np.ndarray


def center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return img[top:top + side, left:left + side]


def make_pair(img: np.ndarray, hr_size: int, scale: int) -> Pair:
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} is not divisible by scale {scale}")
    h, w = img.shape[:2]
    if min(h, w) < hr_size:
        raise TooSmallError(f"image {w}x{h} is smaller than {hr_size}x{hr_size}")
    sq = center_square(img)
    hr = sq if sq.shape[0] == hr_size else bicubic_resize(sq, hr_size, hr_size)
    lr_size = hr_size // scale
    lr = bicubic_resize(hr, lr_size, lr_size)
    lr_up = bicubic_resize(lr, hr_size, hr_size)
    return Pair(lr, hr, lr_up)


def augment(pair: Pair, rng: Rng) -> Pair:
    """Random horizontal and vertical flips, applied identically to all members."""
    hflip = rng.uniform() < 0.5
    vflip = rng.uniform() < 0.5

    def f(a):
        if hflip:
            a = a[:, ::-1]
        if vflip:
            a = a[::-1]
        return np.ascontiguousarray(a)

    return Pair(f(pair.lr), f(pair.hr), f(pair.lr_up))


# toy data -------------------------------------------------------------------------------

def synth_toy_image(seed: int, size: int) -> np.ndarray:
    """Smooth tissue-like image: a few low-frequency sinusoids plus soft ellipses.

    Defined on continuous coordinates, so the same seed gives the same scene
    at any resolution.
    """
    r = np.random.default_rng(seed)
    u = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(u, u)
    base = np.array([0.5, 0.5, 0.5]) + r.uniform(-0.1, 0.1, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(r.integers(3, 7)):
        freq = r.uniform(0.5, 2.5)
        theta = r.uniform(0, 2 * math.pi)
        phase = r.uniform(0, 2 * math.pi)
        amp = r.uniform(0.03, 0.1) * r.uniform(0.5, 1.0, 3)
        wave = np.sin(2 * math.pi * freq * (math.cos(theta) * uu + math.sin(theta) * vv) + phase)
        img += wave[..., None] * amp
    for _ in range(r.integers(1, 4)):
        cx, cy = r.uniform(0.2, 0.8, 2)
        rx, ry = r.uniform(0.1, 0.25, 2)
        rot = r.uniform(0, math.pi)
        soft = r.uniform(0.15, 0.3)
        delta = r.uniform(-0.25, 0.25) * r.uniform(0.5, 1.0, 3)
        dx, dy = uu - cx, vv - cy
        a = (math.cos(rot) * dx + math.sin(rot) * dy) / rx
        b = (-math.sin(rot) * dx + math.cos(rot) * dy) / ry
        inside = 0.5 * (1 + np.tanh((1 - np.sqrt(a * a + b * b)) / soft))
        img += inside[..., None] * delta
    return np.clip(img, 0.0, 1.0)


# datasets ------------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    root: Path | None
    split: str
    index: list
    scale_factor: int
    hr_size: int
    labels: dict = field(default_factory=dict)
    toy_seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            raise ValueError(f"dataset split {self.split!r} is empty")
        if self.hr_size % self.scale_factor:
            raise ValueError(f"hr_size {self.hr_size} is not divisible by scale {self.scale_factor}")

    def __len__(self):
        return len(self.index)

    def load(self, item_id: str) -> np.ndarray:
        if self.toy_seed is not None:
            return synth_toy_image(toy_item_seed(self.toy_seed, item_id), self.hr_size)
        return load_image(Path(self.root) / self.split / f"{item_id}.png")

    def pair(self, item_id: str) -> Pair:
        if item_id not in self._cache:
            self._cache[item_id] = make_pair(self.load(item_id), self.hr_size, self.scale_factor)
        return self._cache[item_id]

    def batch(self, ids, rng: Rng | None = None) -> ConditionedBatch:
        """Stack items into a model-range batch, flipping each if ``rng`` is given."""
        pairs = [self.pair(i) for i in ids]
        if rng is not None:
            pairs = [augment(p, rng) for p in pairs]
        dt = get_dtype()
        x = np.stack([to_model_range(p.lr_up).transpose(2, 0, 1) for p in pairs]).astype(dt)
        y = np.stack([to_model_range(p.hr).transpose(2, 0, 1) for p in pairs]).astype(dt)
        return ConditionedBatch(x, y)

    def batches(self, batch_size: int, rng: Rng, augment_flips: bool = True,
                start: int = 0) -> Iterator[ConditionedBatch]:
        """Endless stream of batches, beginning at batch number ``start``.

        Epoch ``e`` visits the index in the order ``rng.fork(e).permutation``
        and the flips of batch ``s`` come from their own fork, so batch ``s``
        depends only on the seed and ``s``.  A resumed run therefore sees the
        same batches as an uninterrupted one.
        """
        n = len(self.index)
        perms: dict = {}
        step = start
        while True:
            ids = []
            for pos in range(step * batch_size, (step + 1) * batch_size):
                e = pos // n
                if e not in perms:
                    perms.clear()
                    perms[e] = rng.fork(e).permutation(n)
                ids.append(self.index[perms[e][pos % n]])
            yield self.batch(ids, rng.fork(FLIP_KEY_OFFSET + step) if augment_flips else None)
            step += 1


# fork keys at or above this offset belong to per-batch flip streams
FLIP_KEY_OFFSET = 2 ** 40


def toy_item_seed(seed: int, item_id: str) -> int:
    return int(np.random.SeedSequence([int(seed), int(item_id.split("-")[-1])]).generate_state(1)[0])


def synth_toy_dataset(n: int, hr_size: int, rng: Rng, scale: int = 4, split: str = "train") -> DatasetHandle:
    """In-memory stand-in corpus of ``n`` generated scenes, deterministic per rng seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = int(rng.integers(0, 2 ** 31))
    index = [f"toy-{k:05d}" for k in range(n)]
    return DatasetHandle(None, split, index, scale, hr_size, toy_seed=seed)


def toy_splits(n_train: int, n_val: int, hr_size: int, scale: int, seed: int) -> tuple[DatasetHandle, DatasetHandle]:
    """Disjoint train/val toy handles drawn from one generator seed."""
    rng = Rng(seed)
    base = int(rng.integers(0, 2 ** 31))
    train = DatasetHandle(None, "train", [f"toy-{k:05d}" for k in range(n_train)], scale, hr_size, toy_seed=base)
    val = DatasetHandle(None, "val", [f"toy-{k:05d}" for k in range(n_train, n_train + n_val)],
                        scale, hr_size, toy_seed=base)
    return train, val


# corpus on disk ------------------------------------------------------------------------

MANIFEST_COLUMNS = ["id", "label", "orig_width", "orig_height", "cleaned", "split"]
REPORT_COLUMNS = ["id", "action", "crop_box"]


def _item_id(rel: Path) -> str:
    return "__".join(rel.with_suffix("").parts)


def _fmt_box(box) -> str:
    return "" if box is None else ",".join(str(v) for v in box)


def preprocess_corpus(raw_dir, out_dir, hr_size: int, scale: int, val_fraction: float = 0.05,
                      seed: int = 0, green=(GREEN_HUE, GREEN_S_MIN, GREEN_V_MIN)) -> list[dict]:
    """Clean every raw image and write ``out_dir/{train,val}/<id>.png``, the manifest and the report.

    Returns the report rows.  The label of an item is its parent directory
    relative to ``raw_dir`` (class folders), or "unlabeled".
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    if not raw_dir.is_dir():
        raise FileNotFoundError(f"raw directory {raw_dir} does not exist")
    files = sorted(p for p in raw_dir.rglob("*") if p.is_file() and p.suffix.lower() in RAW_EXTENSIONS)
    report, kept = [], []
    for path in files:
        rel = path.relative_to(raw_dir)
        item = _item_id(rel)
        img = load_image(path)
        res = clean_image(img, *green)
        if res.image is None:
            report.append({"id": item, "action": res.action, "crop_box": _fmt_box(res.box)})
            continue
        try:
            pair = make_pair(res.image, hr_size, scale)
        except TooSmallError:
            report.append({"id": item, "action": "rejected-small", "crop_box": _fmt_box(res.box)})
            continue
        report.append({"id": item, "action": res.action, "crop_box": _fmt_box(res.box)})
        label = rel.parent.as_posix() if rel.parent != Path(".") else "unlabeled"
        kept.append({"id": item, "label": label, "orig_width": img.shape[1], "orig_height": img.shape[0],
                     "cleaned": int(res.action == "cropped"), "hr": pair.hr})

    n_val = int(math.ceil(val_fraction * len(kept))) if len(kept) > 1 else 0
    n_val = min(n_val, max(len(kept) - 1, 0))
    perm = np.random.default_rng(seed).permutation(len(kept))
    val_ids = {kept[k]["id"] for k in perm[:n_val]}
    for row in kept:
        row["split"] = "val" if row["id"] in val_ids else "train"
        save_image(row.pop("hr"), out_dir / row["split"] / f"{row['id']}.png")

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_tsv(out_dir / "manifest.tsv", MANIFEST_COLUMNS, kept)
    _write_tsv(out_dir / "preprocess_report.tsv", REPORT_COLUMNS, report)
    return report


def _write_tsv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.tsv", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def open_corpus(root, split: str, hr_size: int, scale: int) -> DatasetHandle:
    rows = [r for r in read_manifest(root) if r["split"] == split]
    return DatasetHandle(Path(root), split, [r["id"] for r in rows], scale, hr_size,
                         labels={r["id"]: r["label"] for r in rows})


def default_data_root() -> str | None:
    return os.environ.get("SR3_DATA_ROOT")
