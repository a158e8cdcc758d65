"""Dataset container, the bundled synthetic desk dataset, and a PGM/PPM importer.

Dataset file layout (integers little-endian)::

    ALMADS1\\n
    count=N\\n
    shape=C,H,W\\n
    num_classes=K\\n
    label_bytes=8\\n
    end\\n
    N * prod(shape) float64 image values (sample-major, C-order)
    N int64 labels
"""

from __future__ import annotations

import dataclasses
import os
import pathlib
from importlib import resources

import numpy as np

MAGIC = b"ALMADS1\n"


class DatasetFormatError(ValueError):
    pass


@dataclasses.dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in count")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]


def save_dataset(ds: Dataset, path: "str | os.PathLike") -> None:
    header = (
        f"count={len(ds)}\n"
        f"shape={','.join(str(s) for s in ds.shape)}\n"
        f"num_classes={ds.num_classes}\n"
        "label_bytes=8\n"
        "end\n"
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC + header.encode("ascii"))
        fh.write(ds.images.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<i8").tobytes())


def load_dataset(path: "str | os.PathLike") -> Dataset:
    data = pathlib.Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise DatasetFormatError(f"{path}: not an ALMADS1 dataset file")
    pos = len(MAGIC)
    fields = {}
    line_no = 1
    while True:
        nl = data.find(b"\n", pos)
        line_no += 1
        if nl < 0:
            raise DatasetFormatError(f"{path}: truncated header at line {line_no}")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "end":
            break
        if "=" not in line:
            raise DatasetFormatError(f"{path}: malformed header line {line_no}: {line!r}")
        k, v = line.split("=", 1)
        fields[k] = v
    try:
        count = int(fields["count"])
        shape = tuple(int(s) for s in fields["shape"].split(","))
        num_classes = int(fields["num_classes"])
        label_bytes = int(fields.get("label_bytes", 8))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: bad header ({exc})") from None
    if label_bytes != 8:
        raise DatasetFormatError(f"{path}: unsupported label width {label_bytes}")
    n_img = count * int(np.prod(shape))
    expected = pos + 8 * n_img + 8 * count
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    images = np.frombuffer(data, dtype="<f8", count=n_img, offset=pos).reshape((count,) + shape)
    labels = np.frombuffer(data, dtype="<i8", count=count, offset=pos + 8 * n_img)
    return Dataset(images.astype(np.float64), labels.astype(np.int64), num_classes)


def import_pnm_directory(root: "str | os.PathLike") -> Dataset:
    """Build a dataset from ``root/<label>/*.pgm|*.ppm`` (labels are integer directory names)."""
    from PIL import Image

    root = pathlib.Path(root)
    images, labels = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = int(sub.name)
        except ValueError:
            continue
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() not in (".pgm", ".ppm", ".pnm"):
                continue
            with Image.open(f) as im:
                if im.mode in ("L", "I", "I;16"):
                    arr = np.asarray(im, dtype=np.float64)[None]
                else:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
                maxval = 65535.0 if im.mode.startswith("I") else 255.0
            images.append(arr / maxval)
            labels.append(label)
    if not images:
        raise DatasetFormatError(f"{root}: no PGM/PPM images found")
    if len({a.shape for a in images}) != 1:
        raise DatasetFormatError(f"{root}: images differ in shape")
    return Dataset(np.stack(images), np.array(labels), max(labels) + 1)


# --------------------------------------------------------------------------
# synthetic desk dataset

# 5x7 bitmap digits, one string of 5 bits per row
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def glyph(digit: int) -> np.ndarray:
    return np.array([[int(c) for c in row] for row in _GLYPHS[digit]], dtype=np.float64)


def make_desk_dataset(count: int = 1000, seed: int = 0, noise: float = 0.04) -> Dataset:
    """Seeded 8x8 RGB digit images: coloured 5x7 glyph on a coloured background, jittered."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    images = np.empty((count, 3, 8, 8))
    for n, label in enumerate(labels):
        mask = np.zeros((8, 8))
        dy, dx = rng.integers(0, 2), rng.integers(0, 4)
        mask[dy : dy + 7, dx : dx + 5] = glyph(int(label))
        fg = rng.uniform(0.55, 0.95, size=3)
        bg = rng.uniform(0.05, 0.4, size=3)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
        img += rng.normal(0.0, noise, size=img.shape)
        images[n] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, 10)


def bundled_path(name: str) -> pathlib.Path:
    return pathlib.Path(str(resources.files("alma.data").joinpath(name)))


DESK_DATASET = "desk.almads"
REFERENCE_MODEL = "reference.almann"
