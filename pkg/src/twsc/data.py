"""Dataset ingestion and batch scheduling.

Ingestion reads the classic IDX image/label files (big-endian, magic
2051 for images and 2049 for labels), enforces the canonical 60000/10000
split of 28x28 grayscale digits, and scales pixels to [0, 1] float32.
Labels must be present and well-formed but are otherwise unused; this is
an unsupervised reconstruction task.

A ``BatchSchedule`` is a value object: the full permutation of one epoch,
derived only from (seed, dataset checksum, split, epoch). Both nodes of a
two-way run receive the same schedule object, which is what makes their
training data identical by construction.

``synthesize_digit_dataset`` renders procedural digits from a built-in
5x7 glyph font so the whole pipeline can run in environments where the
real archive is unreachable. The files it writes are bona fide IDX and
go through the exact same ingestion path.
"""

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import IngestError
from .rng import numpy_stream

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

CANONICAL_TRAIN = 60000
CANONICAL_TEST = 10000
IMAGE_SIDE = 28


def _read_file(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        with gzip.open(gz, "rb") as fh:
            return fh.read()
    raise IngestError(f"dataset file not found: {path} (also tried .gz)")


def parse_idx_images(blob: bytes, name: str) -> np.ndarray:
    if len(blob) < 16:
        raise IngestError(f"{name}: header truncated ({len(blob)} bytes)")
    magic, count, rows, cols = struct.unpack(">iiii", blob[:16])
    if magic != IMAGE_MAGIC:
        raise IngestError(f"{name}: bad magic {magic}, expected {IMAGE_MAGIC}")
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise IngestError(
            f"{name}: size mismatch, header promises {expected} bytes, file has {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def parse_idx_labels(blob: bytes, name: str) -> np.ndarray:
    if len(blob) < 8:
        raise IngestError(f"{name}: header truncated ({len(blob)} bytes)")
    magic, count = struct.unpack(">ii", blob[:8])
    if magic != LABEL_MAGIC:
        raise IngestError(f"{name}: bad magic {magic}, expected {LABEL_MAGIC}")
    if len(blob) != 8 + count:
        raise IngestError(
            f"{name}: size mismatch, header promises {8 + count} bytes, file has {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    if images.dtype != np.uint8 or images.ndim != 3:
        raise IngestError("write_idx_images expects uint8 images of shape (n, rows, cols)")
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    if labels.dtype != np.uint8 or labels.ndim != 1:
        raise IngestError("write_idx_labels expects uint8 labels of shape (n,)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


@dataclass
class Dataset:
    """In-memory image splits, float32 in [0, 1], shape (n, 28, 28, 1)."""

    train_images: np.ndarray
    test_images: np.ndarray
    checksum: str

    @classmethod
    def from_arrays(cls, train: np.ndarray, test: np.ndarray, tag: str = "inline") -> "Dataset":
        """Build a dataset directly from arrays (uint8 or [0,1] float)."""
        def scale(arr):
            if arr.dtype == np.uint8:
                arr = arr.astype(np.float32) / 255.0
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim == 3:
                arr = arr[..., None]
            return arr
        train = scale(train)
        test = scale(test)
        digest = hashlib.sha256()
        digest.update(tag.encode())
        digest.update(train.tobytes())
        digest.update(test.tobytes())
        return cls(train, test, digest.hexdigest())


def ingest_mnist(data_dir) -> Dataset:
    """Load the canonical four-file digit corpus from ``data_dir``.

    Enforces magics, byte counts, the 60000/10000 split and 28x28
    geometry. Raises :class:`IngestError` naming the offending file.
    """
    data_dir = Path(data_dir)
    blobs = {}
    digest = hashlib.sha256()
    for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        blob = _read_file(data_dir / name)
        blobs[name] = blob
        digest.update(blob)

    train = parse_idx_images(blobs[TRAIN_IMAGES], TRAIN_IMAGES)
    test = parse_idx_images(blobs[TEST_IMAGES], TEST_IMAGES)
    train_labels = parse_idx_labels(blobs[TRAIN_LABELS], TRAIN_LABELS)
    test_labels = parse_idx_labels(blobs[TEST_LABELS], TEST_LABELS)

    for name, arr, count in ((TRAIN_IMAGES, train, CANONICAL_TRAIN),
                             (TEST_IMAGES, test, CANONICAL_TEST)):
        if arr.shape != (count, IMAGE_SIDE, IMAGE_SIDE):
            raise IngestError(
                f"{name}: expected shape ({count}, {IMAGE_SIDE}, {IMAGE_SIDE}), got {arr.shape}")
    for name, arr, count in ((TRAIN_LABELS, train_labels, CANONICAL_TRAIN),
                             (TEST_LABELS, test_labels, CANONICAL_TEST)):
        if arr.shape != (count,):
            raise IngestError(f"{name}: expected {count} labels, got {arr.shape[0]}")

    def scale(arr):
        return (arr.astype(np.float32) / 255.0)[..., None]

    return Dataset(scale(train), scale(test), digest.hexdigest())


@dataclass
class BatchSchedule:
    """One epoch's batching: a (n_batches, batch_size) index table over a
    fixed image array. Iteration yields NCHW float32 torch tensors."""

    images: np.ndarray
    indices: np.ndarray
    checksum: str
    epoch: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __iter__(self):
        for row in self.indices:
            yield self.batch(row)

    def batch(self, row: np.ndarray) -> torch.Tensor:
        arr = self.images[row].transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BatchSchedule):
            return NotImplemented
        return (self.checksum == other.checksum
                and self.epoch == other.epoch
                and np.array_equal(self.indices, other.indices))


def batch_schedule(dataset: Dataset, seed: int, batch_size: int, epoch: int,
                   split: str = "train", subset: int = 0) -> BatchSchedule:
    """Deterministic shuffled batching for one epoch; partial tail batch
    is dropped. ``subset`` > 0 restricts to the first ``subset`` images
    of the split before shuffling."""
    images = dataset.train_images if split == "train" else dataset.test_images
    n = images.shape[0]
    if subset > 0:
        n = min(n, subset)
    rng = numpy_stream(seed, "shuffle", dataset.checksum, split, str(epoch))
    perm = rng.permutation(n)
    n_batches = n // batch_size
    indices = perm[: n_batches * batch_size].reshape(n_batches, batch_size)
    return BatchSchedule(images=images, indices=indices,
                         checksum=dataset.checksum, epoch=epoch)


# 5x7 glyphs for the procedural fallback corpus. Rows are strings so the
# shapes stay reviewable.
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

_GLYPH_SCALE = 3  # 5x7 -> 15x21 on the 28x28 canvas


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    base = np.array([[c == "1" for c in row] for row in rows], dtype=np.float32)
    return np.kron(base, np.ones((_GLYPH_SCALE, _GLYPH_SCALE), dtype=np.float32))


def _box_blur(stack: np.ndarray) -> np.ndarray:
    padded = np.pad(stack, ((0, 0), (1, 1), (1, 1)), mode="constant")
    out = np.zeros_like(stack)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + stack.shape[1], dx:dx + stack.shape[2]]
    return out / 9.0


def synthesize_digit_images(count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``count`` random digits as uint8 (count, 28, 28) plus labels."""
    rng = numpy_stream(seed, "synthetic-digits")
    gh, gw = 7 * _GLYPH_SCALE, 5 * _GLYPH_SCALE
    digits = rng.integers(0, 10, size=count)
    off_y = rng.integers(0, IMAGE_SIDE - gh + 1, size=count)
    off_x = rng.integers(0, IMAGE_SIDE - gw + 1, size=count)
    amp = rng.uniform(0.6, 1.0, size=count).astype(np.float32)
    glyphs = {d: _glyph_array(d) for d in range(10)}

    canvas = np.zeros((count, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    # Group by (digit, offset) so placement is a single vectorized write.
    keys = digits * 10000 + off_y * 100 + off_x
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        d, oy, ox = int(key) // 10000, (int(key) // 100) % 100, int(key) % 100
        canvas[idx, oy:oy + gh, ox:ox + gw] = glyphs[d][None] * amp[idx, None, None]
    canvas = _box_blur(canvas)
    return (np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8), digits.astype(np.uint8)


def write_synthetic_corpus(out_dir, n_train: int = CANONICAL_TRAIN,
                           n_test: int = CANONICAL_TEST, seed: int = 0) -> None:
    """Write a full synthetic IDX corpus with the canonical file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, train_labels = synthesize_digit_images(n_train, seed)
    test, test_labels = synthesize_digit_images(n_test, seed + 1)
    write_idx_images(out_dir / TRAIN_IMAGES, train)
    write_idx_labels(out_dir / TRAIN_LABELS, train_labels)
    write_idx_images(out_dir / TEST_IMAGES, test)
    write_idx_labels(out_dir / TEST_LABELS, test_labels)
