import gzip
import struct

import numpy as np
import pytest

from twsc.data import (IMAGE_MAGIC, LABEL_MAGIC, TEST_IMAGES, TEST_LABELS,
                       TRAIN_IMAGES, TRAIN_LABELS, BatchSchedule, Dataset,
                       batch_schedule, ingest_mnist, parse_idx_images,
                       parse_idx_labels, synthesize_digit_images,
                       write_idx_images, write_idx_labels)
from twsc.errors import IngestError


def _image_blob(images: np.ndarray) -> bytes:
    n, r, c = images.shape
    return struct.pack(">iiii", IMAGE_MAGIC, n, r, c) + images.tobytes()


def test_idx_round_trip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(3))
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5).astype(np.uint8)
    write_idx_images(tmp_path / "imgs", images)
    write_idx_labels(tmp_path / "labs", labels)
    back = parse_idx_images((tmp_path / "imgs").read_bytes(), "imgs")
    assert np.array_equal(back, images)
    assert np.array_equal(parse_idx_labels((tmp_path / "labs").read_bytes(), "labs"), labels)


def test_image_parser_rejects_label_magic():
    blob = struct.pack(">iiii", LABEL_MAGIC, 1, 28, 28) + bytes(28 * 28)
    with pytest.raises(IngestError) as err:
        parse_idx_images(blob, "weird-file")
    assert "weird-file" in str(err.value)
    assert "magic" in str(err.value)


def test_image_parser_rejects_truncation():
    images = np.zeros((3, 28, 28), dtype=np.uint8)
    blob = _image_blob(images)[:-100]
    with pytest.raises(IngestError) as err:
        parse_idx_images(blob, "short")
    assert "size mismatch" in str(err.value)


def test_ingest_canonical_corpus(corpus_dir):
    ds = ingest_mnist(corpus_dir)
    assert ds.train_images.shape == (60000, 28, 28, 1)
    assert ds.test_images.shape == (10000, 28, 28, 1)
    assert ds.train_images.dtype == np.float32
    assert float(ds.train_images.min()) >= 0.0
    assert float(ds.train_images.max()) <= 1.0
    # Rendered digits are not blank.
    assert float(ds.train_images.max()) > 0.5
    assert len(ds.checksum) == 64


def test_ingest_names_missing_file(tmp_path):
    with pytest.raises(IngestError) as err:
        ingest_mnist(tmp_path)
    assert TRAIN_IMAGES in str(err.value)


def test_ingest_rejects_wrong_split_size(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    small = rng.integers(0, 256, size=(100, 28, 28), dtype=np.uint8)
    write_idx_images(tmp_path / TRAIN_IMAGES, small)
    write_idx_labels(tmp_path / TRAIN_LABELS, np.zeros(100, dtype=np.uint8))
    write_idx_images(tmp_path / TEST_IMAGES, small)
    write_idx_labels(tmp_path / TEST_LABELS, np.zeros(100, dtype=np.uint8))
    with pytest.raises(IngestError) as err:
        ingest_mnist(tmp_path)
    assert TRAIN_IMAGES in str(err.value)
    assert "60000" in str(err.value)


def test_ingest_reads_gzipped_files(tmp_path, corpus_dir):
    for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        blob = (corpus_dir / name).read_bytes()
        with gzip.open(tmp_path / (name + ".gz"), "wb") as fh:
            fh.write(blob)
    ds = ingest_mnist(tmp_path)
    ref = ingest_mnist(corpus_dir)
    assert np.array_equal(ds.train_images, ref.train_images)
    assert ds.checksum == ref.checksum


def test_synthetic_images_cover_all_digits():
    images, labels = synthesize_digit_images(500, seed=5)
    assert images.shape == (500, 28, 28)
    assert images.dtype == np.uint8
    assert set(np.unique(labels)) == set(range(10))
    # Distinct draws produce distinct pictures.
    assert not np.array_equal(images[0], images[1])


def test_batch_schedule_is_deterministic(small_dataset):
    a = batch_schedule(small_dataset, seed=3, batch_size=32, epoch=2)
    b = batch_schedule(small_dataset, seed=3, batch_size=32, epoch=2)
    assert a == b
    assert np.array_equal(a.indices, b.indices)
    c = batch_schedule(small_dataset, seed=3, batch_size=32, epoch=3)
    assert not np.array_equal(a.indices, c.indices)
    d = batch_schedule(small_dataset, seed=4, batch_size=32, epoch=2)
    assert not np.array_equal(a.indices, d.indices)


def test_batch_schedule_drops_partial_tail(small_dataset):
    sched = batch_schedule(small_dataset, seed=0, batch_size=100, epoch=1)
    assert len(sched) == 5
    assert sched.indices.shape == (5, 100)
    flat = sched.indices.ravel()
    assert len(set(flat.tolist())) == flat.size


def test_batch_schedule_subset_restricts_pool(small_dataset):
    sched = batch_schedule(small_dataset, seed=0, batch_size=16, epoch=1, subset=64)
    assert len(sched) == 4
    assert int(sched.indices.max()) < 64


def test_batches_are_nchw_float32(small_dataset):
    sched = batch_schedule(small_dataset, seed=0, batch_size=8, epoch=1)
    batch = next(iter(sched))
    assert batch.shape == (8, 1, 28, 28)
    assert batch.dtype.is_floating_point
    ref = small_dataset.train_images[sched.indices[0]]
    assert np.allclose(batch.numpy().transpose(0, 2, 3, 1), ref)


def test_schedule_equality_is_value_based(small_dataset):
    one = batch_schedule(small_dataset, seed=1, batch_size=16, epoch=1)
    two = BatchSchedule(images=small_dataset.train_images,
                        indices=one.indices.copy(),
                        checksum=small_dataset.checksum, epoch=1)
    assert one == two
