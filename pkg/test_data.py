import struct

import numpy as np
import pytest
from pydantic import ValidationError

from psn.data import (IMAGE_MAGIC, MNIST_FILES, TOY_SIZE, NormalizationStats, columnize, data_geometry,
                      decolumnize, load_csv_labels, load_data, load_idx_dataset, load_idx_images,
                      load_idx_labels, load_idx_pair, peek_idx_shape, resolve_data_spec, synth_toy_dataset,
                      write_csv_labels, write_idx_images, write_idx_labels)
from psn.errors import ContractError, DimensionError, IdxFormatError
from psn.models import DataSpec


@pytest.fixture
def images():
    return np.random.default_rng(5).integers(0, 256, size=(6, 4, 3), dtype=np.uint8)


@pytest.fixture
def idx_dir(tmp_path, images):
    """An MNIST-style directory with 6 train and 6 test images of 4x3 pixels"""
    labels = np.array([0, 1, 2, 0, 1, 2])
    for split in ("train", "test"):
        images_name, labels_name = MNIST_FILES[split]
        write_idx_images(tmp_path / images_name, images)
        write_idx_labels(tmp_path / labels_name, labels)
    return tmp_path


class TestColumnize:
    """Images to (W, N, H) column sequences"""

    def test_two_by_two(self):
        """[[a,b],[c,d]] -> X[0]=[a,c], X[1]=[b,d]"""
        batch = columnize(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.array([0]), num_classes=2)
        assert batch.inputs.data[:, 0, :].tolist() == [[1.0, 3.0], [2.0, 4.0]]
        assert (batch.time_steps, batch.num_samples, batch.channels) == (2, 1, 2)

    def test_bijection(self, images):
        """decolumnize inverts columnize"""
        batch = columnize(images, np.zeros(6), num_classes=2)
        assert np.array_equal(decolumnize(batch), images.astype(np.float32))

    def test_bijection_with_normalisation(self, images):
        """Normalisation is undone by decolumnize up to rounding"""
        batch = columnize(images, np.zeros(6), num_classes=2, normalize=True)
        assert np.allclose(decolumnize(batch), images, atol=1e-3)

    def test_external_statistics(self):
        """Stats passed in are applied as (x - mean) / std"""
        batch = columnize(np.full((1, 2, 2), 3.0), np.array([1]), num_classes=2,
                          normalize=NormalizationStats(mean=1.0, std=2.0))
        assert np.all(batch.inputs.data == 1.0)

    def test_empty_batch(self):
        """N=0 is a contract error"""
        with pytest.raises(ContractError):
            columnize(np.zeros((0, 2, 2)), np.zeros(0), num_classes=2)

    def test_wrong_rank(self):
        """Inputs must be (N, H, W)"""
        with pytest.raises(DimensionError):
            columnize(np.zeros((2, 2)), np.zeros(2), num_classes=2)

    def test_labels_out_of_range(self):
        """Labels must be below num_classes"""
        with pytest.raises(ValidationError):
            columnize(np.zeros((1, 2, 2)), np.array([3]), num_classes=2)

    def test_subset(self, images):
        """subset keeps the matching samples and labels"""
        batch = columnize(images, np.array([0, 1, 0, 1, 0, 1]), num_classes=2)
        part = batch.subset(np.array([1, 3]))
        assert part.labels.tolist() == [1, 1]
        assert np.array_equal(part.inputs.data, batch.inputs.data[:, [1, 3]])


class TestToyDataset:
    """Synthetic two-pulse temporal task"""

    def test_shapes_and_balance(self):
        """16x16 images give (16, N, 16) batches with balanced classes"""
        train, test = synth_toy_dataset(num_classes=4, samples_per_class=10, seed=0, test_samples_per_class=3)
        assert train.inputs.shape == (TOY_SIZE, 40, TOY_SIZE)
        assert test.inputs.shape == (TOY_SIZE, 12, TOY_SIZE)
        assert np.bincount(train.labels).tolist() == [10, 10, 10, 10]

    def test_deterministic(self):
        """The same seed gives bit-identical data"""
        first, _ = synth_toy_dataset(num_classes=3, samples_per_class=8, seed=7)
        second, _ = synth_toy_dataset(num_classes=3, samples_per_class=8, seed=7)
        assert np.array_equal(first.inputs.data, second.inputs.data)
        assert np.array_equal(first.labels, second.labels)

    def test_seeds_differ(self):
        """Different seeds give different data"""
        first, _ = synth_toy_dataset(samples_per_class=8, seed=1)
        second, _ = synth_toy_dataset(samples_per_class=8, seed=2)
        assert not np.array_equal(first.inputs.data, second.inputs.data)

    def test_gap_encodes_class(self):
        """The bottom pulse sits label + 1 columns after the top pulse"""
        train, _ = synth_toy_dataset(num_classes=5, samples_per_class=6, seed=3, normalize=False)
        raw = decolumnize(train)
        half = TOY_SIZE // 2
        for image, label in zip(raw, train.labels):
            top = np.flatnonzero(np.all(image[:half] == 1.0, axis=0))
            bottom = np.flatnonzero(np.all(image[half:] == 1.0, axis=0))
            assert bottom[0] - top[0] == label + 1

    def test_default_test_split(self):
        """Without an explicit size the test split holds a quarter per class"""
        _, test = synth_toy_dataset(num_classes=2, samples_per_class=8)
        assert test.num_samples == 4

    @pytest.mark.parametrize("classes", [1, 16])
    def test_class_count_bounds(self, classes):
        """Between 2 and 15 classes fit a 16-column image"""
        with pytest.raises(ContractError):
            synth_toy_dataset(num_classes=classes, samples_per_class=2)

    def test_load_data_toy(self):
        """A toy DataSpec goes through synth_toy_dataset"""
        train, test = load_data(DataSpec(num_classes=3, samples_per_class=4, test_samples_per_class=2))
        assert train.num_samples == 12 and test.num_samples == 6
        assert data_geometry(DataSpec()) == (TOY_SIZE, TOY_SIZE)


class TestIdx:
    """IDX containers and CSV labels"""

    def test_round_trip(self, tmp_path, images):
        """Written images and labels read back unchanged"""
        write_idx_images(tmp_path / "img", images)
        write_idx_labels(tmp_path / "lbl", np.array([3, 1, 4, 1, 5, 9]))
        assert np.array_equal(load_idx_images(tmp_path / "img"), images)
        assert load_idx_labels(tmp_path / "lbl").tolist() == [3, 1, 4, 1, 5, 9]

    def test_header_layout(self, tmp_path, images):
        """Big-endian magic 0x00000803 followed by the three sizes"""
        path = write_idx_images(tmp_path / "img", images)
        assert struct.unpack(">4I", path.read_bytes()[:16]) == (IMAGE_MAGIC, 6, 4, 3)
        assert peek_idx_shape(path) == (6, 4, 3)

    def test_truncated_payload(self, tmp_path, images):
        """A cut-short file reports the byte offset where data ran out"""
        path = write_idx_images(tmp_path / "img", images)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(IdxFormatError) as excinfo:
            load_idx_images(path)
        assert excinfo.value.offset == len(raw) - 5
        assert f"byte offset {len(raw) - 5}" in str(excinfo.value)

    def test_bad_magic(self, tmp_path):
        """Label files are not image files"""
        path = write_idx_labels(tmp_path / "lbl", np.array([1, 2]))
        with pytest.raises(IdxFormatError, match="bad magic"):
            load_idx_images(path)

    def test_truncated_header(self, tmp_path):
        """Fewer than four bytes cannot hold the magic number"""
        path = tmp_path / "tiny"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(IdxFormatError):
            load_idx_labels(path)

    def test_count_mismatch(self, tmp_path, images):
        """Images and labels must pair up"""
        write_idx_images(tmp_path / "img", images)
        write_idx_labels(tmp_path / "lbl", np.array([0, 1]))
        with pytest.raises(ContractError):
            load_idx_pair(tmp_path / "img", tmp_path / "lbl")

    def test_csv_labels(self, tmp_path):
        """A header row is skipped and integers are read from the first column"""
        path = write_csv_labels(tmp_path / "labels.csv", np.array([2, 0, 1]))
        assert load_csv_labels(path).tolist() == [2, 0, 1]

    def test_csv_bad_row(self, tmp_path):
        """A non-integer label after the header is a contract error"""
        path = tmp_path / "labels.csv"
        path.write_text("label\n1\nx\n")
        with pytest.raises(ContractError):
            load_csv_labels(path)

    def test_dataset_directory(self, idx_dir):
        """An MNIST-style directory yields (W, N, H) train/test batches"""
        train, test = load_idx_dataset(idx_dir)
        assert train.inputs.shape == (3, 6, 4) and test.inputs.shape == (3, 6, 4)
        assert train.metadata.num_classes == 3
        assert data_geometry(DataSpec(source=f"idx:{idx_dir}", num_classes=3)) == (3, 4)

    def test_class_count_detected(self, idx_dir):
        """An unset class count becomes one past the largest label"""
        assert resolve_data_spec(DataSpec(source=f"idx:{idx_dir}")).num_classes == 3

    def test_class_count_kept(self, idx_dir):
        """An explicit class count is left alone; toy defaults to 4"""
        assert resolve_data_spec(DataSpec(source=f"idx:{idx_dir}", num_classes=7)).num_classes == 7
        assert resolve_data_spec(DataSpec()).num_classes == 4

    def test_class_count_needs_labels(self, tmp_path):
        """Empty label files leave nothing to count"""
        write_csv_labels(tmp_path / "train-labels.csv", np.zeros(0))
        write_csv_labels(tmp_path / "t10k-labels.csv", np.zeros(0))
        with pytest.raises(ContractError):
            resolve_data_spec(DataSpec(source=f"idx:{tmp_path}"))

    def test_csv_fallback(self, idx_dir):
        """CSV labels replace a missing IDX label file"""
        (idx_dir / MNIST_FILES["test"][1]).unlink()
        write_csv_labels(idx_dir / "t10k-labels.csv", np.array([2, 2, 2, 1, 1, 1]))
        _, test = load_idx_dataset(idx_dir, num_classes=3)
        assert test.labels.tolist() == [2, 2, 2, 1, 1, 1]

    def test_missing_directory(self, tmp_path):
        """A missing directory is a contract error"""
        with pytest.raises(ContractError):
            load_idx_dataset(tmp_path / "nope")
