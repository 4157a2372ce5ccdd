"""
データ入出力・分割・フェーズ別ローダーのテスト
"""

import numpy as np
import pytest

from constants import DataConstants
from data_io import (DataConfig, PhaseLoader, build_split, build_test_sets, load_cifar100, load_datasets,
                     make_synthetic, parse_cifar100, serialize_cifar100)
from error_handler import ConfigurationError, DataError, ExemplarAccessError, ParseError

RECORD = DataConstants.CIFAR_RECORD_BYTES


def cifar_fixture() -> bytes:
    """手組みの 3 レコード"""
    rng = np.random.default_rng(7)
    records = []
    for coarse, fine in [(0, 0), (19, 99), (5, 42)]:
        pixels = rng.integers(0, 256, size=DataConstants.CIFAR_PIXEL_BYTES, dtype=np.uint8)
        records.append(bytes([coarse, fine]) + pixels.tobytes())
    return b"".join(records)


class TestCifarParser:
    def test_round_trip_is_bit_exact(self):
        data = cifar_fixture()
        images = parse_cifar100(data)
        assert [(im.coarse_label, im.fine_label) for im in images] == [(0, 0), (19, 99), (5, 42)]
        assert images[0].pixels.shape == (3, 32, 32)
        assert serialize_cifar100(images) == data

    def test_pixel_scaling(self):
        data = bytes([1, 2]) + bytes([255]) + bytes(RECORD - 3)
        image = parse_cifar100(data)[0]
        assert image.pixels[0, 0, 0] == 1.0
        assert image.pixels[2, 31, 31] == 0.0

    def test_truncated_input_reports_offset(self):
        data = cifar_fixture()[:2 * RECORD + 100]
        with pytest.raises(ParseError) as info:
            parse_cifar100(data)
        assert info.value.offset == 2 * RECORD

    def test_label_out_of_range_reports_offset(self):
        data = bytearray(cifar_fixture())
        data[RECORD + 1] = 100
        with pytest.raises(ParseError) as info:
            parse_cifar100(bytes(data))
        assert info.value.offset == RECORD

    def test_load_from_directory(self, tmp_path):
        (tmp_path / DataConstants.CIFAR_TRAIN_FILE).write_bytes(cifar_fixture())
        dataset = load_cifar100(str(tmp_path), "train")
        assert len(dataset) == 3
        assert dataset.labels.tolist() == [0, 99, 42]
        assert dataset.num_classes == 100

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar100(str(tmp_path), "test")


class TestSplit:
    def test_phase_sizes(self):
        split = build_split(10, base=4, phases=3, seed=0)
        assert [len(c) for c in split.phase_classes] == [4, 2, 2, 2]
        assert sorted(split.class_order) == list(range(10))
        assert split.seen_classes(2) == (0, 1, 2, 3, 4, 5)

    def test_seeded_order(self):
        assert build_split(10, 4, 3, seed=3).class_order == build_split(10, 4, 3, seed=3).class_order
        assert build_split(10, 4, 3, seed=3).class_order != build_split(10, 4, 3, seed=4).class_order

    def test_not_divisible(self):
        with pytest.raises(ConfigurationError):
            build_split(10, base=5, phases=2, seed=0)

    def test_remap(self):
        dataset = make_synthetic(4, 3, (3, 4, 4), seed=0)
        split = build_split(dataset, base=2, phases=2, seed=1)
        remapped = split.remap(dataset)
        np.testing.assert_array_equal(np.array(split.class_order)[remapped.labels], dataset.labels)
        np.testing.assert_array_equal(remapped.original_labels, dataset.labels)


class TestPhaseLoader:
    @pytest.fixture
    def dataset(self):
        return make_synthetic(4, 5, (3, 4, 4), seed=0)

    def test_holds_only_phase_classes(self, dataset):
        loader = PhaseLoader(dataset, [2, 3], phase=2)
        assert len(loader) == 10
        _, _, labels = loader.full()
        assert set(labels.tolist()) == {2, 3}

    def test_request_outside_phase(self, dataset):
        loader = PhaseLoader(dataset, [2, 3], phase=2)
        with pytest.raises(ExemplarAccessError):
            loader.request([0])

    def test_batches_cover_phase_once(self, dataset):
        loader = PhaseLoader(dataset, [0, 1], phase=1)
        seen = np.concatenate([ids for ids, _, _ in loader.iter_batches(3, np.random.default_rng(0))])
        assert sorted(seen.tolist()) == sorted(loader.sample_ids.tolist())
        assert loader.touched_ids == set(loader.sample_ids.tolist())

    def test_empty_phase(self, dataset):
        with pytest.raises(DataError):
            PhaseLoader(dataset, [7], phase=3)

    def test_test_sets_are_cumulative(self, dataset):
        split = build_split(dataset, base=2, phases=2, seed=0)
        test_sets = build_test_sets(split.remap(dataset), split, 2)
        assert len(test_sets) == 2
        assert set(test_sets[1][1].tolist()) == {2}


class TestSynthetic:
    def test_deterministic(self):
        a = make_synthetic(3, 4, (3, 6, 6), seed=5)
        b = make_synthetic(3, 4, (3, 6, 6), seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_range_and_balance(self):
        dataset = make_synthetic(3, 4, (3, 6, 6), seed=5)
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
        assert np.bincount(dataset.labels).tolist() == [4, 4, 4]

    def test_train_and_test_differ(self):
        config = DataConfig(classes=3, per_class=4, test_per_class=2, image_shape=(3, 6, 6), base=1, phases=2)
        train, test = load_datasets(config, seed=0)
        assert len(train) == 12 and len(test) == 6

    def test_cifar_source_requires_cifar_shape(self):
        with pytest.raises(ConfigurationError):
            DataConfig(source="cifar100", image_shape=(3, 16, 16))
