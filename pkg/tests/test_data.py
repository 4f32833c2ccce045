import struct

import numpy as np
import pytest

from rtlab import data
from rtlab.errors import ConfigError, ContractError, ParseError


class TestSynthBlobs:
    def test_same_seed_identical(self):
        a = data.synth_blobs(50, 6, 3, 4.0, seed=1)
        b = data.synth_blobs(50, 6, 3, 4.0, seed=1)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_balanced_labels(self):
        ds = data.synth_blobs(103, 8, 5, 2.0, seed=0)
        counts = np.bincount(ds.labels, minlength=5)
        assert counts.max() - counts.min() <= 1
        assert counts.sum() == 103

    def test_pairwise_mean_distance(self):
        K, sep = 4, 7.5
        ds = data.synth_blobs(4000, 10, K, sep, seed=3)
        means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(K)])
        for i in range(K):
            for j in range(i + 1, K):
                d = np.linalg.norm(means[i] - means[j])
                assert abs(d - sep) < 0.5  # sample noise around the exact target

    def test_zero_separation_is_chance_level(self):
        ds = data.synth_blobs(3000, 6, 3, 0.0, seed=4)
        means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(3)])
        pred = np.argmin(
            ((ds.inputs[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1
        )
        acc = (pred == ds.labels).mean()
        assert abs(acc - 1 / 3) < 0.05

    def test_wide_separation_nearest_mean_oracle(self):
        ds = data.synth_blobs(1000, 8, 4, 20.0, seed=5)
        means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(4)])
        pred = np.argmin(
            ((ds.inputs[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1
        )
        assert (pred == ds.labels).mean() >= 0.99

    def test_preconditions(self):
        with pytest.raises(ContractError):
            data.synth_blobs(1, 4, 2, 1.0, 0)
        with pytest.raises(ConfigError):
            data.synth_blobs(10, 2, 3, 1.0, 0)

    def test_image_shaping(self):
        ds = data.synth_blobs(12, 36, 3, 2.0, seed=6, shape=(1, 6, 6))
        assert ds.inputs.shape == (12, 1, 6, 6)

    def test_splits_share_means_and_train_stats(self):
        tr, te = data.make_blob_splits(400, 200, 8, 4, 6.0, seed=7)
        assert tr.split == "train" and te.split == "test"
        assert tr.stats is te.stats or np.array_equal(tr.stats["mean"], te.stats["mean"])
        # train split standardized against itself
        assert np.abs(tr.inputs.mean(axis=0)).max() < 1e-9
        assert np.abs(tr.inputs.std(axis=0) - 1.0).max() < 1e-9
        # same class structure: per-class means of both splits line up
        for c in range(4):
            mt = tr.inputs[tr.labels == c].mean(axis=0)
            me = te.inputs[te.labels == c].mean(axis=0)
            assert np.linalg.norm(mt - me) < 1.0


class TestSynthDigits:
    def test_shape_and_range(self):
        ds = data.synth_digits(40, seed=0)
        assert ds.inputs.shape == (40, 1, 14, 14)
        assert ds.k == 10
        assert ds.labels.min() >= 0 and ds.labels.max() <= 9

    def test_same_seed_identical(self):
        a = data.synth_digits(30, seed=5)
        b = data.synth_digits(30, seed=5)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_seeds_differ(self):
        a = data.synth_digits(30, seed=1)
        b = data.synth_digits(30, seed=2)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_classes_are_distinct_templates(self):
        # class-mean images should separate far beyond the pixel noise floor
        ds = data.synth_digits(2000, seed=7)
        means = np.stack([ds.inputs[ds.labels == c, 0].mean(axis=0) for c in range(10)])
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.linalg.norm(means[i] - means[j]) > 0.5

    def test_class_means_recover_labels_beyond_chance(self):
        # jitter blurs the class means but they stay discriminative
        ds = data.synth_digits(400, seed=3)
        flat = ds.inputs[:, 0].reshape(ds.n, -1)
        means = np.stack([flat[ds.labels == c].mean(axis=0) for c in range(10)])
        pred = np.argmin(((flat[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
        assert (pred == ds.labels).mean() > 0.4

    def test_split_standardization_is_global(self):
        train, test = data.make_digit_splits(600, 200, seed=0)
        assert abs(train.inputs.mean()) < 1e-12
        assert abs(train.inputs.std() - 1.0) < 1e-12
        assert train.stats is not None and test.stats == train.stats
        assert test.split == "test"

    def test_split_determinism(self):
        a_tr, a_te = data.make_digit_splits(100, 50, seed=9)
        b_tr, b_te = data.make_digit_splits(100, 50, seed=9)
        assert np.array_equal(a_tr.inputs, b_tr.inputs)
        assert np.array_equal(a_te.inputs, b_te.inputs)


class TestNoiseInputs:
    def test_moments(self):
        ds = data.gaussian_noise_inputs(200, (1, 24, 24), sigma=1.5, seed=0)
        n_dim = ds.inputs.size
        assert n_dim >= 1e5
        assert abs(ds.inputs.mean()) < 3 * 1.5 / np.sqrt(n_dim)
        assert abs(ds.inputs.std() - 1.5) / 1.5 < 0.05

    def test_seeds_differ(self):
        a = data.gaussian_noise_inputs(5, (3,), 1.0, seed=1)
        b = data.gaussian_noise_inputs(5, (3,), 1.0, seed=2)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_sigma_positive(self):
        with pytest.raises(ContractError):
            data.gaussian_noise_inputs(5, (3,), 0.0, seed=0)


class TestSubsample:
    def test_full_size_is_permutation(self):
        ds = data.synth_blobs(40, 5, 2, 1.0, seed=8)
        sub = data.subsample(ds, 40, seed=9)
        assert sorted(map(tuple, sub.inputs)) == sorted(map(tuple, ds.inputs))

    def test_bounds(self):
        ds = data.synth_blobs(10, 5, 2, 1.0, seed=0)
        with pytest.raises(ContractError):
            data.subsample(ds, 0, seed=0)
        with pytest.raises(ContractError):
            data.subsample(ds, 11, seed=0)

    def test_stratified_two_class_exact(self):
        ds = data.synth_blobs(100, 5, 2, 1.0, seed=10)
        sub = data.subsample(ds, 10, seed=11, stratified=True)
        counts = np.bincount(sub.labels, minlength=2)
        assert counts.tolist() == [5, 5]

    def test_stratified_within_one_of_proportional(self):
        ds = data.synth_blobs(91, 6, 3, 1.0, seed=12)
        sub = data.subsample(ds, 20, seed=13, stratified=True)
        counts = np.bincount(sub.labels, minlength=3)
        for c in range(3):
            exact = 20 * np.sum(ds.labels == c) / 91
            assert abs(counts[c] - exact) <= 1


def write_idx_images(path, images):
    n, r, c = images.shape
    path.write_bytes(struct.pack(">IIII", data.IDX_IMAGE_MAGIC, n, r, c) + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", data.IDX_LABEL_MAGIC, len(labels)) + bytes(labels))


class TestLoaders:
    def test_idx_hand_fixture(self, tmp_path):
        img = tmp_path / "img.idx"
        lab = tmp_path / "lab.idx"
        write_idx_images(img, np.arange(8).reshape(2, 2, 2))
        write_idx_labels(lab, [0, 1])
        ds = data.load_binary_images(img, "idx", labels_path=lab, apply_standardization=False)
        assert ds.inputs.shape == (2, 1, 2, 2)
        assert np.allclose(ds.inputs.ravel(), np.arange(8) / 255.0)
        assert ds.labels.tolist() == [0, 1]

    def test_idx_truncated_names_missing_bytes(self, tmp_path):
        img = tmp_path / "img.idx"
        full = struct.pack(">IIII", data.IDX_IMAGE_MAGIC, 2, 2, 2) + bytes(8)
        img.write_bytes(full[:-3])
        with pytest.raises(ParseError, match="3 bytes missing"):
            data.load_binary_images(img, "idx")

    def test_idx_bad_magic(self, tmp_path):
        img = tmp_path / "img.idx"
        img.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 1, 1) + bytes(1))
        with pytest.raises(ParseError, match="magic"):
            data.load_binary_images(img, "idx")

    def test_cifar_label_out_of_range(self, tmp_path):
        f = tmp_path / "batch.bin"
        rec = bytes([11]) + bytes(3072)
        f.write_bytes(rec)
        with pytest.raises(ParseError, match="out of range"):
            data.load_binary_images(f, "cifar_bin")

    def test_cifar_round_trip_and_downsample(self, tmp_path):
        f = tmp_path / "batch.bin"
        rng = np.random.default_rng(0)
        pix = rng.integers(0, 256, size=(2, 3072), dtype=np.uint8)
        recs = b"".join(bytes([i]) + pix[i].tobytes() for i in range(2))
        f.write_bytes(recs)
        ds = data.load_binary_images(f, "cifar_bin", apply_standardization=False)
        assert ds.inputs.shape == (2, 3, 32, 32)
        assert ds.labels.tolist() == [0, 1]
        small = data.load_binary_images(f, "cifar_bin", downsample=2, apply_standardization=False)
        assert small.inputs.shape == (2, 3, 16, 16)
        block = ds.inputs[:, :, :2, :2].mean(axis=(2, 3))
        assert np.allclose(small.inputs[:, :, 0, 0], block)

    def test_cifar_truncated(self, tmp_path):
        f = tmp_path / "batch.bin"
        f.write_bytes(bytes(3073 + 100))
        with pytest.raises(ParseError, match=f"{3073 - 100} bytes missing"):
            data.load_binary_images(f, "cifar_bin")

    def test_standardization_applied(self, tmp_path):
        f = tmp_path / "batch.bin"
        rng = np.random.default_rng(1)
        recs = b"".join(
            bytes([0]) + rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes()
            for _ in range(8)
        )
        f.write_bytes(recs)
        ds = data.load_binary_images(f, "cifar_bin")
        assert abs(ds.inputs.mean()) < 1e-9


class TestAugment:
    def test_shape_preserved(self):
        x = np.random.default_rng(0).normal(size=(5, 3, 8, 8))
        out = data.augment(x, "flip_padcrop4", seed=1)
        assert out.shape == x.shape

    def test_double_flip_is_identity(self):
        x = np.random.default_rng(1).normal(size=(4, 1, 6, 6))
        assert np.array_equal(data.hflip(data.hflip(x)), x)

    def test_identity_seed_exists(self):
        x = np.random.default_rng(2).normal(size=(1, 1, 5, 5))
        found = False
        for seed in range(5000):
            rng = np.random.default_rng(seed)
            flip = rng.random(1) < 0.5
            off = rng.integers(0, 9, size=(1, 2))
            if not flip[0] and off[0, 0] == 4 and off[0, 1] == 4:
                found = True
                out = data.augment(x, "flip_padcrop4", seed=seed)
                assert np.array_equal(out, x)
                break
        assert found

    def test_non_image_rejected(self):
        with pytest.raises(ContractError):
            data.augment(np.zeros((3, 10)), "flip_padcrop4", seed=0)

    def test_offset_crop_hand_value(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 5.0
        out = data.padcrop(x, np.array([[4, 4]]))
        assert np.array_equal(out, x)
        shifted = data.padcrop(x, np.array([[5, 4]]))
        assert shifted[0, 0, 0, 1] == 5.0

    def test_immutability(self):
        ds = data.synth_blobs(10, 4, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            ds.inputs[0, 0] = 99.0
