import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfpnet.errors import ConfigError
from mfpnet.phantom import (ANAL_CANAL, FEMORAL_LEFT, FEMORAL_RIGHT, RECTUM, AugmentConfig, AugmentDraw, PhantomSpec,
                            apply_augment, augment, draw_augment, generate_dataset, generate_phantom, load_case,
                            make_split, normalize, read_manifest)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(seed=3))


class TestGenerate:
    def test_deterministic(self, phantom):
        image, labels = generate_phantom(PhantomSpec(seed=3))
        assert image.tobytes() == phantom[0].tobytes()
        assert labels.voxels.tobytes() == phantom[1].voxels.tobytes()

    def test_all_ids_present(self, phantom):
        assert set(np.unique(phantom[1].voxels)) == {0, 1, 2, 3, 4, 5}

    def test_canal_and_rectum_disjoint(self, phantom):
        v = phantom[1].voxels
        assert not np.any((v == ANAL_CANAL) & (v == RECTUM))
        assert (v == ANAL_CANAL).any() and (v == RECTUM).any()

    def test_intensity_range(self, phantom):
        image = phantom[0]
        assert image.dtype == np.float32 and image.min() >= 0.0 and image.max() <= 1.0

    def test_seeds_differ(self, phantom):
        assert generate_phantom(PhantomSpec(seed=4))[0].tobytes() != phantom[0].tobytes()

    def test_too_small(self):
        with pytest.raises(ConfigError):
            generate_phantom(PhantomSpec(dims=(8, 64, 64)))

    def test_throughput(self):
        t0 = time.perf_counter()
        for s in range(3):
            generate_phantom(PhantomSpec(seed=s, dims=(16, 128, 128)))
        assert (time.perf_counter() - t0) / 3 <= 1.0


def random_slice(seed, n=32):
    rng = np.random.default_rng(seed)
    image = rng.random((n, n)).astype(np.float32)
    label = rng.integers(0, 6, (n, n)).astype(np.int64)
    return image, label


class TestAugment:
    def test_disabled_is_identity(self):
        image, label = random_slice(0)
        a, b = augment(image, label, np.random.default_rng(1), AugmentConfig.disabled())
        assert np.array_equal(a, image) and np.array_equal(b, label)

    def test_flip_is_involution(self):
        image, label = random_slice(1)
        cfg = AugmentConfig(mirror_pairs=((FEMORAL_LEFT, FEMORAL_RIGHT),))
        draw = AugmentDraw(flip=True)
        once = apply_augment(image, label, draw, cfg)
        twice = apply_augment(*once, draw, cfg)
        assert np.array_equal(twice[0], image) and np.array_equal(twice[1], label)

    def test_flip_swaps_mirrored_organs(self):
        label = np.zeros((4, 4), np.int64)
        label[:, 0] = FEMORAL_LEFT
        cfg = AugmentConfig(mirror_pairs=((FEMORAL_LEFT, FEMORAL_RIGHT),))
        _, out = apply_augment(np.zeros((4, 4), np.float32), label, AugmentDraw(flip=True), cfg)
        assert np.all(out[:, -1] == FEMORAL_RIGHT) and not np.any(out == FEMORAL_LEFT)

    @pytest.mark.parametrize("angle", [5.0, -5.0])
    def test_max_rotation_keeps_label_set(self, angle, phantom):
        label = phantom[1].voxels[8].astype(np.int64)
        _, out = apply_augment(phantom[0][8], label, AugmentDraw(angle=angle), AugmentConfig())
        assert set(np.unique(out)) == set(np.unique(label))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_labels_stay_a_subset(self, seed):
        image, label = random_slice(seed, 16)
        _, out = augment(image, label, np.random.default_rng(seed), AugmentConfig(rotation_prob=1, elastic_prob=1))
        assert set(np.unique(out)) <= set(np.unique(label))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_shared_transform(self, seed):
        # a coordinate-index image goes through the image path with nearest sampling
        n = 16
        index = np.arange(n * n).reshape(n, n)
        cfg = AugmentConfig(rotation_prob=1, elastic_prob=1, contrast_prob=0)
        draw = draw_augment(np.random.default_rng(seed), cfg)
        _, moved_label = apply_augment(np.zeros((n, n), np.float32), index, draw, cfg)
        image = np.zeros((n, n), np.float32)
        image.flat[:] = index.ravel() % 7 == 0
        moved_image, _ = apply_augment(image, index, draw, cfg)
        # wherever the label carries a source index whose pixel was on, the image sees signal there
        on = (moved_label % 7 == 0)
        assert np.all(moved_image[on] > 0)

    def test_contrast_touches_image_only(self):
        image, label = random_slice(2)
        a, b = apply_augment(image, label, AugmentDraw(contrast=1.1), AugmentConfig())
        assert np.array_equal(b, label)
        assert a.mean() == pytest.approx(image.mean(), abs=1e-5) and a.std() > image.std()

    def test_rejects_non_square(self):
        with pytest.raises(ConfigError):
            augment(np.zeros((4, 5)), np.zeros((4, 5)), np.random.default_rng(0))


class TestNormalize:
    def test_constant(self):
        assert np.all(normalize(np.full((8, 8), 3.0)) == 0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_moments_and_idempotence(self, seed):
        x = np.random.default_rng(seed).normal(3.0, 2.0, (16, 16))
        y = normalize(x)
        assert abs(float(y.mean())) < 1e-6
        assert abs(float(y.var()) - 1.0) < 1e-4
        assert np.allclose(normalize(y), y, atol=1e-6)


class TestSplit:
    @given(st.integers(3, 90), st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_partition(self, n, seed):
        ids = [f"c{i}" for i in range(n)]
        s = make_split(ids, seed=seed)
        allocated = s["train"] + s["val"] + s["test"]
        assert sorted(allocated) == sorted(ids) and len(set(allocated)) == n
        for name, share in (("train", 0.66), ("val", 0.11), ("test", 0.23)):
            assert abs(len(s[name]) - share * n) <= 1 + 1e-9 or (name == "val" and len(s[name]) == 1)

    def test_duplicates(self):
        with pytest.raises(ConfigError):
            make_split(["a", "a", "b"])

    def test_dataset_on_disk(self, tmp_path):
        split = generate_dataset(tmp_path, 4, dims=(16, 32, 32), seed=7)
        assert read_manifest(tmp_path / "manifest.csv") == split
        image, labels = load_case(tmp_path, split["train"][0])
        assert image.shape == (16, 32, 32) and labels.spacing == (3.0, 1.5, 1.5)
