import numpy as np
import pytest

from apn.augment import EVAL_SCALE, augment, augment_batch, center_crop, hflip, random_crop, resize
from apn.pyramid import ConfigError
from apn.rng import SplitMix64
from apn.synth import SyntheticSpec, synth_generate


@pytest.fixture(scope="module")
def small_spec():
    return SyntheticSpec(image_size=16, species=3, classes_per_species=2, samples_per_class=2, val_per_class=1)


class TestSynthetic:
    def test_shapes_and_balance(self, small_spec):
        tr, va = synth_generate(small_spec, seed=0)
        assert tr.images.shape == (12, 3, 16, 16) and tr.images.dtype == np.float32
        assert np.bincount(tr.labels).tolist() == [2] * 6
        assert len(va) == 6
        assert tr.coarse_of == [0, 0, 1, 1, 2, 2]
        assert tr.images.min() >= 0 and tr.images.max() <= 1

    def test_deterministic(self, small_spec):
        a, _ = synth_generate(small_spec, seed=3)
        b, _ = synth_generate(small_spec, seed=3)
        c, _ = synth_generate(small_spec, seed=4)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_splits_differ(self, small_spec):
        tr, va = synth_generate(small_spec, seed=0)
        assert not np.array_equal(tr.images[:6], va.images)

    @pytest.mark.parametrize(
        "kwargs", [{"species": 0}, {"species": 9}, {"classes_per_species": 5}, {"image_size": 4}, {"noise": -1}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SyntheticSpec(**kwargs)


class TestAugment:
    def test_flip_twice_is_identity(self, rng):
        img = rng.random((3, 5, 7)).astype(np.float32)
        assert np.array_equal(hflip(hflip(img)), img)

    def test_crop_of_padded_constant(self):
        img = np.ones((1, 6, 6), np.float32)
        out = random_crop(img, 0, 0, 2)
        # top-left offset shifts the image down-right by the padding
        assert out[:, :2].sum() == 0 and out[:, :, :2].sum() == 0
        assert np.all(out[:, 2:, 2:] == 1)
        assert np.array_equal(random_crop(img, 2, 2, 2), img)

    def test_train_reproducible(self, rng):
        imgs = rng.random((4, 3, 8, 8)).astype(np.float32)
        a = augment_batch(imgs, SplitMix64(11))
        b = augment_batch(imgs, SplitMix64(11))
        assert a.tobytes() == b.tobytes()
        assert a.shape == imgs.shape

    def test_eval_identity_at_unit_scale(self, rng):
        img = rng.random((3, 8, 8)).astype(np.float32)
        out = augment(img, SplitMix64(0), train=False)
        assert np.array_equal(out, img) and out is not img

    def test_eval_scale_keeps_size(self, rng):
        img = rng.random((3, 14, 14)).astype(np.float32)
        out = augment(img, SplitMix64(0), train=False, eval_scale=EVAL_SCALE)
        assert out.shape == img.shape

    def test_resize_constant(self):
        img = np.full((2, 5, 5), 0.25)
        assert np.allclose(resize(img, 9, 7), 0.25, atol=1e-12)

    def test_center_crop(self):
        img = np.arange(36.0).reshape(1, 6, 6)
        assert center_crop(img, 2, 2).ravel().tolist() == [14, 15, 20, 21]
