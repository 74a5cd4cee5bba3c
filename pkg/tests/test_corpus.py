import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apn.corpus import (
    SPECIES,
    ImageRecord,
    area_resize,
    dedup,
    dedup_records,
    hamming,
    perceptual_hash,
    reconcile,
    species_report,
)


class TestHash:
    def test_constant_image_is_zero(self):
        assert perceptual_hash(np.full((16, 16), 0.7)) == 0
        assert perceptual_hash(np.full((9, 13, 3), 200, np.uint8)) == 0

    def test_half_black_half_white(self):
        img = np.zeros((16, 16))
        img[:, 8:] = 1.0
        h = perceptual_hash(img)
        assert bin(h).count("1") == 32
        # right half set in every row, first cell in the most significant bit
        assert h == int("00001111" * 8, 2)

    def test_too_small(self):
        with pytest.raises(ValueError):
            perceptual_hash(np.zeros((7, 20)))

    def test_area_resize_uneven(self):
        img = np.arange(100.0).reshape(10, 10)
        out = area_resize(img, 8, 8)
        assert out.shape == (8, 8)
        assert out.mean() == pytest.approx(img.mean(), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (12, 10), elements=st.floats(0, 1, allow_nan=False)),
        st.floats(0.01, 100, allow_nan=False),
    )
    def test_brightness_invariance(self, img, scale):
        h = perceptual_hash(img)
        # powers of two scale exactly in binary floating point
        assert perceptual_hash(img * 4.0) == h
        cells = area_resize(img, 8, 8).ravel()
        if np.min(np.abs(cells - cells.mean())) > 1e-9 * max(1.0, np.abs(cells).max()):
            assert perceptual_hash(img * scale) == h

    def test_hamming(self):
        assert hamming(0b1011, 0b0001) == 2
        assert hamming(2**64 - 1, 0) == 64


class TestDedup:
    def test_within_threshold_removed(self):
        a = 0
        b = 0b11  # distance 2 from a
        c = (1 << 12) - 1  # distance 12 from a, 10 from b
        res = dedup([("a", a), ("b", b), ("c", c)], threshold=5)
        assert res.kept == ["a", "c"]
        assert res.duplicates == [("a", "b", 2)]

    def test_threshold_zero_exact_only(self):
        res = dedup([("a", 5), ("b", 5), ("c", 4)], threshold=0)
        assert res.kept == ["a", "c"] and res.duplicates == [("a", "b", 0)]

    def test_threshold_64_keeps_first(self):
        res = dedup([(str(i), i * 7919) for i in range(10)], threshold=64)
        assert res.kept == ["0"] and len(res.duplicates) == 9

    def test_reports_closest_kept(self):
        res = dedup([("a", 0), ("b", 0b111111), ("c", 0b111110)], threshold=5)
        assert res.kept == ["a", "b"]
        assert res.duplicates == [("b", "c", 1)]

    @pytest.mark.parametrize("t", [-1, 65])
    def test_bad_threshold(self, t):
        with pytest.raises(ValueError):
            dedup([], threshold=t)

    @pytest.mark.parametrize("seed", range(10))
    def test_kept_set_is_separated(self, seed):
        rng = np.random.default_rng(seed)
        base = [int(v) for v in rng.integers(0, 2**63, 5)]
        hashes = []
        for i in range(60):
            h = base[i % 5]
            for bit in rng.integers(0, 64, int(rng.integers(0, 8))):
                h ^= 1 << int(bit)
            hashes.append((f"r{i}", h))
        res = dedup(hashes, threshold=5)
        table = dict(hashes)
        for x, y in itertools.combinations(res.kept, 2):
            assert hamming(table[x], table[y]) > 5
        assert len(res.kept) + len(res.duplicates) == 60
        for keeper, removed, d in res.duplicates:
            assert d == hamming(table[keeper], table[removed]) <= 5

    def test_records(self, rng):
        img = rng.random((32, 32, 3))
        recs = [ImageRecord("a", img), ImageRecord("b", img * 0.5), ImageRecord("c", rng.random((32, 32, 3)))]
        res = dedup_records(recs)
        assert res.kept == ["a", "c"]

    def test_empty_record_rejected(self):
        with pytest.raises(ValueError):
            ImageRecord("x", np.zeros((0, 0)))


class TestReconcile:
    @pytest.mark.parametrize("labels", list(itertools.product("xyz", repeat=2)) + list(itertools.product("xyz", repeat=3)))
    def test_exhaustive(self, labels):
        out = reconcile(labels)
        counts = {lbl: labels.count(lbl) for lbl in labels}
        majority = [lbl for lbl, n in counts.items() if n >= 2]
        if majority:
            assert out.status == "accepted" and out.label == majority[0]
        elif len(labels) == 2:
            assert out.status == "pending" and out.label is None
        else:
            assert out.status == "dropped" and out.label is None

    @pytest.mark.parametrize("labels", [("a", "b", "a"), ("c", "a", "b"), ("b", "b")])
    def test_permutation_invariant(self, labels):
        outs = {reconcile(p) for p in itertools.permutations(labels)}
        assert len(outs) == 1

    @pytest.mark.parametrize("labels", [(), ("a",), ("a", "a", "a", "a")])
    def test_label_count(self, labels):
        with pytest.raises(ValueError):
            reconcile(labels)


class TestSpeciesReport:
    def test_empty(self):
        rep = species_report([])
        assert rep.classes_per_species == {} and rep.images_per_class == {} and rep.below_floor == []

    def test_counts_and_floor(self):
        rows = []
        for k in range(42):
            n = 20 if k % 2 else 10
            rows += [(f"img{k}_{i}", f"fs{k}", "Fruits & Seeds") for i in range(n)]
        rows += [(f"r{i}", "ginseng", "Rhizome") for i in range(14)]
        rep = species_report(rows, floor=14)
        assert rep.classes_per_species == {"Fruits & Seeds": 42, "Rhizome": 1}
        assert len(rep.below_floor) == 21 and "ginseng" not in rep.below_floor
        assert len(rep.kept_classes()) == 22

    def test_unknown_species(self):
        with pytest.raises(ValueError, match="Mushroom"):
            species_report([("a", "c", "Mushroom")])

    def test_class_in_two_species(self):
        with pytest.raises(ValueError, match="both"):
            species_report([("a", "c", "Bark"), ("b", "c", "Resin")])

    def test_species_list(self):
        assert len(SPECIES) == 8 and len(set(SPECIES)) == 8
