import numpy as np
import pytest

from apn.imageio import (
    ImageFormatError,
    encode_pnm,
    parse_pnm,
    read_dataset,
    read_tsv,
    to_gray,
    unit_to_u8,
    write_dataset,
    write_tsv,
)
from apn.synth import SyntheticSpec, synth_generate


class TestPnm:
    @pytest.mark.parametrize("shape", [(3, 5), (4, 2, 3)])
    def test_round_trip(self, rng, shape):
        img = rng.integers(0, 256, shape).astype(np.uint8)
        assert np.array_equal(parse_pnm(encode_pnm(img)), img)

    def test_header_comments(self):
        data = b"P5\n# made by hand\n2 1\n# depth\n255\n" + bytes([7, 9])
        assert parse_pnm(data).tolist() == [[7, 9]]

    def test_sixteen_bit(self):
        data = b"P5 1 1 65535\n" + bytes([1, 2])
        assert parse_pnm(data).tolist() == [[258]]

    @pytest.mark.parametrize(
        "data", [b"P3\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1", b"P5\nx 1\n255\n\x00", b"P5\n0 1\n255\n"]
    )
    def test_malformed(self, data):
        with pytest.raises(ImageFormatError):
            parse_pnm(data)

    def test_write_only_u8(self):
        with pytest.raises(ImageFormatError):
            encode_pnm(np.zeros((2, 2), np.float32))

    def test_gray_and_u8(self):
        rgb = np.array([[[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]])
        assert to_gray(rgb).ravel().tolist() == pytest.approx([1.0, 0.299])
        assert unit_to_u8(np.array([-1.0, 0.5, 2.0])).tolist() == [0, 128, 255]


class TestTsvAndDatasets:
    def test_tsv(self, tmp_path):
        path = tmp_path / "t.tsv"
        write_tsv(path, [("a", 1), ("b", 2)], header=("id", "n"))
        assert path.read_text().startswith("#id\tn\n")
        assert read_tsv(path) == [["a", "1"], ["b", "2"]]

    def test_dataset_round_trip(self, tmp_path):
        tr, _ = synth_generate(SyntheticSpec(image_size=8, species=2, classes_per_species=1, samples_per_class=2), 0)
        write_dataset(tr, tmp_path)
        back = read_dataset(tmp_path)
        assert back.digest() == tr.digest() and back.num_classes == tr.num_classes

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

    def test_short_image_file(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("# dims 1 2 2\nimg.f32\t0\t0\n")
        (tmp_path / "img.f32").write_bytes(b"\x00" * 8)
        with pytest.raises(ImageFormatError, match="expected 4"):
            read_dataset(tmp_path)
