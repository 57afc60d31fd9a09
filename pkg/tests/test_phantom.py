import json
import math

import numpy as np
import pytest
from scipy import ndimage

from femurseg import phantom
from femurseg.errors import (AugmentationRejected, BadMagicError, BufferMismatchError, ContractViolation,
                             GenerationError, SidecarError)
from femurseg.phantom import LabeledCase, PhantomParams, generate_phantom
from femurseg.volume import HEADER, Volume, read_volume, write_volume


@pytest.fixture(scope="module")
def cases():
    return [generate_phantom(PhantomParams(seed=s)) for s in range(6)]


def tiny_case(p1=(2, 3, 4), p2=(5, 3, 4), n=8):
    rng = np.random.default_rng(0)
    mask = np.zeros((n, n, n))
    mask[p1[0]:p2[0] + 1, p1[1], p1[2]] = 1
    return phantom._make_case(rng.random((n, n, n)), mask, p1, p2, 1.5, (0.38,) * 3)


def one_component(mask) -> bool:
    _, n = ndimage.label(mask > 0.5)
    return n == 1


class TestVolumeIO:
    def test_round_trip(self, tmp_path):
        data = np.random.default_rng(1).standard_normal((5, 6, 7)).astype(np.float32)
        write_volume(Volume(data, (0.38, 0.5, 1.25), "heatmap"), tmp_path / "v.fnv")
        back = read_volume(tmp_path / "v.fnv")
        assert back.extents == (5, 6, 7)
        assert back.spacing == (0.38, 0.5, 1.25) and back.kind == "heatmap"
        assert np.array_equal(back.data, data)

    def test_header_and_x_fastest(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_volume(Volume(data), tmp_path / "v.fnv")
        raw = (tmp_path / "v.fnv").read_bytes()
        assert HEADER.size == 32 and raw[:4] == b"FNV1"
        vals = np.frombuffer(raw[32:], "<f4")
        # second stored value is data[1, 0, 0]
        assert vals[0] == data[0, 0, 0] and vals[1] == data[1, 0, 0] and vals[2] == data[0, 1, 0]

    def test_truncated(self, tmp_path):
        write_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "v.fnv")
        raw = (tmp_path / "v.fnv").read_bytes()
        (tmp_path / "v.fnv").write_bytes(raw[:-5])
        with pytest.raises(BufferMismatchError, match="buffer mismatch"):
            read_volume(tmp_path / "v.fnv")

    def test_bad_magic(self, tmp_path):
        write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v.fnv")
        raw = bytearray((tmp_path / "v.fnv").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "v.fnv").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_volume(tmp_path / "v.fnv")

    def test_sidecar(self, tmp_path):
        write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v.fnv")
        (tmp_path / "v.fnv.json").write_text("{not json")
        with pytest.raises(SidecarError):
            read_volume(tmp_path / "v.fnv")
        (tmp_path / "v.fnv.json").write_text(json.dumps({"spacing_mm": [1, 0, 1], "kind": "image"}))
        with pytest.raises(SidecarError):
            read_volume(tmp_path / "v.fnv")

    def test_invalid_volume(self):
        with pytest.raises(ContractViolation):
            Volume(np.zeros((2, 2)))
        with pytest.raises(ContractViolation):
            Volume(np.zeros((2, 2, 2)), (0.38, -1, 0.38))


class TestHeatmap:
    def test_peak_and_closed_form(self):
        h = phantom.gaussian_heatmap((5, 6, 7), 3.0, (12, 12, 12)).data
        assert h[5, 6, 7] == 1.0
        assert h[8, 6, 7] == pytest.approx(math.exp(-0.5), abs=1e-7)
        assert h[5, 6, 7 - 3] == pytest.approx(0.60653, abs=1e-5)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0, 10.0])
    def test_argmax_is_endpoint(self, sigma):
        h = phantom.gaussian_heatmap((0, 9, 4), sigma, (10, 10, 10)).data
        assert np.unravel_index(np.argmax(h), h.shape) == (0, 9, 4)

    def test_outside_rejected(self):
        with pytest.raises(ContractViolation):
            phantom.gaussian_heatmap((10, 0, 0), 3.0, (10, 10, 10))
        with pytest.raises(ContractViolation):
            phantom.gaussian_heatmap((1, 1, 1), 0.0, (10, 10, 10))


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_phantom(PhantomParams(seed=7)), generate_phantom(PhantomParams(seed=7))
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.mask.data, b.mask.data)
        assert (a.p1, a.p2) == (b.p1, b.p2)

    def test_case_invariants(self, cases):
        for c in cases:
            assert c.image.extents == c.mask.extents == c.heatmaps[0].extents
            assert c.mask.data[c.p1] == 1 and c.mask.data[c.p2] == 1
            for h, p in zip(c.heatmaps, c.endpoints):
                assert h.data[p] == 1.0
                assert np.unravel_index(np.argmax(h.data), h.extents) == p
            assert one_component(c.mask.data)

    def test_endpoint_distance_bound(self):
        for s in range(20):
            c = generate_phantom(PhantomParams(seed=100 + s))
            length, radius = c.meta["length"], c.meta["radius"]
            d = np.linalg.norm(np.subtract(c.p1, c.p2))
            assert length - 2 <= d <= length + 2 * radius + 2

    def test_two_valued_without_noise(self):
        c = generate_phantom(PhantomParams(seed=3, speckle=0.0, shadow_prob=0.0))
        img, mask = c.image.data, c.mask.data > 0.5
        p = PhantomParams()
        assert img.min() >= np.float32(p.bg_mean) and img.max() <= np.float32(p.fg_mean)
        # values strictly between the two levels only on the antialiased shell
        mixed = (img > np.float32(p.bg_mean)) & (img < np.float32(p.fg_mean))
        shell = ndimage.binary_dilation(mask) & ~ndimage.binary_erosion(mask)
        assert not (mixed & ~shell).any()

    def test_does_not_fit(self):
        with pytest.raises(GenerationError):
            generate_phantom(PhantomParams(extents=(24, 24, 24)))
        with pytest.raises(GenerationError):
            PhantomParams(margin=1).validate()


class TestAugment:
    def test_flip_involution(self, cases):
        c = cases[0]
        for axis in range(3):
            back = phantom.flip(phantom.flip(c, axis), axis)
            assert np.array_equal(back.mask.data, c.mask.data)
            assert np.array_equal(back.image.data, c.image.data)
            assert back.endpoints == c.endpoints

    def test_right_angle_rotation_exact(self):
        c = tiny_case()
        marker = np.zeros((8, 8, 8))
        marker[2, 3, 4] = 1
        for axis in range(3):
            r = phantom.rotate(c, axis, math.pi / 2)
            i, j = [a for a in range(3) if a != axis]
            # +90 deg in the (i, j) plane maps x_i -> -x_j, x_j -> x_i about the centre
            expected = list((2, 3, 4))
            expected[i] = 7 - (2, 3, 4)[j]
            expected[j] = (2, 3, 4)[i]
            assert tuple(expected) in r.endpoints
            moved = phantom._affine(LabeledCase(Volume(marker), Volume(marker, kind="mask"), (2, 3, 4),
                                                (2, 3, 4), ()), phantom._rotation(axis, math.pi / 2))
            assert moved.mask.data[tuple(expected)] == 1

    def test_scale_length(self, cases):
        for c in cases[:4]:
            for s in (0.85, 1.15):
                try:
                    out = phantom.scale(c, s)
                except AugmentationRejected:
                    continue
                before = np.linalg.norm(np.subtract(c.p1, c.p2))
                after = np.linalg.norm(np.subtract(out.p1, out.p2))
                assert abs(after - s * before) <= 1.0 + 1e-9

    def test_scale_range_enforced(self, cases):
        with pytest.raises(ContractViolation):
            phantom.scale(cases[0], 1.3)

    def test_rejects_endpoint_leaving(self):
        c = tiny_case((0, 0, 0), (3, 0, 0))
        with pytest.raises(AugmentationRejected):
            phantom.scale(c, 1.2)

    def test_topology_and_labels_preserved(self, cases):
        rng = np.random.default_rng(5)
        for c in phantom.augment_cases(cases[:3], 2, rng)[3:]:
            assert one_component(c.mask.data)
            assert set(np.unique(c.mask.data)) <= {0.0, 1.0}
            assert c.mask.data[c.p1] == 1 and c.mask.data[c.p2] == 1
            for h, p in zip(c.heatmaps, c.endpoints):
                assert h.data[p] == 1.0

    def test_unknown_op(self, cases):
        with pytest.raises(ContractViolation):
            phantom.augment(cases[0], "shear", np.random.default_rng(0))


class TestDataset:
    def test_manifest_deterministic(self, tmp_path):
        a = phantom.generate_dataset(PhantomParams(), 2, 1, tmp_path / "a", seed=4)
        b = phantom.generate_dataset(PhantomParams(), 2, 1, tmp_path / "b", seed=4)
        assert a.read_bytes() == b.read_bytes()
        for e in phantom.load_manifest(a):
            assert (a.parent / e["image"]).read_bytes() == (b.parent / e["image"]).read_bytes()
        splits = [e["split"] for e in phantom.load_manifest(a)]
        assert splits == ["train", "train", "test"]

    def test_load_split(self, tmp_path):
        m = phantom.generate_dataset(PhantomParams(), 1, 1, tmp_path, seed=0)
        (case,) = phantom.load_split(m, "test")
        assert case.image.spacing == (0.38, 0.38, 0.38)
        assert case.mask.data[case.p1] == 1

    def test_malformed_manifest(self, tmp_path):
        from femurseg.errors import ManifestError
        (tmp_path / "m.json").write_text(json.dumps([{"id": "x"}]))
        with pytest.raises(ManifestError):
            phantom.load_manifest(tmp_path / "m.json")
        (tmp_path / "m.json").write_text("[")
        with pytest.raises(ManifestError):
            phantom.load_manifest(tmp_path / "m.json")
