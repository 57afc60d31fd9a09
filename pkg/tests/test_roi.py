import itertools

import numpy as np
import pytest

from femurseg import roi
from femurseg.errors import ContractViolation, FemurNotFoundError
from femurseg.phantom import PhantomParams, generate_phantom
from femurseg.roi import Box3, box_iou
from femurseg.volume import Volume


def brute_iou(a: Box3, b: Box3) -> float:
    sa = set(itertools.product(*[range(lo, hi + 1) for lo, hi in zip(a.lo, a.hi)]))
    sb = set(itertools.product(*[range(lo, hi + 1) for lo, hi in zip(b.lo, b.hi)]))
    return len(sa & sb) / len(sa | sb)


class TestBox:
    def test_iou_examples(self):
        a = Box3((0, 0, 0), (1, 1, 1))
        assert box_iou(a, a) == 1.0
        assert box_iou(a, Box3((1, 1, 1), (2, 2, 2))) == pytest.approx(1 / 15, abs=1e-15)
        assert box_iou(a, Box3((3, 0, 0), (4, 1, 1))) == 0.0

    def test_iou_matches_counting(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            lo = rng.integers(0, 5, (2, 3))
            hi = lo + rng.integers(0, 4, (2, 3))
            a, b = Box3(lo[0], hi[0]), Box3(lo[1], hi[1])
            assert box_iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-15)

    def test_invalid(self):
        with pytest.raises(ContractViolation):
            Box3((2, 0, 0), (1, 0, 0))

    def test_padding_contains_and_clamps(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            lo = rng.integers(0, 50, 3)
            b = Box3(lo, lo + rng.integers(0, 40, 3))
            p = b.padded(30, (100, 100, 100))
            assert p.contains(b)
            assert all(0 <= x <= y <= 99 for x, y in zip(p.lo, p.hi))


class TestMerge:
    def test_single_voxel_example(self):
        masks = [np.zeros((100, 100)) for _ in range(100)]
        masks[5][10, 20] = 1
        tight = roi.merge_slice_boxes(masks, min_component=1)
        assert (tight.lo, tight.hi) == ((10, 20, 5), (10, 20, 5))
        padded = roi.boxes_to_roi(masks, (100, 100, 100), min_component=1)
        assert (padded.lo, padded.hi) == ((0, 0, 0), (40, 50, 35))

    def test_two_slices(self):
        masks = [np.zeros((20, 20)) for _ in range(10)]
        masks[3][2:5, 2:5] = 1
        masks[7][8:12, 1:4] = 1
        b = roi.merge_slice_boxes(masks)
        assert (b.lo, b.hi) == ((2, 1, 3), (11, 4, 7))

    def test_small_components_dropped(self):
        masks = [np.zeros((20, 20)) for _ in range(4)]
        masks[1][0:2, 0:2] = 1  # 4 pixels, below the filter
        masks[2][10:13, 10:13] = 1
        b = roi.merge_slice_boxes(masks)
        assert (b.lo, b.hi) == ((10, 10, 2), (12, 12, 2))

    def test_not_found(self):
        with pytest.raises(FemurNotFoundError, match="femur not found"):
            roi.merge_slice_boxes([np.zeros((8, 8))] * 3)

    def test_slice_permutation(self):
        rng = np.random.default_rng(2)
        masks = [(rng.random((16, 16)) < 0.05).astype(float) for _ in range(8)]
        for m in masks[::2]:
            m[4:8, 4:8] = 1
        b = roi.merge_slice_boxes(masks)
        order = rng.permutation(8)
        pb = roi.merge_slice_boxes([masks[i] for i in order])
        assert (b.lo[:2], b.hi[:2]) == (pb.lo[:2], pb.hi[:2])
        kept = [z for z, i in enumerate(order) if roi.slice_boxes(masks[i])]
        assert (pb.lo[2], pb.hi[2]) == (min(kept), max(kept))


class TestCropRescale:
    def test_identity(self):
        data = np.random.default_rng(3).random((10, 12, 14))
        box = Box3((2, 3, 4), (7, 9, 11))
        out = roi.crop_and_rescale(Volume(data), box, 1.0)
        np.testing.assert_allclose(out.data, data[box.slices()], atol=1e-6)
        assert out.spacing == (0.38, 0.38, 0.38)

    def test_extent_and_spacing(self):
        out = roi.crop_and_rescale(Volume(np.zeros((100, 20, 20))), Box3((0, 0, 0), (99, 19, 19)), 0.65)
        assert out.extents == (65, 13, 13)
        np.testing.assert_allclose(out.spacing, [0.38 / 0.65] * 3, rtol=1e-12)

    def test_degenerate(self):
        with pytest.raises(ContractViolation):
            roi.crop_and_rescale(Volume(np.zeros((10, 10, 10))), Box3((0, 0, 0), (4, 9, 9)), 0.65)

    def test_outside(self):
        with pytest.raises(ContractViolation):
            roi.crop_and_rescale(Volume(np.zeros((10, 10, 10))), Box3((0, 0, 0), (10, 9, 9)), 0.65)

    def test_physical_coordinates_round_trip(self):
        box = Box3((5, 6, 7), (40, 44, 38))
        w = roi.rescale_window(box, 0.65)
        rng = np.random.default_rng(4)
        for p in rng.uniform(5, 38, (20, 3)):
            j = np.rint(w.to_window(p))
            back = w.to_source(j)
            # rounding to the coarse grid moves a point by at most half a coarse voxel per axis
            assert np.all(np.abs(back - p) <= 0.5 * w.step + 1e-9)

    def test_femur_length_preserved(self):
        for seed in range(3):
            c = generate_phantom(PhantomParams(seed=seed))
            box = roi.mask_box(c.mask.data).padded(4, c.extents)
            out = roi.crop_and_rescale(c.mask, box, 0.65)
            w = roi.rescale_window(box, 0.65)
            before = np.linalg.norm((np.subtract(c.p1, c.p2)) * 0.38)
            q1, q2 = (np.rint(w.to_window(p)) for p in c.endpoints)
            after = np.linalg.norm((q1 - q2) * np.asarray(out.spacing))
            # each endpoint snaps by at most half a coarse voxel diagonal
            assert abs(after - before) < 2 * 0.5 * np.sqrt(3) * out.spacing[0]
            assert abs(after - before) < 1.0 + 0.38

    def test_paste_back_inverts_sample(self):
        x = np.linspace(0, 1, 20)
        data = x[:, None, None] + 2 * x[None, :, None] - x[None, None, :]
        box = Box3((2, 2, 2), (17, 17, 17))
        w = roi.rescale_window(box, 0.65)
        small = roi.sample(data, w, order=1)
        back = roi.paste_back(small, w, data.shape)
        inner = tuple(slice(4, 16) for _ in range(3))
        np.testing.assert_allclose(back[inner], data[inner], atol=1e-5)


@pytest.fixture(scope="module")
def unet():
    spec = roi.UNet2DSpec()
    return spec, roi.init_unet2d(spec, np.random.default_rng(0))


class TestUNet2D:
    def test_shape_and_range(self, unet):
        spec, P = unet
        out = roi.unet2d_forward(P, spec, np.random.default_rng(1).random((3, 1, 16, 24)), train=True)
        assert out.shape == (3, 1, 16, 24)
        assert out.data.min() >= 0 and out.data.max() <= 1

    def test_indivisible_padded(self, unet):
        spec, P = unet
        out = roi.unet2d_forward(P, spec, np.random.default_rng(2).random((13, 10)), train=True)
        assert out.shape == (1, 1, 13, 10)

    def test_default_architecture(self, unet):
        spec, P = unet
        assert spec.widths() == [16, 32, 64, 128]
        assert P.tensors["enc3.1.conv.w"].shape[0] == 128

    def test_detect_slices_count(self, unet):
        spec, P = unet
        P = P.copy()
        roi.unet2d_forward(P, spec, np.random.default_rng(3).random((2, 1, 16, 16)), train=True)
        masks = roi.detect_slices(P, spec, np.zeros((16, 16, 5)))
        assert len(masks) == 5 and masks[0].shape == (16, 16)
