import numpy as np
import pytest

from cropgraph import autodiff as ad
from cropgraph import rois
from cropgraph.autodiff import Tensor, grad_check
from cropgraph.rois import (FeatureMap, InputError, RegionBox, RegionError,
                            ToyBackbone, build_nodes, heuristic_proposals,
                            read_box_file, read_feature_map, rod_align,
                            roi_align, write_box_file, write_feature_map)


def _brute_force_bilinear(data, y, x):
    """Independent reference: cell (i, j) lives at (i+0.5, j+0.5), clamped."""
    H, W = data.shape
    yc = min(max(y - 0.5, 0.0), H - 1.0)
    xc = min(max(x - 0.5, 0.0), W - 1.0)
    i0, j0 = int(np.floor(yc)), int(np.floor(xc))
    i0, j0 = min(i0, H - 1), min(j0, W - 1)
    i1, j1 = min(i0 + 1, H - 1), min(j0 + 1, W - 1)
    fy, fx = yc - i0, xc - j0
    return (data[i0, j0] * (1 - fy) * (1 - fx) + data[i0, j1] * (1 - fy) * fx
            + data[i1, j0] * fy * (1 - fx) + data[i1, j1] * fy * fx)


def _brute_force_pool(data, box, out_size, stride):
    """4-sample average pooling oracle, one channel."""
    x1, y1, x2, y2 = (v / stride for v in box)
    bw, bh = (x2 - x1) / out_size, (y2 - y1) / out_size
    out = np.zeros((out_size, out_size))
    for oy in range(out_size):
        for ox in range(out_size):
            acc = 0.0
            for sy in (0.25, 0.75):
                for sx in (0.25, 0.75):
                    acc += _brute_force_bilinear(data, y1 + (oy + sy) * bh,
                                                 x1 + (ox + sx) * bw)
            out[oy, ox] = acc / 4.0
    return out


def _random_fm(seed, channels=2, h=6, w=6, stride=8.0):
    r = np.random.default_rng(seed)
    return FeatureMap(data=Tensor(r.uniform(-1, 1, (channels, h, w))),
                      stride=stride)


class TestRegionBox:
    def test_center(self):
        box = RegionBox(2.0, 4.0, 10.0, 8.0)
        assert box.center == (6.0, 6.0)

    def test_degenerate_rejected(self):
        with pytest.raises(RegionError):
            RegionBox(5.0, 1.0, 5.0, 4.0)

    def test_clip_to_zero_area_raises(self):
        with pytest.raises(RegionError):
            RegionBox(-10.0, -10.0, -1.0, -1.0).clipped(32, 32)

    def test_flip(self):
        box = RegionBox(2.0, 1.0, 5.0, 4.0).flipped_h(10.0)
        assert (box.x1, box.x2) == (5.0, 8.0)


class TestRoiAlign:
    def test_constant_map(self):
        fm = FeatureMap(data=Tensor(np.full((2, 4, 4), 7.0)), stride=1.0)
        out = roi_align(fm, RegionBox(0.3, 0.7, 3.9, 3.5), 3)
        np.testing.assert_allclose(out.numpy(), 7.0, atol=1e-12)

    def test_two_by_two_center(self):
        fm = FeatureMap(data=Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]])),
                        stride=1.0)
        out = roi_align(fm, RegionBox(0.0, 0.0, 2.0, 2.0), 1)
        assert out.numpy().reshape(()) == pytest.approx(1.5)

    def test_against_brute_force_oracle(self):
        fm = _random_fm(0, channels=3, h=8, w=10, stride=4.0)
        box = RegionBox(3.0, 5.0, 30.0, 27.0)
        out = roi_align(fm, box, 4).numpy()
        for c in range(3):
            expected = _brute_force_pool(fm.data.numpy()[c], box.coords(), 4, 4.0)
            np.testing.assert_allclose(out[:, :, c], expected, atol=1e-10)

    def test_out_size_shape_contract(self):
        fm = _random_fm(1, channels=5, h=16, w=16, stride=16.0)
        out = roi_align(fm, RegionBox(10.0, 10.0, 200.0, 180.0), 15)
        assert out.shape == (15, 15, 5)

    def test_degenerate_after_clip(self):
        fm = _random_fm(2)
        with pytest.raises(RegionError):
            roi_align(fm, RegionBox(-20.0, -20.0, -1.0, -1.0), 3)

    def test_padding_outside_support_is_invisible(self):
        fm = _random_fm(3, channels=1, h=6, w=6, stride=1.0)
        box = RegionBox(1.2, 1.4, 3.8, 3.6)
        base = roi_align(fm, box, 2).numpy()
        padded_data = np.pad(fm.data.numpy(), ((0, 0), (0, 3), (0, 3)),
                             constant_values=99.0)
        fm_padded = FeatureMap(data=Tensor(padded_data), stride=1.0)
        out = roi_align(fm_padded, box, 2, image_size=(6.0, 6.0)).numpy()
        np.testing.assert_allclose(out, base, atol=1e-12)

    def test_half_box_mean_on_affine_map(self):
        # on an affine map the 4-sample rule integrates exactly, so the union
        # pool equals the mean of the two adjacent half pools
        ys, xs = np.mgrid[0:6, 0:8].astype(float)
        data = (0.3 + 0.7 * xs + 0.2 * ys)[None]
        fm = FeatureMap(data=Tensor(data), stride=1.0)
        union = roi_align(fm, RegionBox(1.0, 1.0, 7.0, 5.0), 1).numpy()
        left = roi_align(fm, RegionBox(1.0, 1.0, 4.0, 5.0), 1).numpy()
        right = roi_align(fm, RegionBox(4.0, 1.0, 7.0, 5.0), 1).numpy()
        np.testing.assert_allclose(union, 0.5 * (left + right), atol=1e-6)

    def test_gradient_through_bilinear_weights(self):
        fm_data = Tensor(np.random.default_rng(4).uniform(-1, 1, (2, 6, 6)))
        w = Tensor(np.random.default_rng(5).uniform(-1, 1, (3, 3, 2)))
        box = RegionBox(5.0, 7.0, 40.0, 38.0)
        def fn(x):
            fm = FeatureMap(data=x, stride=8.0)
            return ad.tsum(ad.mul(roi_align(fm, box, 3), w))
        assert grad_check(fn, [fm_data], tol=1e-4).passed


class TestRodAlign:
    def test_full_crop_discards_everything(self):
        fm = _random_fm(6, stride=1.0, h=4, w=4)
        out = rod_align(fm, RegionBox(0.0, 0.0, 4.0, 4.0), 2)
        np.testing.assert_allclose(out.numpy(), 0.0, atol=1e-12)

    def test_tiny_crop_approaches_unmasked_pooling(self):
        fm = _random_fm(7, channels=2, h=8, w=8, stride=4.0)
        # crop so small no cell center falls inside: nothing masked
        tiny = rod_align(fm, RegionBox(0.1, 0.1, 1.2, 1.2), 3).numpy()
        full_pool = roi_align(fm, RegionBox(0.0, 0.0, 32.0, 32.0), 3).numpy()
        np.testing.assert_allclose(tiny, full_pool, atol=1e-10)

    def test_shape_contract(self):
        fm = _random_fm(8, channels=4, h=16, w=16, stride=16.0)
        out = rod_align(fm, RegionBox(30.0, 30.0, 120.0, 140.0), 15)
        assert out.shape == (15, 15, 4)

    def test_masks_only_inside_cells(self):
        data = np.ones((1, 4, 4))
        fm = FeatureMap(data=Tensor(data), stride=1.0)
        # crop covers cells with centers (1.5, 1.5) and (1.5, 2.5)
        mask = rois.discard_mask(fm, RegionBox(1.0, 1.0, 3.0, 2.0))
        assert mask.sum() == 14.0
        assert mask[1, 1] == 0.0 and mask[1, 2] == 0.0

    def test_gradient(self):
        fm_data = Tensor(np.random.default_rng(9).uniform(-1, 1, (2, 6, 6)))
        w = Tensor(np.random.default_rng(10).uniform(-1, 1, (3, 3, 2)))
        def fn(x):
            fm = FeatureMap(data=x, stride=8.0)
            return ad.tsum(ad.mul(rod_align(fm, RegionBox(8.0, 8.0, 30.0, 30.0), 3), w))
        assert grad_check(fn, [fm_data], tol=1e-4).passed


class TestToyBackbone:
    def test_stride_arithmetic(self):
        fm = ToyBackbone(out_channels=6, seed=0)(np.zeros((64, 64, 3)))
        assert fm.data.shape == (6, 4, 4) and fm.stride == 16.0

    def test_zero_image_zero_bias(self):
        bb = ToyBackbone(out_channels=4, seed=1)
        for _, b in bb.layers:
            b.data = np.zeros_like(b.data)
        out = bb(np.zeros((32, 32, 3)))
        np.testing.assert_allclose(out.data.numpy(), 0.0)

    def test_undersized_image(self):
        with pytest.raises(InputError):
            ToyBackbone(seed=0)(np.zeros((16, 64, 3)))

    def test_deterministic(self):
        img = np.random.default_rng(11).uniform(0, 1, (32, 48, 3))
        a = ToyBackbone(out_channels=4, seed=2)(img).data.numpy()
        b = ToyBackbone(out_channels=4, seed=2)(img).data.numpy()
        np.testing.assert_array_equal(a, b)

    def test_gradient_through_stack(self):
        bb = ToyBackbone(out_channels=4, seed=3)
        img = np.random.default_rng(12).uniform(0, 1, (32, 32, 3))
        w = Tensor(np.random.default_rng(13).uniform(-1, 1, (4, 2, 2)))
        def fn(*params):
            return ad.tsum(ad.mul(bb(img).data, w))
        report = grad_check(fn, bb.parameters(), tol=1e-4, max_entries=20)
        assert report.passed, report


class TestHeuristicProposals:
    def test_uniform_image_tie_broken_scan_order(self):
        boxes = heuristic_proposals(np.full((48, 48, 3), 0.5), 4)
        assert len(boxes) == 4
        assert boxes[0].coords() == (0.0, 0.0, 24.0, 24.0)

    def test_bright_square_found(self):
        img = np.zeros((64, 64, 3))
        img[20:36, 24:40] = 1.0
        top = heuristic_proposals(img, 1)[0]
        inter = (max(0.0, min(top.x2, 40) - max(top.x1, 24))
                 * max(0.0, min(top.y2, 36) - max(top.y1, 20)))
        union = top.area + 256.0 - inter
        assert inter / union > 0.5

    def test_default_count(self):
        assert len(heuristic_proposals(np.zeros((64, 64, 3)), 10)) == 10

    def test_deterministic(self):
        img = np.random.default_rng(14).uniform(0, 1, (64, 64, 3))
        a = heuristic_proposals(img, 6)
        b = heuristic_proposals(img, 6)
        assert [x.coords() for x in a] == [x.coords() for x in b]


class TestBuildNodes:
    def _setup(self, seed=0, d=16, n=4):
        fm = _random_fm(seed, channels=3, h=6, w=6, stride=8.0)
        proj = rois.NodeProjection.create(3, 3, d, seed)
        return fm, proj

    def test_row_count_is_n_plus_one(self):
        fm, proj = self._setup()
        crop = RegionBox(4.0, 4.0, 40.0, 40.0)
        props = [RegionBox(1.0, 1.0, 12.0, 12.0)]
        nodes = build_nodes(fm, crop, props, proj, n_proposals=10, align_size=3)
        assert nodes.features.shape == (11, 16)
        assert nodes.crop_index == 0 and nodes.centers.shape == (11, 2)

    def test_identical_boxes_identical_rows(self):
        fm, proj = self._setup(1)
        crop = RegionBox(4.0, 4.0, 40.0, 40.0)
        box = RegionBox(2.0, 2.0, 20.0, 20.0)
        nodes = build_nodes(fm, crop, [box, box], proj, n_proposals=2,
                            align_size=3)
        feats = nodes.features.numpy()
        np.testing.assert_allclose(feats[1], feats[2], atol=1e-12)

    def test_feature_dimension_config(self):
        fm, proj = self._setup(2, d=32)
        nodes = build_nodes(fm, RegionBox(4.0, 4.0, 40.0, 40.0),
                            [RegionBox(1.0, 1.0, 12.0, 12.0)], proj,
                            n_proposals=5, align_size=3)
        assert nodes.features.shape == (6, 32)

    def test_padding_uses_null_embedding(self):
        fm, proj = self._setup(3)
        crop = RegionBox(4.0, 4.0, 40.0, 40.0)
        props = [RegionBox(1.0, 1.0, 12.0, 12.0)]
        nodes = build_nodes(fm, crop, props, proj, n_proposals=3, align_size=3)
        proj.null_embedding.data = proj.null_embedding.data + 100.0
        nodes2 = build_nodes(fm, crop, props, proj, n_proposals=3, align_size=3)
        diff = nodes2.features.numpy() - nodes.features.numpy()
        np.testing.assert_allclose(diff[0], 0.0, atol=1e-9)   # crop row
        np.testing.assert_allclose(diff[1], 0.0, atol=1e-9)   # active row
        assert (np.abs(diff[2]) > 1.0).all()                  # padded rows
        assert (np.abs(diff[3]) > 1.0).all()

    def test_truncates_by_confidence(self):
        fm, proj = self._setup(4)
        lo = RegionBox(1.0, 1.0, 10.0, 10.0, confidence=0.1)
        hi = RegionBox(20.0, 20.0, 40.0, 40.0, confidence=0.9)
        kept, active = rois.pad_or_truncate_proposals([lo, hi], 1, 48, 48)
        assert kept[0].confidence == 0.9 and active.tolist() == [1.0]

    def test_empty_without_image_raises(self):
        fm, proj = self._setup(5)
        with pytest.raises(RegionError):
            build_nodes(fm, RegionBox(4.0, 4.0, 40.0, 40.0), [], proj,
                        n_proposals=3, align_size=3)

    def test_empty_falls_back_to_heuristic(self):
        fm, proj = self._setup(6)
        img = np.random.default_rng(15).uniform(0, 1, (48, 48, 3))
        nodes = build_nodes(fm, RegionBox(4.0, 4.0, 40.0, 40.0), [], proj,
                            n_proposals=3, align_size=3,
                            fallback_image=img)
        assert nodes.features.shape == (4, 16)

    def test_centers_normalized(self):
        fm, proj = self._setup(7)
        nodes = build_nodes(fm, RegionBox(0.0, 0.0, 48.0, 48.0),
                            [RegionBox(12.0, 24.0, 36.0, 48.0)], proj,
                            n_proposals=1, align_size=3)
        np.testing.assert_allclose(nodes.centers[0], [0.5, 0.5])
        np.testing.assert_allclose(nodes.centers[1], [0.5, 0.75])


class TestFileFormats:
    def test_feature_map_round_trip(self, tmp_path):
        fm = _random_fm(16, channels=3, h=5, w=7, stride=16.0)
        path = tmp_path / "map.s2fm"
        write_feature_map(path, fm)
        back = read_feature_map(path)
        assert back.data.shape == (3, 5, 7) and back.stride == 16.0
        np.testing.assert_allclose(back.data.numpy(), fm.data.numpy(),
                                   atol=1e-6)
        with open(path, "rb") as fh:
            assert fh.read(4) == b"S2FM"

    def test_feature_map_bad_magic(self, tmp_path):
        path = tmp_path / "bad.s2fm"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(InputError):
            read_feature_map(path)

    def test_box_file_round_trip(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        boxes = [RegionBox(1.0, 2.0, 3.0, 4.0, confidence=0.5),
                 RegionBox(0.0, 0.0, 9.0, 9.0, confidence=0.9)]
        write_box_file(path, [("img0", boxes)])
        table = read_box_file(path)
        assert [b.coords() for b in table["img0"]] == [b.coords() for b in boxes]
        assert table["img0"][0].confidence == 0.5
