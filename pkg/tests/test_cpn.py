import math

import numpy as np
import pytest

from cqdet import diffgrid as dg
from cqdet.cpn import (CBAM, CenterProposal, Heatmap, HeatmapHead, PyramidNet,
                       gaussian_radius, predict_heads, query_features,
                       render_targets, select_proposals, write_heatmap_pgm,
                       write_proposals)
from cqdet.geom import Box3D
from cqdet.scenes import BevGrid


def make_grid(rng, h, w, c, cell=0.8, origin=(0.0, 0.0), grad=False):
    return BevGrid(dg.Value(rng.standard_normal((h, w, c)), requires_grad=grad),
                   cell, origin)


class TestPyramid:
    def test_shapes_and_cells(self):
        rng = np.random.default_rng(0)
        net = PyramidNet(rng, 4, 4)
        pyr = net(make_grid(rng, 24, 16, 4))
        assert [g.values.shape[:2] for g in pyr.scales] == [(48, 32), (24, 16), (12, 8)]
        assert [g.cell_size for g in pyr.scales] == [0.4, 0.8, 1.6]
        assert not pyr.padded

    def test_default_resolution_dims(self):
        rng = np.random.default_rng(1)
        net = PyramidNet(rng, 2, 2)
        pyr = net(make_grid(rng, 188, 188, 2))
        assert [g.values.shape[:2] for g in pyr.scales] == \
            [(376, 376), (188, 188), (94, 94)]

    def test_odd_dims_padded(self):
        rng = np.random.default_rng(2)
        net = PyramidNet(rng, 3, 4)
        pyr = net(make_grid(rng, 9, 11, 3))
        assert pyr.padded
        assert pyr.scales[1].values.shape[:2] == (10, 12)

    def test_zero_input_zero_biases_zero_pyramid(self):
        rng = np.random.default_rng(3)
        net = PyramidNet(rng, 3, 4)
        for p in net.named_parameters().values():
            if p.name.endswith(".b") or p.name.endswith(".bias"):
                p.data[...] = 0.0
        pyr = net(BevGrid(dg.Value(np.zeros((8, 8, 3))), 0.8, (0.0, 0.0)))
        for g in pyr.scales:
            assert not g.values.data.any()


class TestCBAM:
    def test_saturated_gates_identity(self):
        rng = np.random.default_rng(4)
        block = CBAM(rng, 6, "cbam")
        block.mlp.fc2.w.data[...] = 0.0
        block.mlp.fc2.b.data[...] = 100.0   # sigmoid(100) == 1.0 in f64
        block.spatial.k.data[...] = 0.0
        block.spatial.b.data[...] = 100.0
        x = rng.standard_normal((7, 5, 6))
        out = block(dg.Value(x))
        np.testing.assert_array_equal(out.data, x)

    def test_gates_shrink_magnitudes(self):
        rng = np.random.default_rng(5)
        block = CBAM(rng, 8, "cbam")
        x = rng.standard_normal((6, 6, 8))
        out = block(dg.Value(x))
        assert np.all(np.abs(out.data) <= np.abs(x) + 1e-15)

    def test_reduction_clamped_to_channels(self):
        rng = np.random.default_rng(6)
        block = CBAM(rng, 4, "cbam", reduction=16)
        assert block.mlp.fc1.w.shape == (4, 1)


class TestRenderTargets:
    GRID = dict(h=40, w=40, cell_size=0.4, origin=(-8.0, -8.0))

    def test_peak_exactly_one(self):
        from cqdet.scenes import Annotation
        annos = [Annotation(Box3D(0.21, 0.17, 0.9, 4.2, 1.9, 1.7, 0.4), 0, 50, 1.0),
                 Annotation(Box3D(-3.0, 2.0, 0.9, 0.9, 0.9, 1.7, 0.0), 1, 20, 0.0)]
        t = render_targets(annos, **self.GRID)
        for cls, row, col in t.gt_cells:
            assert t.center[row, col, cls] == 1.0
        assert t.reg_mask.sum() == 2
        assert len(t.gt_cells) == 2
        assert t.skipped == 0

    def test_out_of_grid_skipped(self):
        from cqdet.scenes import Annotation
        annos = [Annotation(Box3D(100.0, 0.0, 0.9, 4.0, 2.0, 1.7, 0.0), 0, 9, 0.0)]
        t = render_targets(annos, **self.GRID)
        assert t.skipped == 1
        assert not t.center.any()

    def test_disjoint_split_max_equals_sum(self):
        from cqdet.scenes import Annotation
        a1 = Annotation(Box3D(-6.0, -6.0, 0.9, 1.0, 1.0, 1.7, 0.0), 0, 9, 0.0)
        a2 = Annotation(Box3D(6.0, 6.0, 0.9, 1.0, 1.0, 1.7, 0.0), 0, 9, 0.0)
        both = render_targets([a1, a2], **self.GRID)
        solo = [render_targets([a], **self.GRID) for a in (a1, a2)]
        np.testing.assert_array_equal(both.center,
                                      solo[0].center + solo[1].center)

    def test_overlap_is_elementwise_max(self):
        from cqdet.scenes import Annotation
        a1 = Annotation(Box3D(0.0, 0.0, 0.9, 4.0, 2.0, 1.7, 0.0), 0, 9, 0.0)
        a2 = Annotation(Box3D(0.8, 0.4, 0.9, 4.0, 2.0, 1.7, 0.5), 0, 9, 0.0)
        both = render_targets([a1, a2], **self.GRID)
        solo = [render_targets([a], **self.GRID) for a in (a1, a2)]
        np.testing.assert_array_equal(
            both.center, np.maximum(solo[0].center, solo[1].center))

    def test_overlap_against_per_pixel_oracle(self):
        from cqdet.scenes import Annotation
        rng = np.random.default_rng(7)
        annos = [Annotation(Box3D(rng.uniform(-4, 4), rng.uniform(-4, 4), 0.9,
                                  rng.uniform(1, 5), rng.uniform(1, 3), 1.7,
                                  rng.uniform(-np.pi, np.pi)),
                            int(rng.integers(0, 3)), 9, 0.0) for _ in range(6)]
        t = render_targets(annos, **self.GRID)
        h, w, cs, (ox, oy) = 40, 40, 0.4, (-8.0, -8.0)
        oracle = np.zeros((h, w, 3))
        for a in annos:
            col = int(math.floor((a.box.cx - ox) / cs))
            row = int(math.floor((a.box.cy - oy) / cs))
            radius = max(int(gaussian_radius(a.box.l / cs, a.box.w / cs, 0.1)), 2)
            sigma = radius / 3.0
            for r in range(h):
                for c in range(w):
                    if abs(r - row) > radius or abs(c - col) > radius:
                        continue
                    g = math.exp(-((r - row) ** 2 + (c - col) ** 2)
                                 / (2 * sigma * sigma))
                    oracle[r, c, a.class_id] = max(oracle[r, c, a.class_id], g)
        np.testing.assert_allclose(t.center, oracle, atol=1e-12)

    def test_corner_keypoints(self):
        from cqdet.scenes import Annotation
        box = Box3D(0.0, 0.0, 0.9, 4.0, 2.0, 1.7, 0.0)
        t = render_targets([Annotation(box, 0, 9, 0.0)], **self.GRID)
        cs, ox, oy = 0.4, -8.0, -8.0
        for kx, ky in [(0, 0), (2, 0), (-2, 0), (0, 1), (0, -1)]:
            row = int(math.floor((ky - oy) / cs))
            col = int(math.floor((kx - ox) / cs))
            assert t.corner[row, col, 0] == 1.0

    def test_regression_target_roundtrip(self):
        from cqdet.geom import decode_box, BoxEncoding
        from cqdet.scenes import Annotation
        box = Box3D(1.23, -2.17, 0.8, 4.1, 2.2, 1.6, 0.7)
        t = render_targets([Annotation(box, 0, 9, 0.0)], **self.GRID)
        (cls, row, col), = t.gt_cells
        cell_origin = (-8.0 + col * 0.4, -8.0 + row * 0.4)
        back = decode_box(BoxEncoding.from_array(t.reg[row, col]), cell_origin, 0.4)
        assert back.cx == pytest.approx(box.cx, abs=1e-12)
        assert back.cy == pytest.approx(box.cy, abs=1e-12)
        assert back.yaw == pytest.approx(box.yaw, abs=1e-12)


class TestHeads:
    def test_zero_features_zero_bias_gives_half(self):
        rng = np.random.default_rng(8)
        head = HeatmapHead(rng, 4, 3, "h", bias_prior=None)
        out = head(dg.Value(np.zeros((6, 6, 4))))
        for p in [head.out.b]:
            assert not p.data.any()
        np.testing.assert_allclose(out.data, 0.5, atol=1e-15)

    def test_shapes(self):
        rng = np.random.default_rng(9)
        net = PyramidNet(rng, 3, 4)
        pyr = net(make_grid(rng, 16, 16, 3))
        center, corner = predict_heads(pyr, HeatmapHead(rng, 4, 3, "c"),
                                       HeatmapHead(rng, 4, 3, "k"))
        assert center.values.shape == (32, 32, 3)
        assert corner.values.shape == (32, 32, 3)
        assert np.all((center.array > 0) & (center.array < 1))


def make_heatmap(scores, cell=0.4, origin=(0.0, 0.0)):
    return Heatmap(dg.Value(scores), cell, origin)


class TestSelectProposals:
    def test_single_bright_cell(self):
        scores = np.full((6, 6, 3), 0.1)
        scores[2, 3, 1] = 0.9
        (p,) = select_proposals(make_heatmap(scores), 1, mode="eval")
        assert (p.class_id, p.row, p.col) == (1, 2, 3)
        assert p.score == pytest.approx(0.9)
        assert p.world_xy == (pytest.approx(0.4 * 3.5), pytest.approx(0.4 * 2.5))

    def test_train_mode_gt_first(self):
        rng = np.random.default_rng(10)
        scores = rng.uniform(0, 1, (8, 8, 3))
        gt = [(0, 1, 1), (2, 5, 5), (1, 3, 7)]
        props = select_proposals(make_heatmap(scores), 6, mode="train", gt_cells=gt)
        assert [(p.class_id, p.row, p.col) for p in props[:3]] == gt
        assert all(p.is_gt for p in props[:3])
        assert not any(p.is_gt for p in props[3:])
        # GT cells carry the predicted score, not 1.0
        assert props[0].score == pytest.approx(scores[1, 1, 0])
        # the filler never repeats a GT cell and is sorted by score
        filler = [(p.class_id, p.row, p.col) for p in props[3:]]
        assert not set(filler) & set(gt)
        fill_scores = [p.score for p in props[3:]]
        assert fill_scores == sorted(fill_scores, reverse=True)

    def test_train_mode_duplicate_gt_dedup(self):
        scores = np.full((4, 4, 3), 0.5)
        props = select_proposals(make_heatmap(scores), 4, mode="train",
                                 gt_cells=[(0, 1, 1), (0, 1, 1), (1, 1, 1)])
        keys = [(p.class_id, p.row, p.col) for p in props if p.is_gt]
        assert keys == [(0, 1, 1), (1, 1, 1)]

    def test_full_sort_oracle(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(0, 1, (10, 12, 3))
        props = select_proposals(make_heatmap(scores), 50, mode="eval",
                                 local_max=False)
        flat = [(-scores[r, c, k], k, r, c)
                for r in range(10) for c in range(12) for k in range(3)]
        flat.sort()
        expect = [(k, r, c) for _, k, r, c in flat[:50]]
        assert [(p.class_id, p.row, p.col) for p in props] == expect

    def test_eval_scores_non_increasing(self):
        rng = np.random.default_rng(12)
        scores = rng.uniform(0, 1, (9, 9, 3))
        props = select_proposals(make_heatmap(scores), 30, mode="eval",
                                 local_max=True)
        vals = [p.score for p in props]
        assert vals == sorted(vals, reverse=True)

    def test_local_max_filter(self):
        scores = np.full((5, 5, 1), 0.2)
        scores[2, 2, 0] = 0.9
        scores[2, 3, 0] = 0.8  # adjacent, not a local max
        props = select_proposals(make_heatmap(scores), 2, mode="eval",
                                 local_max=True)
        assert (props[0].row, props[0].col) == (2, 2)
        assert all((p.row, p.col) != (2, 3) for p in props)

    def test_invalid_n(self):
        scores = np.zeros((4, 4, 3))
        with pytest.raises(ValueError):
            select_proposals(make_heatmap(scores), 0)
        with pytest.raises(ValueError):
            select_proposals(make_heatmap(scores), 100)

    def test_query_features_bit_exact(self):
        rng = np.random.default_rng(13)
        net = PyramidNet(rng, 3, 4)
        pyr = net(make_grid(rng, 8, 8, 3))
        scores = rng.uniform(0, 1, (16, 16, 3))
        props = select_proposals(make_heatmap(scores), 5, mode="eval",
                                 local_max=False)
        feats = query_features(pyr, props)
        fine = pyr.scales[0].values.data
        for i, p in enumerate(props):
            np.testing.assert_array_equal(feats.data[i], fine[p.row, p.col])


class TestDumps:
    def test_pgm_format(self, tmp_path):
        rng = np.random.default_rng(14)
        hm = make_heatmap(rng.uniform(0, 1, (5, 7, 3)))
        paths = write_heatmap_pgm(hm, str(tmp_path / "hm"))
        assert len(paths) == 3
        raw = (tmp_path / "hm_class0.pgm").read_bytes()
        header, rest = raw.split(b"65535\n", 1)
        assert header == b"P5\n7 5\n"
        data = np.frombuffer(rest, dtype=">u2").reshape(5, 7)
        np.testing.assert_allclose(data / 65535.0, hm.array[:, :, 0], atol=1e-4)

    def test_proposal_records(self, tmp_path):
        props = [CenterProposal(1, 2, 3, 0.5, (0.0, 0.0)),
                 CenterProposal(0, 4, 5, 0.25, (1.0, 1.0))]
        path = tmp_path / "props.txt"
        write_proposals(path, props)
        lines = path.read_text().splitlines()
        assert lines[0].split() == ["1", "2", "3", "0.5"]
