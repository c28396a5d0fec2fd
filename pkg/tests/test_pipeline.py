import numpy as np
import pytest

from cqdet import diffgrid as dg
from cqdet.config import RunConfig
from cqdet.fusion import MemoryBank
from cqdet.losses import (AdamW, LossWeights, OneCycle, TrainingDiverged,
                          compute_losses, train_step)
from cqdet.pipeline import Detector, postprocess
from cqdet.scenes import SceneConfig, generate_sequence

from conftest import micro_data, micro_model


def micro_cfg(seed=0, frames=1, fusion="saf", variant="windowed", d=16):
    cfg = RunConfig(seed=seed)
    micro_data(cfg, half_extent=6.4, voxel=0.2)
    micro_model(cfg, d=d, n_train=12, n_eval=16, variant=variant)
    cfg.model.frames = frames
    cfg.model.fusion = fusion
    return cfg


def micro_scene(seed=1, n_frames=1):
    return generate_sequence(
        SceneConfig(n_frames=n_frames, n_objects_min=3, n_objects_max=4,
                    spawn_radius=4.0, sensor_range=9.0, point_density=8.0,
                    clutter_points=40), seed)


class TestForward:
    def test_train_mode_injects_gt(self):
        model = Detector(micro_cfg())
        seq = micro_scene()
        res = model.forward(seq.frames[-1:], mode="train")
        n_gt = len({(c, r, q) for c, r, q in res.targets.gt_cells})
        gt_props = [p for p in res.proposals if p.is_gt]
        assert len(gt_props) == n_gt
        assert res.enc.shape == (len(res.proposals), 8)
        assert res.iou_pred.shape == (len(res.proposals),)
        assert len(res.boxes) == len(res.proposals)

    def test_eval_mode_counts(self):
        model = Detector(micro_cfg())
        seq = micro_scene()
        res = model.forward(seq.frames[-1:], mode="eval")
        assert len(res.proposals) <= model.cfg.model.n_eval
        assert res.targets is None

    def test_deterministic_construction(self):
        m1 = Detector(micro_cfg(seed=5))
        m2 = Detector(micro_cfg(seed=5))
        for (n1, p1), (n2, p2) in zip(sorted(m1.named_parameters().items()),
                                      sorted(m2.named_parameters().items())):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_learnable_query_init(self):
        cfg = micro_cfg()
        cfg.model.query_init = "learnable"
        model = Detector(cfg)
        seq = micro_scene()
        res = model.forward(seq.frames[-1:], mode="train")
        # every query starts from the same learned seed vector
        feats = res.queries.feats.data
        assert "query_seed" in model.named_parameters()

    def test_empty_scene_no_detections(self):
        from cqdet.scenes import Frame, PointCloud, Pose
        cfg = micro_cfg()
        model = Detector(cfg)
        frame = Frame(cloud=PointCloud.empty(), annotations=[],
                      ego_pose=Pose(0, 0, 0), timestamp=0.0)
        res = model.forward([frame], mode="eval")
        dets = postprocess(res, cfg.eval)
        # untrained model may propose cells, but the pipeline must not crash
        assert isinstance(dets, list)


class TestMultiFrame:
    def test_online_equals_offline(self):
        cfg = micro_cfg(frames=2)
        model = Detector(cfg)
        seq = micro_scene(n_frames=3)
        bank = MemoryBank(capacity=1)
        online_hm = []
        for i, frame in enumerate(seq.frames):
            prepared = model.extract_online(frame, bank)
            res = model.forward([frame], mode="eval", prepared=prepared)
            online_hm.append(res.center.array.copy())
        for i, frame in enumerate(seq.frames):
            window = seq.frames[max(0, i - 1):i + 1]
            res = model.forward(window, mode="eval")
            np.testing.assert_allclose(online_hm[i], res.center.array, atol=1e-12)

    def test_cold_start_zero_padding(self):
        cfg = micro_cfg(frames=2)
        model = Detector(cfg)
        seq = micro_scene(n_frames=1)
        res = model.forward(seq.frames[-1:], mode="eval")
        assert np.all(np.isfinite(res.center.array))

    def test_pointconcat_merges_clouds(self):
        cfg = micro_cfg(frames=2, fusion="pointconcat")
        model = Detector(cfg)
        assert model.pointconcat
        assert model.att_frames == 1
        seq = micro_scene(n_frames=2)
        merged = model._concat_clouds(seq.frames)
        assert len(merged) == sum(len(f.cloud) for f in seq.frames)
        assert np.all(merged.rel_time[:len(seq.frames[0].cloud)] < 0)
        res = model.forward(seq.frames, mode="eval")
        assert np.all(np.isfinite(res.center.array))

    def test_single_frame_ignores_bank_path(self):
        cfg = micro_cfg(frames=1)
        model = Detector(cfg)
        seq = micro_scene()
        bank = MemoryBank(capacity=1)
        a = model.extract_online(seq.frames[0], bank)
        b = model.extract(seq.frames[:1])
        np.testing.assert_array_equal(a[0].array, b[0].array)
        assert len(bank) == 0  # single-frame mode never touches the bank


class TestTrainStep:
    def test_loss_decreases_fast_on_one_scene(self):
        cfg = micro_cfg()
        cfg.train.steps = 60
        cfg.train.base_lr = 3e-3
        model = Detector(cfg)
        seq = micro_scene()
        opt = AdamW(model.named_parameters())
        sched = OneCycle(base_lr=cfg.train.base_lr, total_steps=cfg.train.steps)
        weights = LossWeights()
        first = None
        for step in range(cfg.train.steps):
            rec = train_step(model, [seq.frames[-1:]], opt, sched, step, weights)
            if step == 0:
                first = rec.total
        assert rec.total < 0.5 * first

    def test_two_runs_identical_traces(self):
        def trace():
            cfg = micro_cfg()
            model = Detector(cfg)
            seq = micro_scene()
            opt = AdamW(model.named_parameters())
            sched = OneCycle(base_lr=1e-3, total_steps=10)
            out = []
            for step in range(10):
                rec = train_step(model, [seq.frames[-1:]], opt, sched, step,
                                 LossWeights())
                out.append(rec.total)
            return out

        assert trace() == trace()

    def test_nonfinite_gradient_skips_step(self):
        cfg = micro_cfg()
        model = Detector(cfg)
        seq = micro_scene()
        opt = AdamW(model.named_parameters())
        sched = OneCycle(base_lr=1e-3, total_steps=10)

        # poison one parameter so its gradient goes non-finite
        some = next(iter(model.named_parameters().values()))
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}

        orig = opt.grads_finite
        opt.grads_finite = lambda: False
        rec = train_step(model, [seq.frames[-1:]], opt, sched, 0, LossWeights())
        assert rec.skipped
        for n, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[n])
        opt.grads_finite = orig

    def test_nan_loss_aborts_with_part_name(self):
        cfg = micro_cfg()
        model = Detector(cfg)
        seq = micro_scene()
        # poison the heatmap head: the hm loss goes NaN and must be named
        model.center_head.out.k.data[...] = np.nan
        with pytest.raises(TrainingDiverged, match="hm"):
            train_step(model, [seq.frames[-1:]],
                       AdamW(model.named_parameters()),
                       OneCycle(base_lr=1e-3, total_steps=10), 0, LossWeights())

    def test_nonfinite_regression_aborts(self):
        cfg = micro_cfg()
        model = Detector(cfg)
        seq = micro_scene()
        model.reg_head.fc2.w.data[...] = np.nan
        with pytest.raises(TrainingDiverged, match="reg"):
            train_step(model, [seq.frames[-1:]],
                       AdamW(model.named_parameters()),
                       OneCycle(base_lr=1e-3, total_steps=10), 0, LossWeights())

    def test_masking_contract_end_to_end(self):
        cfg = micro_cfg()
        model = Detector(cfg)
        seq = micro_scene()
        res = model.forward(seq.frames[-1:], mode="train")
        gt_boxes = [a.box for a in seq.frames[-1].annotations]
        parts = compute_losses(res, gt_boxes)
        # perturb a non-GT query's outputs: reg and iou losses unchanged
        non_gt = [i for i, p in enumerate(res.proposals) if not p.is_gt]
        assert non_gt
        enc2 = res.enc.data.copy()
        enc2[non_gt[0]] += 50.0
        from cqdet.losses import reg_loss
        gt_mask = np.array([p.is_gt for p in res.proposals], dtype=bool)
        target_enc = np.stack([res.targets.reg[p.row, p.col]
                               for p in res.proposals])
        l1 = float(reg_loss(dg.Value(res.enc.data), target_enc, gt_mask).data)
        l2 = float(reg_loss(dg.Value(enc2), target_enc, gt_mask).data)
        assert l1 == l2


class TestPostprocess:
    def test_rectified_order_kept_raw_scores_stored(self):
        cfg = micro_cfg()
        model = Detector(cfg)
        seq = micro_scene()
        res = model.forward(seq.frames[-1:], mode="eval")
        dets = postprocess(res, cfg.eval)
        raw_scores = {round(p.score, 12) for p in res.proposals}
        for d in dets:
            assert round(d.score, 12) in raw_scores
            assert 0.0 <= d.iou_pred <= 1.0
