"""Full detector assembly: voxelize -> encode -> (fuse) -> pyramid -> heads ->
proposals -> center-query decoder -> regression head, for single- and
multi-frame operation, plus detection post-processing (rectified-score NMS).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cpn
from . import diffgrid as dg
from .config import RunConfig
from .fusion import MemoryBank, SpatialAwareFusion, TimeEmbedding, warp_bev
from .geom import Detection, rotated_nms
from .losses import TrainingDiverged
from .layers import Module
from .scenes import (VOXEL_FEATS, BevEncoder, BevGrid, PointCloud, align_points,
                     bev_project, voxelize)
from .transformer import (AttentionConfig, Decoder, PositionEmbedder, QuerySet,
                          RegressionHead, decode_query_boxes)


@dataclass
class ForwardResult:
    center: cpn.Heatmap
    corner: cpn.Heatmap
    pyramid: cpn.FeaturePyramid
    proposals: list
    queries: QuerySet
    enc: dg.Value          # (n, 8)
    iou_pred: dg.Value     # (n,)
    boxes: list            # decoded Box3D per query
    targets: cpn.TargetMaps | None = None


class Detector(Module):
    """The end-to-end model. Construction is deterministic given cfg.seed."""

    def __init__(self, cfg: RunConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        m = cfg.model
        nx, ny, nz = cfg.data.grid_dims()
        self.grid_dims = (nx, ny, nz)
        self.pointconcat = m.frames > 1 and m.fusion == "pointconcat"
        self.att_frames = m.frames if (m.frames > 1 and m.fusion == "saf") else 1
        feat_dim = VOXEL_FEATS + (1 if self.pointconcat else 0)

        self.encoder = BevEncoder(rng, nz, m.d, feat_dim=feat_dim)
        self.pyramid_net = cpn.PyramidNet(rng, m.d, m.d)
        self.center_head = cpn.HeatmapHead(rng, m.d, cpn.N_CLASSES, "center_head")
        self.corner_head = cpn.HeatmapHead(rng, m.d, cpn.N_CLASSES, "corner_head")
        self.embedder = PositionEmbedder(rng, m.d, m.pos_embed, cfg.data.extent())
        self.att_cfg = AttentionConfig(
            d=m.d, heads=m.resolved_heads(), layers=m.resolved_layers(),
            variant=m.variant, window=m.window, k_samples=m.k_samples,
            frames=self.att_frames, query_init=m.query_init, pos_embed=m.pos_embed)
        self.decoder = Decoder(rng, self.att_cfg)
        self.reg_head = RegressionHead(rng, m.d)
        if self.att_frames > 1:
            self.time_embed = TimeEmbedding(self.att_frames, m.d)
            self.saf = SpatialAwareFusion(rng, m.d, self.att_frames, self.time_embed)
        if m.query_init == "learnable":
            self.query_seed = dg.Parameter(rng.normal(0.0, 0.1, (m.d,)), "query_seed")

    # -- per-frame feature extraction ------------------------------------

    def encode_frame_cloud(self, cloud: PointCloud) -> BevGrid:
        vg = voxelize(cloud, self.cfg.data.vrange(), self.cfg.data.voxel(),
                      with_rel_time=self.pointconcat)
        return bev_project(vg, self.encoder)

    def _zero_bev(self, like: BevGrid) -> BevGrid:
        return BevGrid(dg.Value(np.zeros(like.values.shape)), like.cell_size,
                       like.origin)

    def _concat_clouds(self, window) -> PointCloud:
        cur = window[-1]
        clouds = []
        for fr in window[:-1]:
            aligned = align_points(fr.cloud, fr.ego_pose, cur.ego_pose)
            aligned.rel_time[...] = fr.timestamp - cur.timestamp
            clouds.append(aligned)
        clouds.append(cur.cloud)
        return PointCloud.merge(clouds)

    def extract(self, window):
        """window: list of Frame, oldest..current. Returns (fused BevGrid,
        current pyramid, prev pyramids for cross-attention keys)."""
        cur = window[-1]
        if self.pointconcat:
            bev = self.encode_frame_cloud(self._concat_clouds(window))
            pyr = self.pyramid_net(bev)
            return bev, pyr, ()
        if self.att_frames == 1:
            bev = self.encode_frame_cloud(cur.cloud)
            pyr = self.pyramid_net(bev)
            return bev, pyr, ()
        cur_bev = self.encode_frame_cloud(cur.cloud)
        prevs = []
        for fr in reversed(window[:-1]):         # newest first: lag 1, 2, ...
            prev_bev = self.encode_frame_cloud(fr.cloud)
            prevs.append(warp_bev(prev_bev, fr.ego_pose, cur.ego_pose))
        while len(prevs) < self.att_frames - 1:  # cold start: zero features
            prevs.append(self._zero_bev(cur_bev))
        fused = self.saf(cur_bev, prevs)
        pyr = self.pyramid_net(fused)
        prev_pyrs = tuple(self.pyramid_net(p) for p in prevs)
        return fused, pyr, prev_pyrs

    def extract_online(self, frame, bank: MemoryBank):
        """Online variant: previous BEV features come from the memory bank.
        Pushes the current features afterwards. Falls back to zero features
        while the bank is filling."""
        if self.pointconcat:
            raise ValueError("point-concatenation mode needs raw previous clouds; "
                             "use extract() over a frame window")
        cur_bev = self.encode_frame_cloud(frame.cloud)
        if self.att_frames == 1:
            return cur_bev, self.pyramid_net(cur_bev), ()
        prevs = [warp_bev(bank.as_grid(e), e.pose, frame.ego_pose)
                 for e in bank.peek(self.att_frames - 1)]
        while len(prevs) < self.att_frames - 1:
            prevs.append(self._zero_bev(cur_bev))
        fused = self.saf(cur_bev, prevs)
        pyr = self.pyramid_net(fused)
        prev_pyrs = tuple(self.pyramid_net(p) for p in prevs)
        bank.push(cur_bev, frame.ego_pose, frame.timestamp)
        return fused, pyr, prev_pyrs

    # -- full forward -----------------------------------------------------

    def _query_set(self, pyr, proposals) -> QuerySet:
        feats = cpn.query_features(pyr, proposals)
        if self.cfg.model.query_init == "learnable":
            ones = dg.Value(np.ones((len(proposals), 1)))
            feats = dg.matmul(ones, dg.reshape(self.query_seed, (1, -1)))
        positions = np.array([p.world_xy for p in proposals], dtype=np.float64)
        pos_embed = self.embedder(positions)
        return QuerySet(feats=feats, positions=positions, pos_embed=pos_embed,
                        proposals=proposals)

    def forward(self, window, mode: str = "eval", annotations=None,
                prepared=None, trace=None) -> ForwardResult:
        """Run the pipeline on a frame window (oldest..current).

        train mode needs the current frame's annotations: targets are
        rendered and GT center cells are injected as the first proposals.
        """
        bev, pyr, prev_pyrs = prepared if prepared is not None else self.extract(window)
        center, corner = cpn.predict_heads(pyr, self.center_head, self.corner_head)

        targets = None
        fine = pyr.scales[0]
        if mode == "train":
            if annotations is None:
                annotations = window[-1].annotations
            targets = cpn.render_targets(annotations, fine.h, fine.w,
                                         fine.cell_size, fine.origin)
            proposals = cpn.select_proposals(center, self.cfg.model.n_train,
                                             mode="train", gt_cells=targets.gt_cells)
        else:
            proposals = cpn.select_proposals(center, self.cfg.model.n_eval,
                                             mode="eval",
                                             local_max=self.cfg.model.local_max_eval)
        if not proposals:
            empty = dg.Value(np.zeros((0, self.cfg.model.d)))
            queries = QuerySet(feats=empty, positions=np.zeros((0, 2)),
                               pos_embed=dg.Value(np.zeros((0, self.cfg.model.d))),
                               proposals=[])
            return ForwardResult(center, corner, pyr, [], queries,
                                 dg.Value(np.zeros((0, 8))), dg.Value(np.zeros(0)),
                                 [], targets)

        queries = self._query_set(pyr, proposals)
        time_embeds = (self.time_embed.slots(self.att_frames)
                       if self.att_frames > 1 else None)
        decoded = self.decoder(queries, pyr, self.embedder, prev_pyrs=prev_pyrs,
                               time_embeds=time_embeds, trace=trace)
        enc, iou_pred = self.reg_head(decoded)
        if not (np.all(np.isfinite(enc.data)) and np.all(np.isfinite(iou_pred.data))):
            raise TrainingDiverged("loss part 'reg' is not finite "
                                   "(regression head emitted non-finite values)")
        boxes = decode_query_boxes(enc.data, proposals, fine.cell_size, fine.origin)
        return ForwardResult(center, corner, pyr, proposals, decoded, enc,
                             iou_pred, boxes, targets)


def rectified_scores(result: ForwardResult, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    out = np.empty(len(result.proposals))
    for i, p in enumerate(result.proposals):
        iou = float(result.iou_pred.data[i])
        b = beta[p.class_id]
        out[i] = p.score * (1.0 if b == 0.0 else iou ** b)
    return out


def postprocess(result: ForwardResult, eval_cfg) -> list:
    """NMS ordered by rectified score; emitted records keep the raw score and
    the predicted IoU so evaluation controls rectification."""
    if not result.proposals:
        return []
    rect = rectified_scores(result, eval_cfg.beta)
    order_dets = [Detection(box=result.boxes[i], class_id=p.class_id,
                            score=min(max(rect[i], 0.0), 1.0), iou_pred=float(result.iou_pred.data[i]))
                  for i, p in enumerate(result.proposals)]
    keep = rotated_nms(order_dets, eval_cfg.nms_iou)
    return [Detection(box=result.boxes[i], class_id=result.proposals[i].class_id,
                      score=result.proposals[i].score,
                      iou_pred=float(result.iou_pred.data[i]))
            for i in keep]
