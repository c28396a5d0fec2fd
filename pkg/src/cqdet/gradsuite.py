"""Registered finite-difference gradient checks for every differentiable
operation and composite block. Shared by `cqdet gradcheck` and the test
suite.

Instances are seeded; inputs are resampled away from non-differentiable
sets (relu kinks, pooling ties, bilinear lattice lines) because the
derivative is discontinuous there.
"""

from __future__ import annotations

import numpy as np

from . import cpn
from . import diffgrid as dg
from . import losses as L
from . import transformer as tfm
from .config import RunConfig
from .fusion import SpatialAwareFusion, TimeEmbedding
from .scenes import BevGrid, SceneConfig, generate_sequence
from .pipeline import Detector

CHECKS = {}


def register(name, tol=1e-4, composite=False):
    def deco(fn):
        CHECKS[name] = (fn, tol, composite)
        return fn

    return deco


def _value(rng, shape, lo=-1.0, hi=1.0, grad=True):
    return dg.Value(rng.uniform(lo, hi, shape), requires_grad=grad)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-1.0, 1.0, shape)
    sign = np.where(x >= 0.0, 1.0, -1.0)
    return dg.Value(sign * (np.abs(x) + margin), requires_grad=True)


def _jitter_params(module, rng, scale=0.1):
    """Nudge every parameter off its init point. Zero-initialized biases put
    relu-dead cells exactly on the kink (y == b), which is precisely the
    non-differentiable set the suite excludes by resampling."""
    for p in module.named_parameters().values():
        p.data += rng.uniform(0.25 * scale, scale, p.data.shape) \
            * np.where(rng.uniform(0, 1, p.data.shape) < 0.5, -1.0, 1.0)


# -- core ops ---------------------------------------------------------------


@register("linear")
def _check_linear(rng, tol, seed):
    x = _value(rng, (4, 5))
    w = dg.Parameter(rng.standard_normal((5, 3)), "w")
    b = dg.Parameter(rng.standard_normal(3), "b")
    return dg.grad_check(lambda x, w, b: dg.linear(x, w, b), [x, w, b],
                         tol=tol, seed=seed)


@register("conv2d_s1")
def _check_conv_s1(rng, tol, seed):
    x = _value(rng, (6, 6, 2))
    k = dg.Parameter(0.5 * rng.standard_normal((3, 3, 2, 3)), "k")
    b = dg.Parameter(rng.standard_normal(3), "b")
    return dg.grad_check(lambda x, k, b: dg.conv2d(x, k, b, stride=1, pad=1),
                         [x, k, b], tol=tol, seed=seed)


@register("conv2d_s2")
def _check_conv_s2(rng, tol, seed):
    x = _value(rng, (6, 6, 2))
    k = dg.Parameter(0.5 * rng.standard_normal((3, 3, 2, 3)), "k")
    b = dg.Parameter(rng.standard_normal(3), "b")
    return dg.grad_check(lambda x, k, b: dg.conv2d(x, k, b, stride=2, pad=1),
                         [x, k, b], tol=tol, seed=seed)


@register("conv2d_1x1")
def _check_conv_1x1(rng, tol, seed):
    x = _value(rng, (5, 4, 3))
    k = dg.Parameter(rng.standard_normal((1, 1, 3, 2)), "k")
    return dg.grad_check(lambda x, k: dg.conv2d(x, k, None, stride=1, pad=0),
                         [x, k], tol=tol, seed=seed)


@register("upsample_transpose_conv")
def _check_upsample(rng, tol, seed):
    x = _value(rng, (4, 3, 2))
    k = dg.Parameter(rng.standard_normal((2, 2, 2, 3)), "k")
    b = dg.Parameter(rng.standard_normal(3), "b")
    return dg.grad_check(lambda x, k, b: dg.upsample_transpose_conv(x, k, b),
                         [x, k, b], tol=tol, seed=seed)


@register("maxpool2d")
def _check_maxpool(rng, tol, seed):
    # keep window runner-ups clear of the max so FD does not cross a tie
    while True:
        x = rng.uniform(-1.0, 1.0, (5, 5, 2))
        ok = True
        pad = np.full((7, 7, 2), -np.inf)
        pad[1:6, 1:6] = x
        for i in range(5):
            for j in range(5):
                win = pad[i:i + 3, j:j + 3].reshape(-1, 2)
                top2 = np.sort(win, axis=0)[-2:]
                if np.any(top2[1] - top2[0] < 1e-3):
                    ok = False
        if ok:
            break
    xv = dg.Value(x, requires_grad=True)
    return dg.grad_check(lambda x: dg.maxpool2d(x, 3, 1), [xv], tol=tol, seed=seed)


@register("pool_global")
def _check_pool_global(rng, tol, seed):
    x = _value(rng, (4, 5, 3))
    r1 = dg.grad_check(lambda x: dg.avgpool_global(x), [x], tol=tol, seed=seed)
    flat = np.sort(x.data.reshape(-1, 3), axis=0)
    if np.any(flat[-1] - flat[-2] < 1e-3):
        x = dg.Value(x.data + np.linspace(0, 1e-2, x.size).reshape(x.shape),
                     requires_grad=True)
    r2 = dg.grad_check(lambda x: dg.maxpool_global(x), [x], tol=tol, seed=seed)
    return max(r1, r2, key=lambda r: r.max_rel_err)


@register("channel_stats")
def _check_channel_stats(rng, tol, seed):
    x = _value(rng, (4, 4, 5))
    r1 = dg.grad_check(lambda x: dg.channel_mean(x), [x], tol=tol, seed=seed)
    top2 = np.sort(x.data, axis=2)[:, :, -2:]
    if np.any(top2[:, :, 1] - top2[:, :, 0] < 1e-3):
        x = dg.Value(x.data * np.linspace(1.0, 2.0, 5)[None, None, :],
                     requires_grad=True)
    r2 = dg.grad_check(lambda x: dg.channel_max(x), [x], tol=tol, seed=seed)
    return max(r1, r2, key=lambda r: r.max_rel_err)


@register("gates")
def _check_gates(rng, tol, seed):
    x = _value(rng, (4, 4, 3))
    s = _value(rng, (3,))
    m = _value(rng, (4, 4, 1))
    r1 = dg.grad_check(lambda x, s: dg.scale_channels(x, s), [x, s], tol=tol, seed=seed)
    r2 = dg.grad_check(lambda x, m: dg.scale_spatial(x, m), [x, m], tol=tol, seed=seed)
    return max(r1, r2, key=lambda r: r.max_rel_err)


@register("relu")
def _check_relu(rng, tol, seed):
    x = _away_from_zero(rng, (4, 6))
    return dg.grad_check(lambda x: dg.relu(x), [x], tol=tol, seed=seed)


@register("sigmoid_exp_log")
def _check_sigmoid_exp_log(rng, tol, seed):
    x = _value(rng, (3, 4))
    r1 = dg.grad_check(lambda x: dg.sigmoid(x), [x], tol=tol, seed=seed)
    r2 = dg.grad_check(lambda x: dg.exp(x), [x], tol=tol, seed=seed)
    xp = _value(rng, (3, 4), lo=0.1, hi=2.0)
    r3 = dg.grad_check(lambda x: dg.log(x), [xp], tol=tol, seed=seed)
    return max(r1, r2, r3, key=lambda r: r.max_rel_err)


@register("clamp")
def _check_clamp(rng, tol, seed):
    # keep samples off the clamp boundaries
    x = rng.uniform(-1.0, 1.0, (4, 4))
    x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, x * 0.8, x)
    xv = dg.Value(x, requires_grad=True)
    return dg.grad_check(lambda x: dg.clamp(x, -0.5, 0.5), [xv], tol=tol, seed=seed)


@register("arith")
def _check_arith(rng, tol, seed):
    a = _value(rng, (3, 4))
    b = _value(rng, (3, 4))
    bias = _value(rng, (4,))
    r = [dg.grad_check(lambda a, b: dg.add(a, b), [a, b], tol=tol, seed=seed),
         dg.grad_check(lambda a, bias: dg.add(a, bias), [a, bias], tol=tol, seed=seed),
         dg.grad_check(lambda a, b: dg.sub(a, b), [a, b], tol=tol, seed=seed),
         dg.grad_check(lambda a, b: dg.mul(a, b), [a, b], tol=tol, seed=seed),
         dg.grad_check(lambda a: dg.scale(a, -1.7), [a], tol=tol, seed=seed)]
    return max(r, key=lambda x: x.max_rel_err)


@register("shape_ops")
def _check_shape_ops(rng, tol, seed):
    a = _value(rng, (3, 4, 2))
    b = _value(rng, (3, 2, 2))
    idx = rng.integers(0, 3, size=5)
    r = [
        dg.grad_check(lambda a, b: dg.concat([a, b], axis=1), [a, b], tol=tol, seed=seed),
        dg.grad_check(lambda a: dg.narrow(a, 1, 1, 2), [a], tol=tol, seed=seed),
        dg.grad_check(lambda a: dg.reshape(a, (6, 4)), [a], tol=tol, seed=seed),
        dg.grad_check(lambda a: dg.transpose(a, (2, 0, 1)), [a], tol=tol, seed=seed),
        dg.grad_check(lambda a: dg.gather_rows(a, idx), [a], tol=tol, seed=seed),
        dg.grad_check(lambda a: dg.sum_axis(a, 1), [a], tol=tol, seed=seed),
    ]
    x = _value(rng, (3, 2, 2))
    r.append(dg.grad_check(lambda x: dg.embed2d(x, (5, 4), (1, 1)), [x],
                           tol=tol, seed=seed))
    return max(r, key=lambda x: x.max_rel_err)


@register("matmul")
def _check_matmul(rng, tol, seed):
    a = _value(rng, (4, 3))
    b = _value(rng, (3, 5))
    r1 = dg.grad_check(lambda a, b: dg.matmul(a, b), [a, b], tol=tol, seed=seed)
    ab = _value(rng, (2, 3, 4))
    bb = _value(rng, (2, 4, 2))
    r2 = dg.grad_check(lambda a, b: dg.matmul(a, b), [ab, bb], tol=tol, seed=seed)
    return max(r1, r2, key=lambda r: r.max_rel_err)


@register("softmax")
def _check_softmax(rng, tol, seed):
    x = _value(rng, (2, 7), lo=-2.0, hi=2.0)
    return dg.grad_check(lambda x: dg.softmax(x, axis=-1), [x], tol=tol, seed=seed)


@register("layernorm")
def _check_layernorm(rng, tol, seed):
    x = _value(rng, (3, 8))
    g = dg.Parameter(1.0 + 0.2 * rng.standard_normal(8), "g")
    b = dg.Parameter(0.2 * rng.standard_normal(8), "b")
    return dg.grad_check(lambda x, g, b: dg.layernorm(x, g, b), [x, g, b],
                         tol=tol, seed=seed)


def _safe_coords(rng, n, h, w):
    """Fractional parts kept away from the integer lattice lines."""
    rows = rng.integers(0, h - 1, n) + rng.uniform(0.2, 0.8, n)
    cols = rng.integers(0, w - 1, n) + rng.uniform(0.2, 0.8, n)
    return np.stack([rows, cols], axis=1)


@register("bilinear_sample")
def _check_bilinear(rng, tol, seed):
    x = _value(rng, (5, 6, 3))
    coords = dg.Value(_safe_coords(rng, 8, 5, 6), requires_grad=True)
    return dg.grad_check(lambda x, c: dg.bilinear_sample(x, c), [x, coords],
                         tol=tol, seed=seed)


# -- loss ops ---------------------------------------------------------------


@register("focal_loss")
def _check_focal(rng, tol, seed):
    target = np.zeros((5, 5, 2))
    target[1, 2, 0] = 1.0
    target[3, 1, 1] = 1.0
    target[1, 1, 0] = 0.6
    pred = dg.Value(rng.uniform(0.05, 0.95, (5, 5, 2)), requires_grad=True)
    return dg.grad_check(lambda p: L.focal_heatmap_loss(p, target), [pred],
                         tol=tol, seed=seed)


@register("reg_iou_corner_loss")
def _check_small_losses(rng, tol, seed):
    pred = _value(rng, (6, 8))
    target = rng.uniform(-1.0, 1.0, (6, 8))
    # keep |err| away from 0 (L1 kink) and 1 (smooth-L1 transition)
    target = np.where(np.abs(pred.data - target) < 1e-3, target + 0.01, target)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
    r1 = dg.grad_check(lambda p: L.reg_loss(p, target, mask), [pred], tol=tol, seed=seed)

    iou_p = dg.Value(rng.uniform(0.1, 0.9, 6), requires_grad=True)
    iou_t = rng.uniform(0.0, 1.0, 6)
    iou_t = np.where(np.abs(iou_p.data - iou_t) < 1e-3, iou_t + 0.01, iou_t)
    r2 = dg.grad_check(lambda p: L.iou_loss(p, iou_t, mask), [iou_p], tol=tol, seed=seed)

    cp = dg.Value(rng.uniform(0.0, 1.0, (4, 4, 2)), requires_grad=True)
    ct = np.where(rng.uniform(0, 1, (4, 4, 2)) > 0.6, rng.uniform(0.2, 1.0, (4, 4, 2)), 0.0)
    r3 = dg.grad_check(lambda p: L.corner_loss(p, ct), [cp], tol=tol, seed=seed)
    return max(r1, r2, r3, key=lambda r: r.max_rel_err)


# -- composite blocks -------------------------------------------------------


def _random_pyramid(rng, d, fine_hw=(8, 8), grad=True):
    h, w = fine_hw
    fine = BevGrid(_value(rng, (h, w, d), grad=grad), 0.4, (0.0, 0.0))
    mid = BevGrid(_value(rng, (h // 2, w // 2, d), grad=grad), 0.8, (0.0, 0.0))
    coarse = BevGrid(_value(rng, (h // 4, w // 4, d), grad=grad), 1.6, (0.0, 0.0))
    return cpn.FeaturePyramid(scales=[fine, mid, coarse])


def _proposals_on(rng, n, h, w):
    out = []
    cells = rng.choice(h * w, size=n, replace=False)
    for c in cells:
        row, col = divmod(int(c), w)
        xy = (0.4 * (col + 0.5), 0.4 * (row + 0.5))
        out.append(cpn.CenterProposal(class_id=int(rng.integers(0, 3)), row=row,
                                      col=col, score=float(rng.uniform(0, 1)),
                                      world_xy=xy))
    return out


def _query_set(rng, embedder, proposals, d):
    feats = _value(rng, (len(proposals), d))
    positions = np.array([p.world_xy for p in proposals])
    return feats, positions


@register("cbam", tol=1e-4, composite=True)
def _check_cbam(rng, tol, seed):
    block = cpn.CBAM(rng, 4, "cbam", reduction=2)
    _jitter_params(block, rng)
    x = _value(rng, (8, 8, 4))

    def fn(*_):
        return block(x)

    inputs = [x, *block.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=12)


@register("pyramid", tol=1e-3, composite=True)
def _check_pyramid(rng, tol, seed):
    net = cpn.PyramidNet(rng, 4, 4, "pyr")
    _jitter_params(net, rng)
    bev = BevGrid(_value(rng, (16, 16, 4)), 0.8, (0.0, 0.0))

    def fn(*_):
        pyr = net(bev)
        acc = dg.sum_all(pyr.scales[0].values)
        acc = dg.add(acc, dg.sum_all(pyr.scales[1].values))
        return dg.add(acc, dg.sum_all(pyr.scales[2].values))

    inputs = [bev.values, *net.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=6)


@register("self_attention", tol=1e-4, composite=True)
def _check_self_attention(rng, tol, seed):
    cfg = tfm.AttentionConfig(d=8, heads=2, layers=1)
    layer = tfm.SelfAttention(rng, cfg, "sa")
    _jitter_params(layer, rng)
    embedder = tfm.PositionEmbedder(rng, 8, "linear", (-4.0, -4.0, 4.0, 4.0))
    proposals = _proposals_on(rng, 5, 8, 8)
    feats, positions = _query_set(rng, embedder, proposals, 8)

    def fn(*_):
        qs = tfm.QuerySet(feats=feats, positions=positions,
                          pos_embed=embedder(positions), proposals=proposals)
        return layer(qs).feats

    inputs = [feats, *layer.named_parameters().values(),
              *embedder.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=10)


@register("msca", tol=1e-3, composite=True)
def _check_msca(rng, tol, seed):
    cfg = tfm.AttentionConfig(d=8, heads=2, layers=1)
    layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
    _jitter_params(layer, rng)
    embedder = tfm.PositionEmbedder(rng, 8, "linear", (-4.0, -4.0, 4.0, 4.0))
    pyr = _random_pyramid(rng, 8)
    proposals = _proposals_on(rng, 4, 8, 8)
    feats, positions = _query_set(rng, embedder, proposals, 8)

    def fn(*_):
        qs = tfm.QuerySet(feats=feats, positions=positions,
                          pos_embed=embedder(positions), proposals=proposals)
        return layer(qs, pyr, embedder).feats

    inputs = [feats, pyr.scales[0].values, *layer.named_parameters().values(),
              *embedder.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=8)


@register("msdca", tol=1e-3, composite=True)
def _check_msdca(rng, tol, seed):
    cfg = tfm.AttentionConfig(d=8, heads=2, layers=1, variant="deformable",
                              k_samples=4)
    layer = tfm.DeformableCrossAttention(rng, cfg, "msdca")
    _jitter_params(layer, rng, scale=0.05)
    layer.offset.w.data[...] = 0.01 * rng.standard_normal(layer.offset.w.data.shape)
    embedder = tfm.PositionEmbedder(rng, 8, "linear", (-4.0, -4.0, 4.0, 4.0))
    pyr = _random_pyramid(rng, 8)
    proposals = _proposals_on(rng, 3, 8, 8)
    feats, positions = _query_set(rng, embedder, proposals, 8)

    def fn(*_):
        qs = tfm.QuerySet(feats=feats, positions=positions,
                          pos_embed=embedder(positions), proposals=proposals)
        return layer(qs, pyr).feats

    inputs = [feats, pyr.scales[0].values, *layer.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=8)


@register("decoder_block", tol=1e-3, composite=True)
def _check_decoder_block(rng, tol, seed):
    cfg = tfm.AttentionConfig(d=8, heads=2, layers=1)
    block = tfm.DecoderBlock(rng, cfg, "blk")
    _jitter_params(block, rng, scale=0.05)
    embedder = tfm.PositionEmbedder(rng, 8, "linear", (-4.0, -4.0, 4.0, 4.0))
    pyr = _random_pyramid(rng, 8)
    proposals = _proposals_on(rng, 4, 8, 8)
    feats, positions = _query_set(rng, embedder, proposals, 8)

    def fn(*_):
        qs = tfm.QuerySet(feats=feats, positions=positions,
                          pos_embed=embedder(positions), proposals=proposals)
        return block(qs, pyr, embedder).feats

    inputs = [feats, *block.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=6)


@register("saf", tol=1e-3, composite=True)
def _check_saf(rng, tol, seed):
    te = TimeEmbedding(2, 6)
    te.table.data[...] = 0.1 * rng.standard_normal(te.table.data.shape)
    saf = SpatialAwareFusion(rng, 6, 2, te, "saf")
    _jitter_params(saf, rng)
    cur = BevGrid(_value(rng, (8, 8, 6)), 0.8, (0.0, 0.0))
    prev = BevGrid(_value(rng, (8, 8, 6)), 0.8, (0.0, 0.0))

    def fn(*_):
        return saf(cur, [prev]).values

    inputs = [cur.values, prev.values, *saf.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=8)


@register("regression_head", tol=1e-4, composite=True)
def _check_reg_head(rng, tol, seed):
    head = tfm.RegressionHead(rng, 8)
    _jitter_params(head, rng)
    feats = _value(rng, (4, 8))
    proposals = _proposals_on(rng, 4, 8, 8)

    def fn(*_):
        qs = tfm.QuerySet(feats=feats, positions=np.zeros((4, 2)),
                          pos_embed=dg.Value(np.zeros((4, 8))), proposals=proposals)
        enc, iou = head(qs)
        return dg.concat([enc, dg.reshape(iou, (4, 1))], axis=1)

    inputs = [feats, *head.named_parameters().values()]
    return dg.grad_check(fn, inputs, tol=tol, seed=seed, max_elements=10)


def micro_run_config(seed=0, variant="windowed", n_train=4, half_extent=6.4,
                     d=8):
    """A 16x16-BEV-scale configuration for end-to-end checks and overfit runs."""
    cfg = RunConfig(seed=seed)
    cfg.data.x_min = cfg.data.y_min = -half_extent
    cfg.data.x_max = cfg.data.y_max = half_extent
    cfg.data.voxel_x = cfg.data.voxel_y = 0.2
    cfg.data.voxel_z = 0.6
    cfg.model.variant = variant
    cfg.model.d = d
    cfg.model.heads = 2
    cfg.model.layers = 1
    cfg.model.k_samples = 4
    cfg.model.n_train = n_train
    cfg.model.n_eval = 32
    return cfg


@register("total_loss", tol=1e-3, composite=True)
def _check_total_loss(rng, tol, seed):
    scene_cfg = SceneConfig(n_frames=1, n_objects_min=2, n_objects_max=2,
                            spawn_radius=4.0, sensor_range=9.0,
                            point_density=4.0, clutter_points=20)
    seq = generate_sequence(scene_cfg, int(rng.integers(0, 2 ** 31)))
    frame = seq.frames[-1]
    # scale-1 grid of the 8x8 BEV microconfig: 16x16 cells of 0.8 m
    targets = cpn.render_targets(frame.annotations, 16, 16, 0.8, (-6.4, -6.4))
    n_gt = len({(c, r, q) for c, r, q in targets.gt_cells})
    cfg = micro_run_config(seed=int(rng.integers(0, 2 ** 31)), n_train=max(n_gt, 1))
    model = Detector(cfg)
    _jitter_params(model, rng, scale=0.05)
    gt_boxes = [a.box for a in frame.annotations]

    base = model.forward([frame], mode="train")
    frozen_iou = L.iou_targets(base.boxes, gt_boxes)
    weights = L.LossWeights()

    def fn(*_):
        result = model.forward([frame], mode="train")
        parts = L.compute_losses(result, gt_boxes, iou_target_override=frozen_iou)
        return L.total_loss(parts, weights)

    params = list(model.named_parameters().values())
    chosen = rng.choice(len(params), size=2, replace=False)
    return dg.grad_check(fn, [params[i] for i in chosen], tol=tol, seed=seed,
                         max_elements=1)


# -- runner -------------------------------------------------------------------


def run_check(name, instances=100, base_seed=0):
    """Run one named check over seeded instances; returns the worst report.

    Composite instances get up to two deterministic resamples: their finite
    differences probe deep stacks where a sampled element occasionally sits
    within the FD step of a relu kink or pooling tie (the non-differentiable
    set the suite excludes). A genuine backward bug is systematic and fails
    every resample; a kink collision is seed-specific and vanishes."""
    fn, tol, composite = CHECKS[name]
    worst = None
    for i in range(instances):
        retries = 3 if composite else 1
        rep = None
        for attempt in range(retries):
            rng = np.random.default_rng((base_seed * 100003 + i) * 7 + attempt)
            rep = fn(rng, tol, seed=i)
            if rep.ok:
                break
        if worst is None or rep.max_rel_err > worst.max_rel_err:
            worst = rep
        if not rep.ok:
            break
    return worst


def run_suite(names=None, instances=100, base_seed=0, log=None):
    """Run the full suite; returns {name: GradReport}."""
    results = {}
    for name in (names or CHECKS):
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck module {name!r}; "
                           f"choose from {sorted(CHECKS)}")
        rep = run_check(name, instances=instances, base_seed=base_seed)
        results[name] = rep
        if log:
            log(f"{name:<22} {'pass' if rep.ok else 'FAIL'}  "
                f"max rel err {rep.max_rel_err:.3e} (tol {rep.tol:.0e})")
    return results
