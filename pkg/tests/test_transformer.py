import numpy as np
import pytest

from cqdet import diffgrid as dg
from cqdet import transformer as tfm
from cqdet.cpn import CenterProposal, FeaturePyramid
from cqdet.geom import decode_box
from cqdet.scenes import BevGrid


def layernorm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps) * gain + bias


def softmax_np(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def bilinear_np(grid, r, q):
    h, w, _ = grid.shape
    r0, q0 = int(np.floor(r)), int(np.floor(q))
    fr, fq = r - r0, q - q0
    out = np.zeros(grid.shape[2])
    for dr, dq, wgt in ((0, 0, (1 - fr) * (1 - fq)), (0, 1, (1 - fr) * fq),
                        (1, 0, fr * (1 - fq)), (1, 1, fr * fq)):
        ri, qi = r0 + dr, q0 + dq
        if 0 <= ri < h and 0 <= qi < w:
            out += wgt * grid[ri, qi]
    return out


def make_setup(seed, d=8, heads=2, n=5, hw=8, variant="windowed", k_samples=4,
               frames=1):
    rng = np.random.default_rng(seed)
    cfg = tfm.AttentionConfig(d=d, heads=heads, layers=1, variant=variant,
                              k_samples=k_samples, frames=frames)
    emb = tfm.PositionEmbedder(rng, d, "linear", (-4.0, -4.0, 4.0, 4.0))
    grids = [BevGrid(dg.Value(rng.standard_normal((hw >> s, hw >> s, d))),
                     0.4 * 2 ** s, (0.0, 0.0)) for s in range(3)]
    pyr = FeaturePyramid(scales=grids)
    props = []
    for _ in range(n):
        r, c = int(rng.integers(0, hw)), int(rng.integers(0, hw))
        props.append(CenterProposal(int(rng.integers(0, 3)), r, c, 0.5,
                                    (0.4 * (c + 0.5), 0.4 * (r + 0.5))))
    feats = rng.standard_normal((n, d))
    positions = np.array([p.world_xy for p in props])
    qs = tfm.QuerySet(feats=dg.Value(feats), positions=positions,
                      pos_embed=emb(positions), proposals=props)
    return rng, cfg, emb, pyr, qs


def naive_self_attention(layer, qs):
    f = qs.feats.data
    epos = qs.pos_embed.data
    n, d = f.shape
    m_heads = layer.cfg.heads
    dh = d // m_heads
    out = np.zeros_like(f)
    for i in range(n):
        acc = np.zeros(d)
        for m in range(m_heads):
            sl = slice(m * dh, (m + 1) * dh)
            qi = (f[i] @ layer.wq.data + epos[i])[sl]
            logits = np.array([qi @ ((f[j] @ layer.wk.data + epos[j])[sl])
                               / np.sqrt(dh) for j in range(n)])
            a = softmax_np(logits)
            ctx = sum(a[j] * (f[j] @ layer.wv.data)[sl] for j in range(n))
            acc += ctx @ layer.wm.data[m]
        out[i] = layernorm_np(f[i] + acc, layer.ln.gain.data, layer.ln.bias.data)
    return out


def naive_msca(layer, qs, pyr, emb, prev_pyrs=(), time_embeds=None):
    f = qs.feats.data
    n, d = f.shape
    m_heads = layer.cfg.heads
    dh = d // m_heads

    def epos_of(xy):
        if emb.mode == "none":
            return np.zeros(d)
        x0, y0, x1, y1 = emb.extent
        norm = np.array([2 * (xy[0] - x0) / (x1 - x0) - 1,
                         2 * (xy[1] - y0) / (y1 - y0) - 1])
        return norm @ emb.fc.w.data + emb.fc.b.data

    out = np.zeros_like(f)
    for i, p in enumerate(qs.proposals):
        keys, vals = [], []
        for f_idx, pyramid in enumerate((pyr, *prev_pyrs)):
            for s, g in enumerate(pyramid.scales):
                gh, gw, _ = g.values.shape
                cr, cc = p.row >> s, p.col >> s
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        r, c = cr + dr, cc + dc
                        feat = g.values.data[r, c] \
                            if (0 <= r < gh and 0 <= c < gw) else np.zeros(d)
                        xy = (g.origin[0] + (c + 0.5) * g.cell_size,
                              g.origin[1] + (r + 0.5) * g.cell_size)
                        k = feat @ layer.wk.data + epos_of(xy) \
                            + layer.scale_embed.data[s]
                        if time_embeds is not None:
                            k = k + time_embeds[f_idx].data
                        keys.append(k)
                        vals.append(feat @ layer.wv.data)
        keys, vals = np.array(keys), np.array(vals)
        qfull = f[i] @ layer.wq.data + epos_of(qs.positions[i])
        acc = np.zeros(d)
        for m in range(m_heads):
            sl = slice(m * dh, (m + 1) * dh)
            a = softmax_np(keys[:, sl] @ qfull[sl] / np.sqrt(dh))
            acc += (a @ vals[:, sl]) @ layer.wm.data[m]
        out[i] = layernorm_np(f[i] + acc, layer.ln.gain.data, layer.ln.bias.data)
    return out


def naive_msdca(layer, qs, pyr, prev_pyrs=(), time_embeds=None):
    f = qs.feats.data
    n, d = f.shape
    cfg = layer.cfg
    m_heads, s_n, k_n = cfg.heads, cfg.n_scales, cfg.k_samples
    frames = (pyr, *prev_pyrs)
    out = np.zeros_like(f)
    for i in range(n):
        off = (f[i] @ layer.offset.w.data + layer.offset.b.data) \
            .reshape(m_heads, s_n, k_n, 2)
        logits = (f[i] @ layer.attn_proj.w.data) \
            .reshape(m_heads, len(frames) * s_n * k_n)
        acc = np.zeros(d)
        for m in range(m_heads):
            a = softmax_np(logits[m])
            ctx = np.zeros(d)
            j = 0
            for f_idx, pyramid in enumerate(frames):
                for s in range(s_n):
                    g = pyramid.scales[s]
                    ref_r = (qs.positions[i, 1] - g.origin[1]) / g.cell_size - 0.5
                    ref_c = (qs.positions[i, 0] - g.origin[0]) / g.cell_size - 0.5
                    for k in range(k_n):
                        sample = bilinear_np(g.values.data,
                                             ref_r + off[m, s, k, 0],
                                             ref_c + off[m, s, k, 1])
                        if time_embeds is not None:
                            sample = sample + time_embeds[f_idx].data
                        ctx += a[j] * sample
                        j += 1
            acc += ctx @ layer.wm.data[m]
        out[i] = layernorm_np(f[i] + acc, layer.ln.gain.data, layer.ln.bias.data)
    return out


class TestSelfAttention:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng, cfg, emb, pyr, qs = make_setup(seed)
        layer = tfm.SelfAttention(rng, cfg, "sa")
        out = layer(qs).feats.data
        np.testing.assert_allclose(out, naive_self_attention(layer, qs),
                                   atol=1e-12)

    def test_single_query_degenerate(self):
        rng, cfg, emb, pyr, qs = make_setup(3, n=1)
        layer = tfm.SelfAttention(rng, cfg, "sa")
        out = layer(qs).feats.data
        f = qs.feats.data[0]
        v = f @ layer.wv.data
        dh = cfg.head_dim
        mixed = sum(v[m * dh:(m + 1) * dh] @ layer.wm.data[m]
                    for m in range(cfg.heads))
        expect = layernorm_np(f + mixed, layer.ln.gain.data, layer.ln.bias.data)
        np.testing.assert_allclose(out[0], expect, atol=1e-12)

    def test_identical_queries_uniform_attention(self):
        rng, cfg, emb, pyr, qs = make_setup(4, n=6)
        feats = np.tile(qs.feats.data[:1], (6, 1))
        positions = np.tile(qs.positions[:1], (6, 1))
        qs2 = tfm.QuerySet(feats=dg.Value(feats), positions=positions,
                           pos_embed=emb(positions), proposals=qs.proposals)
        layer = tfm.SelfAttention(rng, cfg, "sa")
        out = layer(qs2).feats.data
        # uniform attention over identical keys: every output row identical
        np.testing.assert_allclose(out, np.tile(out[:1], (6, 1)), atol=1e-12)

    def test_permutation_equivariance(self):
        rng, cfg, emb, pyr, qs = make_setup(5, n=7)
        layer = tfm.SelfAttention(rng, cfg, "sa")
        base = layer(qs).feats.data
        perm = np.random.default_rng(0).permutation(7)
        qs_p = tfm.QuerySet(feats=dg.Value(qs.feats.data[perm]),
                            positions=qs.positions[perm],
                            pos_embed=dg.Value(qs.pos_embed.data[perm]),
                            proposals=[qs.proposals[i] for i in perm])
        out = layer(qs_p).feats.data
        np.testing.assert_allclose(out, base[perm], atol=1e-12)


class TestMsca:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng, cfg, emb, pyr, qs = make_setup(seed, n=4)
        layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
        layer.scale_embed.data[...] = 0.3 * rng.standard_normal((3, 8))
        out = layer(qs, pyr, emb).feats.data
        np.testing.assert_allclose(out, naive_msca(layer, qs, pyr, emb),
                                   atol=1e-12)

    def test_key_count_and_gather_counter(self):
        rng, cfg, emb, pyr, qs = make_setup(1, n=6)
        layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
        tfm.GATHERS.enabled = True
        tfm.GATHERS.reset()
        layer(qs, pyr, emb)
        assert tfm.GATHERS.count == 9 * 3 * 6
        tfm.GATHERS.enabled = False

    def test_uniform_logits_average_values(self):
        rng, cfg, emb, pyr, qs = make_setup(2, n=3)
        layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
        layer.wq.data[...] = 0.0
        layer.wk.data[...] = 0.0
        layer.scale_embed.data[...] = 0.0
        # zero queries + zero keys -> logits all zero -> uniform weights
        emb_zero = tfm.PositionEmbedder(np.random.default_rng(0), 8, "none",
                                        (-4.0, -4.0, 4.0, 4.0))
        qs0 = tfm.QuerySet(feats=qs.feats, positions=qs.positions,
                           pos_embed=emb_zero(qs.positions),
                           proposals=qs.proposals)
        out = layer(qs0, pyr, emb_zero).feats.data
        oracle = naive_msca(layer, qs0, pyr, emb_zero)
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_permutation_equivariance_bit_exact(self):
        rng, cfg, emb, pyr, qs = make_setup(6, n=5)
        layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
        base = layer(qs, pyr, emb).feats.data
        perm = np.random.default_rng(1).permutation(5)
        qs_p = tfm.QuerySet(feats=dg.Value(qs.feats.data[perm].copy()),
                            positions=qs.positions[perm],
                            pos_embed=dg.Value(qs.pos_embed.data[perm].copy()),
                            proposals=[qs.proposals[i] for i in perm])
        out = layer(qs_p, pyr, emb).feats.data
        np.testing.assert_array_equal(out, base[perm])

    def test_attention_sums_to_one(self):
        rng, cfg, emb, pyr, qs = make_setup(7, n=4)
        layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
        trace = tfm.AttentionTrace()
        layer(qs, pyr, emb, trace=trace, layer_idx=0)
        sums = {}
        for layer_i, q, head, frame, scale, r, c, wgt in trace.records:
            sums[(q, head)] = sums.get((q, head), 0.0) + wgt
        assert len(sums) == 4 * cfg.heads
        for v in sums.values():
            assert v == pytest.approx(1.0, abs=1e-12)


class TestMsdca:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle(self, seed):
        rng, cfg, emb, pyr, qs = make_setup(seed, n=3, variant="deformable")
        layer = tfm.DeformableCrossAttention(rng, cfg, "msdca")
        layer.offset.w.data[...] = 0.05 * rng.standard_normal(layer.offset.w.shape)
        out = layer(qs, pyr).feats.data
        np.testing.assert_allclose(out, naive_msdca(layer, qs, pyr), atol=1e-12)

    def test_sample_count(self):
        rng, cfg, emb, pyr, qs = make_setup(1, n=3, variant="deformable",
                                            k_samples=15)
        layer = tfm.DeformableCrossAttention(rng, cfg, "msdca")
        trace = tfm.AttentionTrace()
        layer(qs, pyr, trace=trace, layer_idx=0)
        per_query_head = {}
        for _, q, head, _, _, _, _, _ in trace.records:
            per_query_head[(q, head)] = per_query_head.get((q, head), 0) + 1
        assert set(per_query_head.values()) == {3 * 15}

    def test_zero_offsets_reduce_to_center_attention(self):
        rng, cfg, emb, pyr, qs = make_setup(2, n=3, variant="deformable")
        layer = tfm.DeformableCrossAttention(rng, cfg, "msdca")
        layer.offset.w.data[...] = 0.0
        layer.offset.b.data[...] = 0.0
        out = layer(qs, pyr).feats.data
        # every sample sits exactly at the reference point of its scale
        cfg_m, s_n, k_n = cfg.heads, cfg.n_scales, cfg.k_samples
        f = qs.feats.data
        oracle = np.zeros_like(f)
        for i in range(3):
            logits = (f[i] @ layer.attn_proj.w.data).reshape(cfg_m, s_n * k_n)
            acc = np.zeros(cfg.d)
            for m in range(cfg_m):
                a = softmax_np(logits[m])
                center_feats = []
                for s in range(s_n):
                    g = pyr.scales[s]
                    rc = g.world_to_cell(qs.positions[i])
                    center_feats.append(bilinear_np(g.values.data, rc[0], rc[1]))
                ctx = np.zeros(cfg.d)
                for j in range(s_n * k_n):
                    ctx += a[j] * center_feats[j // k_n]
                acc += ctx @ layer.wm.data[m]
            oracle[i] = layernorm_np(f[i] + acc, layer.ln.gain.data,
                                     layer.ln.bias.data)
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_permutation_equivariance_bit_exact(self):
        rng, cfg, emb, pyr, qs = make_setup(8, n=4, variant="deformable")
        layer = tfm.DeformableCrossAttention(rng, cfg, "msdca")
        base = layer(qs, pyr).feats.data
        perm = np.random.default_rng(2).permutation(4)
        qs_p = tfm.QuerySet(feats=dg.Value(qs.feats.data[perm].copy()),
                            positions=qs.positions[perm],
                            pos_embed=dg.Value(qs.pos_embed.data[perm].copy()),
                            proposals=[qs.proposals[i] for i in perm])
        out = layer(qs_p, pyr).feats.data
        np.testing.assert_array_equal(out, base[perm])


class TestDecoderBlock:
    def test_zeroed_weights_layernorm_chain(self):
        rng, cfg, emb, pyr, qs = make_setup(3, n=4)
        block = tfm.DecoderBlock(rng, cfg, "blk")
        for p in block.named_parameters().values():
            if not (p.name.endswith("ln.gain") or p.name.endswith("ln.bias")):
                p.data[...] = 0.0
        out = block(qs, pyr, emb).feats.data
        x = qs.feats.data
        expect = x
        for _ in range(3):  # self-attn, cross-attn, ffn each add 0 then normalize
            expect = layernorm_np(expect, np.ones(8), np.zeros(8))
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_decoder_stacks_layers(self):
        rng = np.random.default_rng(4)
        cfg = tfm.AttentionConfig(d=8, heads=2, layers=2)
        dec = tfm.Decoder(rng, cfg)
        assert len(dec.blocks) == 2
        names = dec.named_parameters()
        assert any("layer0" in n for n in names)
        assert any("layer1" in n for n in names)


class TestRegressionHead:
    def test_zero_weights(self):
        rng = np.random.default_rng(5)
        head = tfm.RegressionHead(rng, 8)
        for p in head.named_parameters().values():
            p.data[...] = 0.0
        qs = tfm.QuerySet(feats=dg.Value(np.random.default_rng(0)
                                         .standard_normal((3, 8))),
                          positions=np.zeros((3, 2)),
                          pos_embed=dg.Value(np.zeros((3, 8))),
                          proposals=[CenterProposal(0, 2, 3, 0.5, (0.0, 0.0))] * 3)
        enc, iou = head(qs)
        assert enc.shape == (3, 8)
        assert iou.shape == (3,)
        np.testing.assert_allclose(iou.data, 0.5, atol=1e-15)
        box = decode_box(__import__("cqdet.geom", fromlist=["BoxEncoding"])
                         .BoxEncoding.from_array(enc.data[0]), (0.0, 0.0), 0.4)
        assert (box.l, box.w, box.h) == (1.0, 1.0, 1.0)
        assert box.yaw == 0.0

    def test_output_arity(self):
        rng = np.random.default_rng(6)
        head = tfm.RegressionHead(rng, 8)
        assert head.fc2.w.shape == (8, 9)


class TestPositionEmbed:
    def test_none_mode_zeros(self):
        emb = tfm.PositionEmbedder(np.random.default_rng(0), 8, "none",
                                   (-1, -1, 1, 1))
        out = emb(np.array([[0.3, 0.4]]))
        assert not out.data.any()

    def test_linear_zero_weights_zero(self):
        emb = tfm.PositionEmbedder(np.random.default_rng(0), 8, "linear",
                                   (-1, -1, 1, 1))
        emb.fc.w.data[...] = 0.0
        emb.fc.b.data[...] = 0.0
        assert not emb(np.array([[0.3, 0.4]])).data.any()

    def test_generic_injectivity(self):
        pos = np.array([[0.5, -0.25], [-0.75, 0.5]])
        for seed in range(100):
            emb = tfm.PositionEmbedder(np.random.default_rng(seed), 8, "linear",
                                       (-1, -1, 1, 1))
            out = emb(pos).data
            assert np.abs(out[0] - out[1]).max() > 1e-9

    def test_sinusoidal_distinct(self):
        emb = tfm.PositionEmbedder(np.random.default_rng(0), 8, "sinusoidal",
                                   (-1, -1, 1, 1))
        out = emb(np.array([[0.5, -0.25], [-0.75, 0.5]])).data
        assert out.shape == (2, 8)
        assert np.abs(out[0] - out[1]).max() > 1e-6


def test_attention_dump_format(tmp_path):
    rng, cfg, emb, pyr, qs = make_setup(9, n=2)
    layer = tfm.WindowedCrossAttention(rng, cfg, "msca")
    trace = tfm.AttentionTrace()
    layer(qs, pyr, emb, trace=trace, layer_idx=1)
    path = tmp_path / "attn.txt"
    tfm.write_attention_dump(path, trace)
    lines = path.read_text().splitlines()
    assert len(lines) == len(trace.records) == 2 * cfg.heads * 27
    first = lines[0].split()
    assert len(first) == 8
    assert first[0] == "1"  # layer index
