import numpy as np
import pytest

from vetosgg.backbone import ConfigError
from vetosgg.encoder import EncoderConfig, RelationEncoder, encoder_param_count
from vetosgg.gradcheck import check_gradients
from vetosgg.patch import (BaselineGlobalHead, CueTokens, PatchConfig, PatchFusion, baseline_param_counts,
                           box_descriptor, cmpf_param_count, crpg, patchify)
from vetosgg.tensor import DimensionError, Tensor, total


def test_patchify_layout_matches_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 6, 6))
    out = patchify(Tensor(x), 3).data
    assert out.shape == (3, 4, 2 * 9)
    for b in range(3):
        for gy in range(2):
            for gx in range(2):
                block = x[b, :, gy * 3:(gy + 1) * 3, gx * 3:(gx + 1) * 3]
                assert np.array_equal(out[b, gy * 2 + gx], block.reshape(-1))


def test_crpg_subject_channels_first():
    cfg = PatchConfig(pooled=4, patch=2, visual_dim=3, depth_dim=3)
    sv = np.ones((2, 8, 8))
    ov = np.full((2, 8, 8), 2.0)
    sd, od = np.zeros((1, 8, 8)), np.ones((1, 8, 8))
    vp, dp = crpg(Tensor(sv), Tensor(ov), Tensor(sd), Tensor(od), cfg)
    assert vp.shape == (4, 4 * 4) and dp.shape == (4, 2 * 4)
    # channel-major within a patch: 2 subject channels x 4 cells, then 2 object channels x 4 cells
    assert np.array_equal(vp.data[0], [1.0] * 8 + [2.0] * 8)
    assert np.array_equal(dp.data[0], [0.0] * 4 + [1.0] * 4)


def test_crpg_rejects_mismatched_entities():
    cfg = PatchConfig(pooled=4, patch=2)
    a, b = Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((3, 8, 8)))
    d = Tensor(np.zeros((1, 8, 8)))
    with pytest.raises(DimensionError, match="differ"):
        crpg(a, b, d, d, cfg)


def test_patch_config_validation():
    with pytest.raises(ConfigError, match="divide"):
        PatchConfig(pooled=8, patch=3).validate()
    assert PatchConfig().num_tokens == 19 and PatchConfig().token_dim == 576


def test_box_descriptor():
    d = box_descriptor((10, 20, 30, 60), (100, 200))
    assert np.allclose(d, [0.1, 0.1, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2])


def test_fusion_param_count_and_shape():
    rng = np.random.default_rng(0)
    cfg = PatchConfig(pooled=4, patch=2, visual_dim=5, depth_dim=3)
    fusion = PatchFusion(6, 2, cfg, rng)
    assert fusion.num_parameters() == cmpf_param_count(6, 2, cfg)
    vp = Tensor(rng.normal(size=(7, 4, 2 * 6 * 4)))
    dp = Tensor(rng.normal(size=(7, 4, 2 * 2 * 4)))
    assert fusion(vp, dp).shape == (7, 4, 8)
    with pytest.raises(DimensionError, match="pair up"):
        fusion(vp, Tensor(np.zeros((7, 3, 16))))


def test_fusion_and_cue_gradients():
    rng = np.random.default_rng(1)
    cfg = PatchConfig(pooled=4, patch=2, visual_dim=3, depth_dim=2)
    fusion = PatchFusion(2, 1, cfg, rng)
    cues = CueTokens(4, 3, 5, rng)
    vp, dp = Tensor(rng.normal(size=(2, 4, 16))), Tensor(rng.normal(size=(2, 4, 8)))
    boxes = Tensor(rng.uniform(size=(2, 8))), Tensor(rng.uniform(size=(2, 8)))
    w1, w2 = Tensor(rng.normal(size=(2, 4, 5))), Tensor(rng.normal(size=(2, 5)))

    def loss():
        loc, sem = cues(boxes[0], boxes[1], np.array([0, 3]), np.array([2, 1]))
        return total(fusion(vp, dp) * w1) + total(loc * w2) + total(sem * w2)

    report = check_gradients(loss, fusion.parameters() + cues.parameters(), tolerance=1e-6, floor=1e-6)
    assert report.passed


def toy_encoder(layers=2, heads=2, dim=8, tokens=7, seed=0):
    cfg = EncoderConfig(layers=layers, heads=heads, embed_dim=dim, mlp_hidden=4 * dim)
    return RelationEncoder(cfg, tokens, np.random.default_rng(seed)), cfg


def test_encoder_shapes_and_count():
    enc, cfg = toy_encoder()
    rng = np.random.default_rng(2)
    z0 = enc.assemble_tokens(Tensor(rng.normal(size=(3, 4, 8))), Tensor(rng.normal(size=(3, 8))),
                             Tensor(rng.normal(size=(3, 8))))
    assert z0.shape == (3, 7, 8)
    y = enc(z0)
    assert y.shape == (3, 8)
    assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-9)
    assert enc.num_parameters() == encoder_param_count(cfg, 7)
    attn = enc.layers[0].attn.last_attention
    assert attn.shape == (3, 2, 7, 7) and np.allclose(attn.sum(axis=-1), 1.0)


def test_encoder_rejects_wrong_token_count():
    enc, _ = toy_encoder()
    with pytest.raises(DimensionError, match="patch tokens"):
        enc.assemble_tokens(Tensor(np.zeros((1, 5, 8))), Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 8))))


def test_encoder_batch_rows_independent():
    enc, _ = toy_encoder()
    rng = np.random.default_rng(3)
    z = Tensor(rng.normal(size=(4, 7, 8)))
    full = enc(z).data
    alone = enc(Tensor(z.data[2:3])).data
    assert np.allclose(full[2:3], alone, atol=1e-12)


def test_encoder_gradients():
    enc, _ = toy_encoder(dim=6, heads=3, tokens=5)
    rng = np.random.default_rng(4)
    z = Tensor(rng.normal(size=(2, 5, 6)))
    w = Tensor(rng.normal(size=(2, 6)))
    report = check_gradients(lambda: total(enc(z) * w), enc.parameters(), tolerance=1e-4, max_entries=12,
                             floor=1e-6)
    assert report.passed


@pytest.mark.parametrize("kw", [{"layers": 0}, {"mlp_hidden": 0}, {"heads": 5}])
def test_encoder_config_guards(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw).validate()


def test_attention_dropout_needs_rng():
    cfg = EncoderConfig(layers=1, heads=2, embed_dim=4, mlp_hidden=8, attention_dropout=0.5)
    enc = RelationEncoder(cfg, 3, np.random.default_rng(0))
    z = Tensor(np.random.default_rng(1).normal(size=(1, 3, 4)))
    assert np.array_equal(enc(z).data, enc(z).data)
    a = enc(z, np.random.default_rng(5)).data
    assert np.array_equal(a, enc(z, np.random.default_rng(5)).data)
    assert not np.array_equal(a, enc(z).data)


def test_baseline_head_count_matches_analytic():
    rng = np.random.default_rng(0)
    head = BaselineGlobalHead(3, 4, 4, 5, 6, rng, hidden1=7, hidden2=5, q_dim=4, word_dim=3, union_pooled=2)
    counts = baseline_param_counts(3, 4, 4, 5, 6, 7, 5, 4, 3, 2)
    assert head.num_parameters() == counts["total"]
    out = head(Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4))),
               Tensor(rng.uniform(size=(2, 8))), Tensor(rng.uniform(size=(2, 8))), np.array([0, 1]), np.array([4, 2]))
    assert out.shape == (2, 6)
