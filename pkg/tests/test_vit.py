import numpy as np
import pytest

from histograde import autodiff as ad
from histograde import vit
from histograde.errors import ChecksumError, ConfigError, ContractError, FormatError

from gradcheck import check

TINY = vit.ModelConfig(input_dim=5, d_model=16, n_heads=2, n_layers=1, dropout=0.0, region_side=2)


def region(members, coords, side=2, sid="s"):
    return vit.Region(sid, (0, 0), tuple(members), tuple(coords), side)


def _ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def test_positional_code():
    pe = vit.positional_encode([(0, 0), (3, 1), (3, 1)], 16)
    assert np.array_equal(pe[0, 0::2], np.zeros(8)) and np.array_equal(pe[0, 1::2], np.ones(8))
    assert np.array_equal(pe[1], pe[2])
    sweep = [(x, y) for x in range(4) for y in range(4)]
    codes = vit.positional_encode(sweep, 16)
    for i, (x, y) in enumerate(sweep):
        j = sweep.index((x, 0))
        assert np.array_equal(codes[i, :8], codes[j, :8])  # x half ignores y
        k = sweep.index((0, y))
        assert np.array_equal(codes[i, 8:], codes[k, 8:])
    # channel 2i of the x half is sin(x * 10000^(-2i/8))
    assert codes[sweep.index((2, 0)), 2] == pytest.approx(np.sin(2 * 10000 ** (-2 / 8)))
    with pytest.raises(ConfigError):
        vit.positional_encode([(0, 0)], 10)


def test_presets_and_config_errors():
    p = vit.ModelConfig.full()
    assert (p.n_heads, p.n_layers, p.dropout) == (8, 12, 0.1)
    d = vit.ModelConfig.desk()
    assert (d.n_heads, d.n_layers, d.d_model) == (4, 2, 64)
    with pytest.raises(ConfigError):
        vit.ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        vit.ModelConfig(dropout=1.0)


def test_single_patch_gets_all_attention():
    params = vit.init_params(TINY, 1)
    rows = np.random.default_rng(0).normal(size=(1, 5))
    _, attn = vit.encode_region(rows, region([0], [(1, 1)]), TINY, params)
    amap = vit.extract_cls_attention(attn)
    assert amap.weights.tolist() == [1.0]


def test_member_permutation_invariance():
    cfg = vit.ModelConfig(input_dim=5, d_model=16, n_heads=2, n_layers=2, dropout=0.0, region_side=3)
    params = vit.init_params(cfg, 2)
    rows = np.random.default_rng(1).normal(size=(6, 5))
    coords = [(0, 0), (1, 0), (2, 1), (0, 2), (2, 2), (1, 1)]
    a, _ = vit.encode_region(rows, region(range(6), coords, 3), cfg, params)
    perm = [4, 2, 0, 5, 1, 3]
    b, _ = vit.encode_region(rows, region(perm, [coords[i] for i in perm], 3), cfg, params)
    assert np.allclose(a.data, b.data, atol=1e-6)


def test_uniform_attention_construction():
    # q = k = 0 gives uniform attention; v = LN1(h); proj = I; MLP off; CLS token = 0
    d = TINY.d_model
    params = {k: v.data for k, v in vit.init_params(TINY, 3).items()}
    params["cls"] = np.zeros(d)
    params["layer0.qkv.w"] = np.concatenate([np.zeros((d, 2 * d)), np.eye(d)], axis=1)
    params["layer0.qkv.b"] = np.zeros(3 * d)
    params["layer0.proj.w"] = np.eye(d)
    params["layer0.fc2.w"] = np.zeros_like(params["layer0.fc2.w"])
    params = vit.as_param_tensors(params)
    rows = np.random.default_rng(2).normal(size=(3, 5))
    coords = [(0, 0), (1, 0), (1, 1)]
    cls, attn = vit.encode_region(rows, region(range(3), coords), TINY, params)
    assert np.allclose(attn, 0.25)
    # numpy oracle: projected inputs, mean of their normalized values over all 4 tokens
    h = rows @ params["input.w"].data + params["input.b"].data + vit.positional_encode(coords, d)
    want = _ln(_ln(h).sum(0) / 4)
    assert np.allclose(cls.data, want, atol=1e-6)


def test_attention_rows_are_distributions_and_padding_is_inert():
    cfg = vit.ModelConfig(input_dim=5, d_model=16, n_heads=4, n_layers=2, dropout=0.0, region_side=2)
    params = vit.init_params(cfg, 4)
    rows = np.random.default_rng(3).normal(size=(4, 5))
    r1 = region(range(4), [(0, 0), (1, 0), (0, 1), (1, 1)])
    r2 = region([2], [(0, 1)])
    x, c, v = vit.pack_regions([rows, rows], [r1, r2])
    cls, attn = vit.encode_batch(x, c, v, cfg, params)
    assert np.allclose(attn.sum(-1), 1, atol=1e-12) and attn.min() >= 0
    assert np.all(attn[1, :, :, 2:] < 1e-300)
    alone, _ = vit.encode_region(rows, r2, cfg, params)
    assert np.allclose(cls.data[1], alone.data, atol=1e-12)


def test_fusion():
    params = vit.init_params(TINY, 5)
    rng = np.random.default_rng(4)
    a, b = (ad.Tensor(rng.normal(size=16)) for _ in range(2))
    one = vit.fuse_and_classify([a], TINY, params).data
    assert np.allclose(one, a.data @ params["head.w"].data + params["head.b"].data, atol=1e-14)
    assert np.allclose(vit.fuse_and_classify([a, a], TINY, params).data, one, atol=1e-12)
    ab = vit.fuse_and_classify([a, b], TINY, params).data
    assert np.allclose(vit.fuse_and_classify([b, a], TINY, params).data, ab, atol=1e-12)
    with pytest.raises(ContractError):
        vit.fuse_and_classify([], TINY, params)


def test_extract_cls_attention():
    r = region(range(3), [(0, 0), (1, 0), (0, 1)])
    uniform = np.full((2, 2, 4), 0.25)
    assert np.allclose(vit.extract_cls_attention(uniform, r).weights, 1 / 3)
    logits = np.array([0.0, 20.0, 0.0, 0.0])
    row = np.exp(logits) / np.exp(logits).sum()
    amap = vit.extract_cls_attention(np.tile(row, (1, 2, 1)), r)
    assert amap.weights[0] > 0.99
    rnd = np.random.default_rng(5).dirichlet(np.ones(4), size=(3, 2))
    for mode in ("last", "mean_layers"):
        assert vit.extract_cls_attention(rnd, r, mode).weights.sum() == pytest.approx(1, abs=1e-12)
    # last-layer rule against a hand computation
    want = rnd[-1].mean(0)[1:] / rnd[-1].mean(0)[1:].sum()
    assert np.allclose(vit.extract_cls_attention(rnd, r).weights, want)


def test_eval_forward_is_bitwise_repeatable():
    cfg = vit.ModelConfig(input_dim=5, d_model=16, n_heads=2, n_layers=2, dropout=0.1, region_side=2)
    params = vit.init_params(cfg, 6)
    rows = np.random.default_rng(6).normal(size=(3, 5))
    r = region(range(3), [(0, 0), (1, 0), (1, 1)])
    a, _ = vit.encode_region(rows, r, cfg, params)
    b, _ = vit.encode_region(rows, r, cfg, params)
    assert a.data.tobytes() == b.data.tobytes()
    t1, _ = vit.encode_region(rows, r, cfg, params, train=True, seed=3)
    t2, _ = vit.encode_region(rows, r, cfg, params, train=True, seed=3)
    assert t1.data.tobytes() == t2.data.tobytes() and not np.array_equal(t1.data, a.data)


def test_full_model_gradient():
    params = vit.init_params(TINY, 3)
    rows = np.random.default_rng(0).normal(size=(3, 5))
    r1 = region((0, 1, 2), ((0, 0), (1, 0), (0, 1)))
    r2 = region((1, 2), ((1, 0), (0, 1)))
    w = ad.ClassWeights((0.8, 0.6, 1.4, 2.7))

    def loss():
        x, c, v = vit.pack_regions([rows, rows], [r1, r2])
        cls, _ = vit.encode_batch(x, c, v, TINY, params)
        logits = vit.fuse_and_classify(ad.reshape(cls, (1, 2, 16)), TINY, params)
        return ad.weighted_cross_entropy(logits, np.array([2]), w)

    assert check(loss, list(params.values())) <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    params = {k: t.data for k, t in vit.init_params(TINY, 7).items()}
    adam = ad.AdamState(lr=1e-3, t=3, m={k: v * 0.1 for k, v in params.items()}, v={k: v * v for k, v in params.items()})
    ck = vit.ModelCheckpoint(TINY, params, adam, {"fold": 2, "epoch": 4, "best_weighted_f1": 0.5},
                             {"input_mean": np.arange(5.0)})
    path = tmp_path / "c.hgc"
    vit.save_checkpoint(ck, path)
    back = vit.load_checkpoint(path)
    assert back.config == TINY and back.metadata == ck.metadata and back.adam.t == 3
    for k in params:
        assert np.array_equal(back.params[k], params[k].astype(np.float32))
        assert np.array_equal(back.adam.v[k], adam.v[k].astype(np.float32))
    assert np.array_equal(back.buffers["input_mean"], np.arange(5.0))
    blob = bytearray(path.read_bytes())
    blob[100] ^= 1
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        vit.load_checkpoint(path)
    del params["head.b"]
    with pytest.raises(FormatError):
        vit.ModelCheckpoint(TINY, params).validate()
