import math

import numpy as np
import pytest

from esa import masking
from esa import tensor as T
from esa.acceptance import random_graph
from esa.graph import Graph, batch, build_edge_tokens, undirected
from esa.model import (
    ESA,
    ConfigError,
    ModelConfig,
    additive,
    encoder,
    esa_forward,
    init_params,
    load_checkpoint,
    mab,
    multi_head,
    pma,
    sab,
    save_checkpoint,
    sdpa,
)
from esa.tensor import Parameter, Tape, Tensor

from conftest import check_op_grad


def cfg64(**kw):
    base = dict(layer_string="MSP", d_in=6, d_model=8, heads=2, mlp_hidden=16, seeds=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def block(cfg, name="enc.0", seed=0):
    n = len(name) + 1
    return {k[n:]: v for k, v in init_params(cfg, seed).items() if k.startswith(name + ".")}


# -- config -------------------------------------------------------------------------


def test_layer_string_rules():
    ModelConfig("MSMSP").validate()
    for bad in ("MSPP", "PMS", "MSPM", "MSX", ""):
        with pytest.raises(ConfigError):
            ModelConfig(bad).validate()
    with pytest.raises(ConfigError):
        ModelConfig("MSP", level="token").validate()
    ModelConfig("MSMS", level="token").validate()
    with pytest.raises(ConfigError):
        ModelConfig("MSP", d_model=10, heads=4).validate()


def test_table_style_layer_string():
    cfg = ModelConfig("M M M M S P S")
    assert cfg.encoder_layers == "MMMMS" and cfg.pma_sabs == 1
    assert ModelConfig().seeds == 32


def test_config_text_roundtrip():
    cfg = cfg64(mlp_kind="gated", norm_placement="post", dropout=0.2)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


# -- sdpa ---------------------------------------------------------------------------


def sdpa_loops(q, k, v, m):
    B, H, Lq, d = q.shape
    out = np.zeros((B, H, Lq, v.shape[-1]))
    for b in range(B):
        for h in range(H):
            for i in range(Lq):
                s = [sum(q[b, h, i, t] * k[b, h, j, t] for t in range(d)) / math.sqrt(d) + m[b, h, i, j]
                     for j in range(k.shape[2])]
                top = max(s)
                w = [math.exp(x - top) for x in s]
                z = math.fsum(w)
                for j, wj in enumerate(w):
                    out[b, h, i] += wj / z * v[b, h, j]
    return out


def test_sdpa_matches_loop_oracle(rng):
    q, k, v = (rng.normal(size=(2, 2, 3, 4)) for _ in range(3))
    m = np.where(rng.random((2, 2, 3, 3)) < 0.3, -1e30, 0.0)
    m[..., 0] = 0.0
    assert np.max(np.abs(sdpa(q, k, v, m).data - sdpa_loops(q, k, v, m))) < 1e-12


def test_sdpa_concentration_and_singleton(rng):
    keys = np.eye(4)[None, None]
    q = 50.0 * keys[:, :, 2:3]
    out = sdpa(q, keys, keys, None).data
    np.testing.assert_allclose(out[0, 0, 0], keys[0, 0, 2], atol=1e-10)
    v = rng.normal(size=(1, 1, 3, 2))
    m = np.full((1, 1, 3, 3), -1e30)
    m[0, 0, [0, 1, 2], [2, 0, 1]] = 0.0
    out = sdpa(rng.normal(size=(1, 1, 3, 2)), rng.normal(size=(1, 1, 3, 2)), v, m).data
    assert np.array_equal(out[0, 0], v[0, 0, [2, 0, 1]])


def test_sdpa_blocked_row_is_zero_and_shape_error(rng):
    q = rng.normal(size=(1, 1, 2, 3))
    m = np.array([[[[-1e30, -1e30], [0.0, 0.0]]]])
    out = sdpa(q, q, q, m).data
    assert not out[0, 0, 0].any()
    with pytest.raises(T.ShapeError):
        sdpa(q, rng.normal(size=(1, 1, 2, 4)), q)


# -- multi-head ---------------------------------------------------------------------


def identity_attention(d):
    p = {}
    for n in "qkvo":
        p[f"{n}.w"] = Parameter(np.eye(d), f"{n}.w")
        p[f"{n}.b"] = Parameter(np.zeros(d), f"{n}.b")
    return p


def test_single_head_identity_is_sdpa(rng):
    x = rng.normal(size=(2, 4, 5))
    out = multi_head(Tensor(x), Tensor(x), None, identity_attention(5), heads=1).data
    ref = sdpa(x[:, None], x[:, None], x[:, None]).data[:, 0]
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_constant_values_give_constant_output(rng):
    p = block(cfg64(), "enc.0")
    kv = np.repeat(rng.normal(size=(1, 1, 8)), 5, axis=1)
    out = multi_head(Tensor(rng.normal(size=(1, 3, 8))), Tensor(kv), None,
                     {k[5:]: v for k, v in p.items() if k.startswith("attn.")}, heads=2).data
    np.testing.assert_allclose(out, np.repeat(out[:, :1], 3, axis=1), atol=1e-13)


@pytest.mark.parametrize("heads", [1, 2])
def test_multi_head_gradient(heads, rng):
    d = 4
    names = [f"{n}.{s}" for n in "qkvo" for s in "wb"]
    arrays = [rng.normal(size=(d, d)) if n.endswith("w") else rng.normal(size=d) for n in names]
    x = rng.normal(size=(2, 3, d))

    def f(xt, *ps):
        return multi_head(xt, xt, None, dict(zip(names, ps)), heads)

    assert check_op_grad(f, x, *arrays) < 1e-5


# -- blocks -------------------------------------------------------------------------


def test_mab_zero_weights_reduce_to_normalised_input(rng):
    cfg = cfg64()
    p = block(cfg)
    for name in ("attn.o.w", "attn.o.b", "mlp.down.w", "mlp.down.b"):
        p[name].data[...] = 0.0
    x = rng.normal(size=(2, 4, 8))
    out = mab(Tensor(x), None, p, cfg).data
    assert np.array_equal(out, T.layer_norm(Tensor(x), p["ln1.scale"], p["ln1.shift"], cfg.ln_eps).data)


def test_padding_rows_are_inert(rng):
    cfg = cfg64()
    graphs = [random_graph(rng, max_edges=5, d_n=3), random_graph(rng, max_edges=12, d_n=3)]
    bg = batch(graphs)
    tokens = build_edge_tokens(bg)
    m = additive(masking.edge_mask_for(bg, tokens.L), np.float64)
    x = rng.normal(size=(2, tokens.L, 8))
    y = x.copy()
    y[~tokens.pad_mask] = rng.normal(size=y[~tokens.pad_mask].shape) * 100
    p = block(cfg)
    real = tokens.pad_mask
    assert np.array_equal(mab(Tensor(x), m, p, cfg).data[real], mab(Tensor(y), m, p, cfg).data[real])
    assert np.array_equal(sab(Tensor(x), real, p, cfg).data[real], sab(Tensor(y), real, p, cfg).data[real])


def test_one_layer_locality_by_perturbation(rng):
    cfg = cfg64()
    p = block(cfg)
    for _ in range(5):
        g = random_graph(rng, max_nodes=6, max_edges=8, d_n=3)
        mask = masking.edge_mask_for(batch([g]))
        blocked = mask.blocked_array()[0]
        x = rng.normal(size=(1, g.num_edges, 8))
        base = mab(Tensor(x), additive(mask, np.float64), p, cfg).data
        for u in range(g.num_edges):
            y = x.copy()
            y[0, u] += 1.0
            changed = np.any(mab(Tensor(y), additive(mask, np.float64), p, cfg).data != base, axis=-1)[0]
            for v in range(g.num_edges):
                if changed[v]:
                    assert v == u or not blocked[v, u]


def test_sab_equivariance_and_single_token(rng):
    cfg = cfg64()
    p = block(cfg)
    x = rng.normal(size=(1, 5, 8))
    real = np.ones((1, 5), dtype=bool)
    perm = rng.permutation(5)
    a = sab(Tensor(x), real, p, cfg).data
    b = sab(Tensor(x[:, perm]), real, p, cfg).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-13)
    one = sab(Tensor(x[:, :1]), real[:, :1], p, cfg).data
    assert np.all(np.isfinite(one)) and np.array_equal(one, sab(Tensor(x[:, :1]), real[:, :1], p, cfg).data)


def test_encoder_single_s_is_sab(rng):
    cfg = cfg64(layer_string="SP")
    params = init_params(cfg, 0)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    real = np.ones((2, 4), dtype=bool)
    mask = masking.padding_mask(real)
    assert np.array_equal(encoder(x, mask, real, cfg, params).data, sab(x, real, block(cfg), cfg).data)


def test_encoder_never_mixes_batch_entries(rng):
    cfg = cfg64(layer_string="MSP")
    params = init_params(cfg, 1)
    graphs = [random_graph(rng, max_edges=6, d_n=3) for _ in range(2)]
    bg = batch(graphs)
    tokens = build_edge_tokens(bg)
    mask = masking.edge_mask_for(bg, tokens.L)
    x = rng.normal(size=(2, tokens.L, 8))
    y = x.copy()
    y[1] += 1.0
    a = encoder(Tensor(x), mask, tokens.pad_mask, cfg, params).data
    b = encoder(Tensor(y), mask, tokens.pad_mask, cfg, params).data
    assert np.array_equal(a[0], b[0]) and not np.array_equal(a[1], b[1])


def test_pma_single_seed_permutation_invariant(rng):
    cfg = cfg64(seeds=1, layer_string="MP")
    params = init_params(cfg, 2)
    z = rng.normal(size=(1, 7, 8))
    real = np.ones((1, 7), dtype=bool)
    a = pma(Tensor(z), real, cfg, params).data
    b = pma(Tensor(z[:, rng.permutation(7)]), real, cfg, params).data
    assert a.shape == (1, 1, 8) and np.max(np.abs(a - b)) <= 1e-10


# -- end to end ---------------------------------------------------------------------


def test_forward_is_bit_deterministic(rng):
    g = random_graph(rng, d_n=3)
    m1 = ESA(cfg64(), seed=3)
    m2 = ESA(cfg64(), seed=3)
    assert np.array_equal(m1(batch([g])).data, m2(batch([g])).data)


def test_node_relabel_invariance_float32(rng):
    model = ESA(cfg64(layer_string="MSMSP", dtype="float32"), seed=0)
    for _ in range(5):
        g = random_graph(rng, max_nodes=10, max_edges=20, d_n=3)
        out = model(batch([g])).data
        moved = model(batch([g.relabel(rng.permutation(g.num_nodes))])).data
        assert np.max(np.abs(out - moved)) <= 1e-5


def test_disjoint_graphs_batched_vs_alone(rng):
    cfg = cfg64(layer_string="MSMSP")
    params = init_params(cfg, 0)
    graphs = [random_graph(rng, max_edges=10, d_n=3) for _ in range(2)]
    L = max(g.num_edges for g in graphs)
    together = esa_forward(batch(graphs), cfg, params, L=L).data
    for b, g in enumerate(graphs):
        assert np.max(np.abs(esa_forward(batch([g]), cfg, params, L=L).data[0] - together[b])) <= 1e-10


def test_sparse_layout_matches_dense(rng):
    for tokens, level, ls, d_in in (("edge", "graph", "MSMP", 6), ("node", "token", "MSM", 3)):
        dense = cfg64(layer_string=ls, tokens=tokens, level=level, d_in=d_in)
        sparse = cfg64(layer_string=ls, tokens=tokens, level=level, d_in=d_in, mask_layout="sparse")
        params = init_params(dense, 0)
        bg = batch([random_graph(rng, d_n=3) for _ in range(3)])
        w = rng.normal(size=esa_forward(bg, dense, params).shape)
        outs, grads = [], []
        for cfg in (dense, sparse):
            for p in params.values():
                p.grad = None
            with Tape():
                out = esa_forward(bg, cfg, params)
                g = T.backward((out * Tensor(w)).sum(), list(params.values()))
            outs.append(out.data)
            grads.append({k: v.copy() for k, v in g.items()})
        assert np.max(np.abs(outs[0] - outs[1])) < 1e-12
        for k in grads[0]:
            assert np.max(np.abs(grads[0][k] - grads[1][k])) < 1e-10


def test_node_level_output_rows(rng):
    cfg = cfg64(layer_string="MS", tokens="node", level="token", d_in=3, d_out=4)
    graphs = [random_graph(rng, d_n=3) for _ in range(3)]
    out = ESA(cfg)(batch(graphs))
    assert out.shape == (sum(g.num_nodes for g in graphs), 4)


def test_token_width_mismatch(rng):
    with pytest.raises(ConfigError):
        ESA(cfg64(d_in=5))(batch([random_graph(rng, d_n=3)]))


def test_attention_trace_rows(rng):
    cfg = cfg64(layer_string="MSP")
    graphs = [random_graph(rng, max_edges=8, d_n=3) for _ in range(2)]
    trace = []
    ESA(cfg)(batch(graphs), trace=trace)
    assert [name for name, _ in trace] == ["enc.0.M", "enc.1.S", "pma.cross"]
    for name, scores in trace:
        sums = scores.sum(axis=-1)
        ok = (np.abs(sums - 1) <= 1e-6) | (sums == 0)
        assert ok.all(), name
    assert trace[2][1].shape[2] == cfg.seeds


def test_variants_have_correct_gradients(rng):
    g = random_graph(rng, max_nodes=4, max_edges=4, d_n=3)
    for kw in (dict(mlp_kind="gated"), dict(norm_placement="post"), dict(readout="sum")):
        cfg = cfg64(**kw)
        model = ESA(cfg, seed=1)
        names = list(model.params)
        bg = batch([g])

        def f(*ps):
            return esa_forward(bg, cfg, dict(zip(names, ps)))

        assert check_op_grad(f, *[p.data.copy() for p in model.params.values()]) < 1e-5


def test_dropout_only_in_training(rng):
    model = ESA(cfg64(dropout=0.5), seed=0)
    bg = batch([random_graph(rng, d_n=3)])
    assert np.array_equal(model(bg).data, model(bg).data)
    noisy = model(bg, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(noisy, model(bg).data)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = ESA(cfg64(mlp_kind="gated"), seed=5)
    path = tmp_path / "m.ckpt"
    model.save(path)
    assert path.read_bytes().startswith(b"ESA-CHECKPOINT v1\n")
    back = ESA.load(path)
    assert back.cfg == model.cfg
    for k, p in model.params.items():
        assert np.array_equal(back.params[k].data, p.data) and back.params[k].data.dtype == p.data.dtype
    bg = batch([random_graph(rng, d_n=3)])
    assert np.array_equal(back(bg).data, model(bg).data)


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    cfg = cfg64()
    params = init_params(cfg, 0)
    del params["head.b"]
    save_checkpoint(tmp_path / "m.ckpt", cfg, params)
    with pytest.raises(ValueError, match="do not match"):
        load_checkpoint(tmp_path / "m.ckpt")
