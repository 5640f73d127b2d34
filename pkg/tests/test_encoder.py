import numpy as np
import pytest

from kgdiff import autodiff as ad
from kgdiff.config import SYNTHETIC_RULES
from kgdiff.encoder import EncoderConfig, StructureEncoder, SubgraphCache, batch_subgraphs
from kgdiff.kg import Subgraph, generate_synthetic
from kgdiff.losses import bce_loss

from gradcheck import check_store


@pytest.fixture(scope="module")
def graph():
    return generate_synthetic(24, SYNTHETIC_RULES, seed=0, d_feat=4)


def make(graph, **kw):
    cfg = EncoderConfig(graph.num_entities, graph.num_relations, graph.d_feat, **{"dim": 8, "mgat_layers": 2, **kw})
    return StructureEncoder(cfg, graph.features, seed=0)


def queries(graph, n=6):
    t = graph.splits["train"][:n]
    return t[:, 0], t[:, 1]


def test_zero_parameters_give_zero_query():
    g = generate_synthetic(8, SYNTHETIC_RULES[:1], seed=0, d_feat=0)
    enc = make(g)
    for _, p in enc.params.items():
        p.data[...] = 0.0
    assert np.all(enc.encode_query([0, 3], [0, 0]).data == 0.0)


def test_query_is_deterministic_and_relation_sensitive(graph):
    enc = make(graph)
    a = enc.encode_query([2], [0]).data
    assert a.tobytes() == enc.encode_query([2], [0]).data.tobytes()
    assert not np.allclose(a, enc.encode_query([2], [1]).data)


def test_keep_mask_hides_the_head():
    g = generate_synthetic(8, SYNTHETIC_RULES[:2], seed=0, d_feat=0)
    enc = make(g)
    hidden = enc.encode_query([1, 5], [0, 0], keep=[[0], [0]]).data
    np.testing.assert_array_equal(hidden[0], hidden[1])


def test_single_node_subgraph_attends_to_itself(graph):
    enc = make(graph)
    sg = Subgraph(np.array([3]), np.zeros((0, 3), dtype=np.int64), (3, 0))
    out = enc.forward([3], [0], [sg])
    for att in out.attention:
        np.testing.assert_array_equal(att, np.ones((1, enc.cfg.heads)))


@pytest.mark.parametrize("attention", ["query-key", "additive"])
def test_incoming_attention_sums_to_one(graph, attention):
    enc = make(graph, attention=attention)
    cache = SubgraphCache(graph)
    h, r = queries(graph)
    sgs = cache.batch(h, r)
    bg = batch_subgraphs(sgs, graph.num_relations)
    out = enc.forward(h, r, sgs)
    for att in out.attention:
        sums = np.zeros((bg.num_nodes, enc.cfg.heads))
        np.add.at(sums, bg.dst, att)
        assert np.max(np.abs(sums - 1.0)) < 1e-9


def test_fusion_endpoints_and_midpoint(graph):
    enc = make(graph)
    H, Z = ad.Tensor([[2.0, 0.0]]), ad.Tensor([[0.0, 2.0]])
    enc.params["lambda_raw"].data[...] = 30.0
    np.testing.assert_allclose(enc.adaptive_fuse(H, Z).data, H.data, atol=1e-12)
    enc.params["lambda_raw"].data[...] = -30.0
    np.testing.assert_allclose(enc.adaptive_fuse(H, Z).data, Z.data, atol=1e-12)
    enc.params["lambda_raw"].data[...] = 0.0
    np.testing.assert_array_equal(enc.adaptive_fuse(H, Z).data, [[1.0, 1.0]])


def test_lm_head_zero_case_and_shape(graph):
    enc = make(graph)
    x0 = enc.lm_head(ad.Tensor(np.zeros((2, 8)))).data
    assert x0.shape == (2, graph.num_entities) and np.all(x0 == 0.0)


def test_lm_head_prefers_the_matching_orthogonal_entity():
    g = generate_synthetic(8, SYNTHETIC_RULES[:1], seed=0, d_feat=0)
    enc = make(g)
    enc.params["entity_emb"].data[...] = np.eye(8)
    x0 = enc.lm_head(ad.Tensor(np.eye(8)[[5]])).data
    assert int(np.argmax(x0)) == 5


def test_lm_head_is_tied_to_the_entity_table(graph):
    enc = make(graph)
    assert not any("head" in n or "lm" in n for n in enc.params.names())
    fused = ad.Tensor(np.ones((1, 8)))
    before = enc.lm_head(fused).data.copy()
    enc.params["entity_emb"].data[4] += 1.0
    delta = enc.lm_head(fused).data - before
    assert delta[0, 4] == pytest.approx(8.0) and np.count_nonzero(delta) == 1


def test_condition_is_the_fused_query(graph):
    enc = make(graph)
    h, r = queries(graph)
    out = enc.forward(h, r, SubgraphCache(graph).batch(h, r))
    assert enc.condition_of(out.fused) is out.fused and out.fused.shape == (len(h), 8)


def test_no_mgat_reduces_to_the_query_stub(graph):
    enc = make(graph, no_mgat=True)
    assert not any(n.startswith("mgat") for n in enc.params.names())
    h, r = queries(graph)
    out = enc.forward(h, r)
    np.testing.assert_array_equal(out.fused.data, out.h_mask.data)
    np.testing.assert_array_equal(out.x0.data, enc.lm_head(out.h_mask).data)


def permuted(sg, rng):
    k = sg.num_nodes
    order = np.concatenate([[0], 1 + rng.permutation(k - 1)])  # new position -> old position
    where = np.empty(k, dtype=np.int64)
    where[order] = np.arange(k)
    edges = sg.edges.copy()
    edges[:, 0], edges[:, 2] = where[edges[:, 0]], where[edges[:, 2]]
    return Subgraph(sg.nodes[order], edges[rng.permutation(len(edges))], sg.query)


@pytest.mark.parametrize("attention", ["query-key", "additive"])
def test_node_order_does_not_change_the_result(graph, attention):
    enc = make(graph, attention=attention)
    cache = SubgraphCache(graph)
    h, r = queries(graph)
    sgs = cache.batch(h, r)
    rng = np.random.default_rng(0)
    a = enc.forward(h, r, sgs).z_mask.data
    b = enc.forward(h, r, [permuted(sg, rng) for sg in sgs]).z_mask.data
    assert np.max(np.abs(a - b)) < 1e-6


def test_batched_equals_one_query_at_a_time(graph):
    enc = make(graph)
    cache = SubgraphCache(graph)
    h, r = queries(graph)
    together = enc.forward(h, r, cache.batch(h, r)).x0.data
    alone = np.concatenate([enc.forward([a], [b], [cache(a, b)]).x0.data for a, b in zip(h, r)])
    np.testing.assert_allclose(together, alone, atol=1e-12)


def test_residual_off_and_per_dim_lambda_run(graph):
    enc = make(graph, residual=False, lambda_per_dim=True)
    h, r = queries(graph)
    out = enc.forward(h, r, SubgraphCache(graph).batch(h, r))
    assert enc.params["lambda_raw"].shape == (8,) and np.all(np.isfinite(out.x0.data))


def test_config_rejects_unknown_attention():
    with pytest.raises(ValueError):
        EncoderConfig(4, 1, attention="dot")


def test_encoder_gradients_match_finite_differences():
    g = generate_synthetic(10, SYNTHETIC_RULES[:2], seed=0, d_feat=3)
    enc = make(g, dim=4, heads=2)
    enc.params["feat_proj"].data[...] = np.random.default_rng(1).normal(0, 0.3, (3, 4))
    enc.params["lambda_raw"].data[...] = 0.3
    cache = SubgraphCache(g)
    t = g.splits["train"][:4]
    y = np.zeros((4, 10))
    y[np.arange(4), t[:, 2]] = 1.0

    def loss():
        return bce_loss(enc.forward(t[:, 0], t[:, 1], cache.batch(t[:, 0], t[:, 1])).x0, y)

    assert check_store(loss, enc.params, max_entries=12) < 1e-4
