import itertools
import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from stinet.stgr import (EdgeWeight, FeatureGraph, GlobalRefine, aggregation_matrix, build_graph, cosine,
                         dump_graph, edge_attributes, graph_edges, modulate_features, pool_node_features,
                         temporal_closeness)


def brute_force_edges(S):
    nodes = [("lr", t) for t in range(S)] + [("hr", t) for t in range(S)]
    edges = set()
    for i, j in itertools.combinations(range(2 * S), 2):
        (li, ti), (lj, tj) = nodes[i], nodes[j]
        if li == lj or ti == tj:
            edges.add((i, j))
    return edges


@pytest.mark.parametrize("S", range(1, 11))
def test_edge_set_matches_rules(S):
    _, _, edges = graph_edges(S)
    got = {tuple(e) for e in edges.tolist()}
    assert got == brute_force_edges(S)
    assert len(got) == S * S == S + S * (S - 1)
    assert all(i != j for i, j in got)


def test_named_edge_counts():
    for S, n in [(1, 1), (3, 9), (7, 49)]:
        g = build_graph(torch.randn(1, S, 4, 2, 2), torch.randn(1, S, 4, 8, 8))
        assert g.num_nodes == 2 * S and g.edges.shape[0] == n
    g = build_graph(torch.randn(1, 3, 4, 2, 2), torch.randn(1, 3, 4, 8, 8))
    for i, j in g.edges.tolist():
        if g.levels[i] != g.levels[j]:
            assert g.frame_index[i] == g.frame_index[j]


def test_pooling():
    L = torch.full((1, 3, 64, 4, 4), 0.7)
    H = torch.randn(1, 3, 64, 16, 16, dtype=torch.float64)
    assert pool_node_features(L, None).shape == (1, 3, 64)
    assert torch.allclose(pool_node_features(L, None), torch.tensor(0.7))
    nodes = pool_node_features(L.double(), H)
    assert nodes.shape == (1, 6, 64)
    direct = H[0, 1, 5].sum() / 256
    assert abs(nodes[0, 4, 5].item() - direct.item()) < 1e-14


def test_temporal_closeness_values():
    assert temporal_closeness(torch.tensor(0.0)).item() == 0.5
    assert abs(temporal_closeness(torch.tensor(1.0)).item() - 0.26894) < 1e-5
    d = torch.linspace(0, 6, 50)
    assert (temporal_closeness(d).diff() < 0).all()


def test_cosine_zero_convention():
    assert cosine(torch.zeros(4), torch.ones(4)).item() == 0.0
    a = torch.randn(5)
    assert abs(cosine(a, a).item() - 1) < 1e-6


def _graph(S=3, c=6, h=3, B=2, dtype=torch.float64):
    L, H = torch.randn(B, S, c, h, h, dtype=dtype), torch.randn(B, S, c, 4 * h, 4 * h, dtype=dtype)
    times = torch.arange(S, dtype=dtype) * 0.5
    g = build_graph(L, H, times)
    g.edge_attrs = edge_attributes(g, L, H)
    return g, L, H


def test_edge_attribute_oracles():
    g, L, H = _graph()
    S = 3
    for e, (i, j) in enumerate(g.edges.tolist()):
        ef, ep, et = g.edge_attrs[0, e].tolist()
        fi, fj = g.node_features[0, i], g.node_features[0, j]
        assert abs(ef - F.cosine_similarity(fi, fj, dim=0).item()) < 1e-12
        assert abs(et - (1 - 1 / (1 + math.exp(-abs(g.times[i] - g.times[j]).item())))) < 1e-12
        if i < S <= j:  # LR-HR counterpart: HR downsampled onto the LR grid
            lr = L[0, g.frame_index[i]]
            hr = F.interpolate(H[0, g.frame_index[j]][None], size=lr.shape[-2:], mode="bilinear",
                               align_corners=False)[0]
            expect = F.cosine_similarity(lr, hr, dim=0).mean().item()
            assert abs(ep - expect) < 1e-12
            assert et == 0.5
    assert g.edge_attrs[..., :2].abs().max() <= 1


def test_identical_features_give_unit_ef():
    L = torch.randn(1, 1, 4, 2, 2).expand(1, 2, 4, 2, 2).contiguous()
    g = build_graph(L, None)
    assert abs(edge_attributes(g, L, None)[0, 0, 0].item() - 1) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.floats(0.01, 100))
def test_similarity_attributes_bounded(S, c, scale):
    g, _, _ = _graph(S, c, 2, 1)
    g2_L = torch.randn(1, S, c, 2, 2) * scale
    g2 = build_graph(g2_L, torch.randn(1, S, c, 8, 8) * scale)
    attrs = edge_attributes(g2, g2_L, torch.randn(1, S, c, 8, 8))
    for a in (g.edge_attrs, attrs):
        assert a[..., :2].abs().max() <= 1 + 1e-6
        assert ((a[..., 2] > 0) & (a[..., 2] <= 0.5)).all()


def test_pair_graph_aggregates_partner_only():
    g, _, _ = _graph(S=1)
    A = aggregation_matrix(g.edges, torch.ones(2, 1, dtype=torch.float64), 2)
    assert torch.equal(A[0], torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64))


def test_zero_weights_leave_self_path():
    g, _, _ = _graph()
    net = GlobalRefine(6).double()
    torch.nn.init.normal_(net.layers[-1].linear.weight)
    out = net.refine(g, torch.zeros(2, g.edges.shape[0], dtype=torch.float64))
    h = g.node_features
    for k, layer in enumerate(net.layers):
        h = layer.linear(torch.cat([h, torch.zeros_like(h)], -1))
        if k < len(net.layers) - 1:
            h = F.leaky_relu(h, 0.1)
    assert torch.allclose(out, h, atol=1e-12)


def test_permutation_equivariance():
    g, _, _ = _graph(S=4)
    net = GlobalRefine(6).double()
    for layer in net.layers:
        torch.nn.init.normal_(layer.linear.weight, std=0.3)
    out = net.refine(g)
    perm = torch.randperm(g.num_nodes)
    inv = torch.argsort(perm)  # old index -> new index
    edges = inv[g.edges]
    pg = FeatureGraph(g.node_features[:, perm], g.times[perm], [g.levels[p] for p in perm.tolist()],
                      [g.frame_index[p] for p in perm.tolist()], edges, g.edge_attrs)
    assert torch.allclose(net.refine(pg), out[:, perm], atol=1e-12)


def test_modulation():
    L, H = torch.randn(1, 2, 3, 4, 4), torch.randn(1, 2, 3, 16, 16)
    lg, hg = modulate_features(torch.zeros(1, 4, 3), L, H)
    assert torch.equal(lg, L) and torch.equal(hg, H)
    lg, hg = modulate_features(torch.ones(1, 4, 3), L, H)
    assert torch.equal(lg, 2 * L) and torch.equal(hg, 2 * H)
    v = torch.randn(1, 4, 3, dtype=torch.float64)
    L, H = L.double(), H.double()
    lg, hg = modulate_features(v, L, H)
    for s in range(2):
        for ch in range(3):
            assert torch.equal(hg[0, s, ch], H[0, s, ch] + v[0, 2 + s, ch] * H[0, s, ch])
            assert torch.allclose(lg[0, s, ch], L[0, s, ch] * (1 + v[0, s, ch]), rtol=1e-15, atol=0)


@pytest.mark.parametrize("drop", ["EF", "EP", "ET"])
def test_attribute_ablation_drops_one_term(drop):
    ew = EdgeWeight({drop: False})
    attrs = torch.rand(1, 5, 3)
    idx = ["EF", "EP", "ET"].index(drop)
    changed = attrs.clone()
    changed[..., idx] += 1
    assert torch.equal(ew(attrs), ew(changed))
    other = attrs.clone()
    other[..., (idx + 1) % 3] += 1
    assert not torch.equal(ew(attrs), ew(other))


def test_identity_at_init():
    net = GlobalRefine(6)
    L, H = torch.randn(2, 3, 6, 2, 2), torch.randn(2, 3, 6, 8, 8)
    lg, hg = net(L, H)
    assert torch.equal(lg, L) and torch.equal(hg, H)


def test_dump_graph(tmp_path):
    g, _, _ = _graph()
    dump_graph(g, tmp_path / "g.txt")
    lines = (tmp_path / "g.txt").read_text().splitlines()
    assert len(lines) == 1 + 9 and len(lines[1].split()) == 9
