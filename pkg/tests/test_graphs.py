"""Architecture space: sampling, invariants, virtual edges, serialization."""

import networkx as nx
import numpy as np
import pytest

from ghnq.errors import ConstraintInfeasibleError, GraphError, GraphFormatError
from ghnq.forward import float_forward, init_params
from ghnq.graphs import (ArchGraph, NodeSpec, OpKind, SpaceConfig, canonical_hash,
                         compute_virtual_edges, conv_depth, count_params,
                         deserialize_graph, has_batchnorm, make_splits, max_width,
                         sample_architecture, serialize_graph, validate_graph)
from ghnq.tensor import Tensor


def small_cfg(**kw):
    base = dict(max_params=200_000, depth_range=(4, 8), width_range=(8, 32),
                input_resolution=(3, 16, 16), num_classes=10, rng_seed=7)
    base.update(kw)
    return SpaceConfig(**base)


def chain_graph(n_mid: int) -> ArchGraph:
    """Input -> n_mid relu nodes -> Output."""
    nodes = [NodeSpec(0, OpKind.INPUT)]
    edges = []
    for i in range(1, n_mid + 1):
        nodes.append(NodeSpec(i, OpKind.RELU))
        edges.append((i - 1, i))
    nodes.append(NodeSpec(n_mid + 1, OpKind.OUTPUT))
    edges.append((n_mid, n_mid + 1))
    return ArchGraph(nodes=nodes, edges=edges, input_resolution=(1, 4, 4),
                     num_classes=2)


class TestCountParams:
    def test_single_conv_with_bias(self):
        g = ArchGraph(
            nodes=[NodeSpec(0, OpKind.INPUT),
                   NodeSpec(1, OpKind.CONV_REGULAR,
                            dict(kernel=3, stride=1, padding=1, dilation=1,
                                 groups=1, c_in=3, c_out=16, bias=1)),
                   NodeSpec(2, OpKind.OUTPUT)],
            edges=[(0, 1), (1, 2)], input_resolution=(3, 8, 8), num_classes=2)
        assert count_params(g) == 3 * 3 * 3 * 16 + 16 == 448

    def test_no_parameterized_nodes(self):
        assert count_params(chain_graph(3)) == 0

    def test_batchnorm_contributes_two_vectors(self):
        node = NodeSpec(0, OpKind.BATCHNORM, dict(channels=32))
        assert sum(int(np.prod(s)) for s in node.param_shapes()) == 64


class TestSampling:
    def test_deterministic_bytes(self):
        cfg = small_cfg()
        a = sample_architecture(cfg, 3)
        b = sample_architecture(cfg, 3)
        assert serialize_graph(a) == serialize_graph(b)

    def test_different_draws_differ(self):
        cfg = small_cfg()
        hashes = {canonical_hash(sample_architecture(cfg, i)) for i in range(20)}
        assert len(hashes) > 10

    def test_param_cap_respected(self):
        cfg = small_cfg(max_params=20_000)
        for i in range(200):
            assert count_params(sample_architecture(cfg, i)) <= 20_000

    def test_depth_within_range(self):
        cfg = small_cfg()
        for i in range(50):
            assert 4 <= conv_depth(sample_architecture(cfg, i)) <= 8

    def test_bn_free_has_no_batchnorm(self):
        cfg = small_cfg(bn_free=True)
        for i in range(200):
            assert not has_batchnorm(sample_architecture(cfg, i))

    def test_only_whitelisted_kinds(self):
        cfg = small_cfg()
        allowed = set(cfg.allowed_ops)
        for i in range(100):
            g = sample_architecture(cfg, i)
            assert {n.kind for n in g.nodes} <= allowed

    def test_infeasible_cap_raises(self):
        cfg = small_cfg(max_params=10)
        with pytest.raises(ConstraintInfeasibleError):
            sample_architecture(cfg, 0)

    def test_graph_invariants_hold(self):
        cfg = small_cfg()
        for i in range(50):
            validate_graph(sample_architecture(cfg, i))

    def test_every_sampled_graph_executes(self):
        cfg = small_cfg()
        rng = np.random.default_rng(0)
        for i in range(10):
            g = sample_architecture(cfg, i)
            params = init_params(g, seed=i)
            x = Tensor(rng.normal(size=(2, *cfg.input_resolution)))
            logits = float_forward(g, params, x)
            assert logits.shape == (2, cfg.num_classes)
            assert np.isfinite(logits.data).all()


class TestVirtualEdges:
    def test_chain_of_three(self):
        g = compute_virtual_edges(chain_graph(1), s_max=10)
        assert g.virtual_edges == [(0, 2, 2)]

    def test_chain_of_two_nodes(self):
        g = ArchGraph(nodes=[NodeSpec(0, OpKind.INPUT), NodeSpec(1, OpKind.OUTPUT)],
                      edges=[(0, 1)], input_resolution=(1, 4, 4), num_classes=2)
        assert compute_virtual_edges(g, s_max=10).virtual_edges == []

    def test_long_chain_respects_s_max(self):
        g = compute_virtual_edges(chain_graph(11), s_max=10)  # 13 nodes total
        ends = [(s, d) for s, d, _ in g.virtual_edges if s == 0 and d == 12]
        assert not ends  # distance 12 > 10
        dists = {dist for _, _, dist in g.virtual_edges}
        assert max(dists) == 10 and min(dists) == 2

    def test_original_edges_untouched(self):
        g0 = chain_graph(4)
        g = compute_virtual_edges(g0, s_max=5)
        assert g.edges == g0.edges
        assert g0.virtual_edges is None  # input not mutated

    def test_matches_networkx_bfs_oracle(self):
        cfg = small_cfg()
        s_max = 6
        for i in range(30):
            g = sample_architecture(cfg, i)
            got = set(map(tuple, compute_virtual_edges(g, s_max).virtual_edges))
            dg = nx.DiGraph()
            dg.add_nodes_from(n.id for n in g.nodes)
            dg.add_edges_from(g.edges)
            expect = set()
            for src, dists in nx.all_pairs_shortest_path_length(dg):
                for dst, d in dists.items():
                    if 2 <= d <= s_max:
                        expect.add((src, dst, d))
            assert got == expect


class TestValidation:
    def test_cycle_rejected(self):
        g = chain_graph(2)
        g.edges.append((3, 1))
        with pytest.raises(GraphError):
            validate_graph(g)

    def test_two_inputs_rejected(self):
        g = chain_graph(1)
        g.nodes.append(NodeSpec(99, OpKind.INPUT))
        g.edges.append((99, 1))
        with pytest.raises(GraphError, match="exactly one"):
            validate_graph(g)

    def test_stranded_node_rejected(self):
        g = chain_graph(2)
        g.nodes.append(NodeSpec(99, OpKind.RELU))
        with pytest.raises(GraphError, match="path"):
            validate_graph(g)

    def test_residual_shape_mismatch_rejected(self):
        conv = NodeSpec(1, OpKind.CONV_REGULAR,
                        dict(kernel=3, stride=2, padding=1, dilation=1,
                             groups=1, c_in=1, c_out=1, bias=0))
        g = ArchGraph(
            nodes=[NodeSpec(0, OpKind.INPUT), conv, NodeSpec(2, OpKind.RESIDUAL_ADD),
                   NodeSpec(3, OpKind.OUTPUT)],
            edges=[(0, 1), (1, 2), (0, 2), (2, 3)],
            input_resolution=(1, 8, 8), num_classes=2)
        with pytest.raises(GraphError, match="differ in shape"):
            validate_graph(g)


class TestSplits:
    def test_split_shapes_and_disjointness(self):
        cfg = small_cfg()
        sizes = dict(iid=5, deep=5, wide=5, bnfree=5)
        splits = make_splits(cfg, sizes)
        assert sorted(splits) == ["bnfree", "deep", "iid", "wide"]
        hashes = [canonical_hash(g) for members in splits.values() for g in members]
        assert len(hashes) == len(set(hashes)) == 20

    def test_deep_split_strictly_deeper(self):
        cfg = small_cfg()
        splits = make_splits(cfg, dict(deep=8))
        for g in splits["deep"]:
            assert conv_depth(g) > cfg.depth_range[1]

    def test_wide_split_strictly_wider(self):
        cfg = small_cfg()
        splits = make_splits(cfg, dict(wide=8))
        for g in splits["wide"]:
            assert max_width(g) > cfg.width_range[1]

    def test_bnfree_split_has_no_batchnorm(self):
        splits = make_splits(small_cfg(), dict(bnfree=8))
        assert all(not has_batchnorm(g) for g in splits["bnfree"])

    def test_iid_matches_training_constraints(self):
        cfg = small_cfg()
        splits = make_splits(cfg, dict(iid=10))
        assert len(splits["iid"]) == 10
        for g in splits["iid"]:
            assert cfg.depth_range[0] <= conv_depth(g) <= cfg.depth_range[1]
            assert count_params(g) <= cfg.max_params

    def test_overlapping_seeds_rejected(self):
        cfg = small_cfg(rng_seed=5)
        with pytest.raises(GraphError, match="distinct"):
            make_splits(cfg, dict(iid=2), split_seeds={"iid": 5})
        with pytest.raises(GraphError, match="distinct"):
            make_splits(cfg, dict(iid=2, deep=2),
                        split_seeds={"iid": 9, "deep": 9})

    def test_non_strict_deep_range_rejected(self):
        with pytest.raises(GraphError, match="above"):
            make_splits(small_cfg(), dict(deep=2), deep_depth_range=(6, 10))


class TestSerialization:
    def test_roundtrip_many_random_graphs(self):
        cfg = small_cfg()
        for i in range(40):
            g = compute_virtual_edges(sample_architecture(cfg, i), s_max=10)
            text = serialize_graph(g)
            g2 = deserialize_graph(text)
            assert serialize_graph(g2) == text
            assert g2.virtual_edges == g.virtual_edges
            assert g2.num_classes == g.num_classes
            assert g2.input_resolution == g.input_resolution

    def test_empty_virtual_edges_roundtrip(self):
        g = ArchGraph(nodes=[NodeSpec(0, OpKind.INPUT), NodeSpec(1, OpKind.OUTPUT)],
                      edges=[(0, 1)], input_resolution=(1, 4, 4), num_classes=2)
        g = compute_virtual_edges(g, s_max=10)
        g2 = deserialize_graph(serialize_graph(g))
        assert g2.virtual_edges == []

    def test_truncated_file_is_an_error(self):
        g = sample_architecture(small_cfg(), 0)
        text = serialize_graph(g)
        truncated = "\n".join(text.splitlines()[:4])
        with pytest.raises((GraphFormatError, GraphError)):
            deserialize_graph(truncated)

    def test_bad_header(self):
        with pytest.raises(GraphFormatError, match="header"):
            deserialize_graph("not-a-graph v9\n")

    def test_error_carries_line_number(self):
        text = ("ghnq-graph v1\n"
                "meta channels=1 height=4 width=4 classes=2\n"
                "node 0 input\n"
                "node 1 wat\n")
        with pytest.raises(GraphFormatError, match="line 4"):
            deserialize_graph(text)

    def test_unknown_attr_key_rejected(self):
        text = ("ghnq-graph v1\n"
                "meta channels=1 height=4 width=4 classes=2\n"
                "node 0 input\n"
                "node 1 bn channels=4 momentum=9\n"
                "node 2 output\n"
                "edge 0 1\nedge 1 2\n")
        with pytest.raises(GraphFormatError, match="unknown keys"):
            deserialize_graph(text)

    def test_handwritten_minimal_graph(self):
        text = ("ghnq-graph v1\n"
                "meta channels=3 height=8 width=8 classes=2\n"
                "node 0 input\n"
                "node 1 conv kernel=3 stride=1 padding=1 dilation=1 groups=1"
                " c_in=3 c_out=4 bias=1\n"
                "node 2 output\n"
                "edge 0 1\n"
                "edge 1 2\n")
        g = deserialize_graph(text)
        assert len(g.nodes) == 3
        assert g.node_by_id(1).kind is OpKind.CONV_REGULAR
        assert count_params(g) == 3 * 3 * 3 * 4 + 4
