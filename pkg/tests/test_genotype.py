import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsnas.cells import CellSpec
from wsnas.genotype import (
    Genotype,
    derive_genotype,
    discretize,
    discretize_cell,
    export_dot,
    export_space_dot,
    genotype_to_cellspec,
    is_subgraph_of,
    parse_dot_edges,
    refine_skip_connects,
)
from wsnas.ops import PRIMITIVES


def logits_for(spec, fill=0.0):
    return [np.full(len(ops), fill) for _, ops in spec.edges]


def test_discretize_excludes_zero_and_picks_strongest_remaining():
    spec = CellSpec.full("normal", num_intermediate=1,
                         ops=("max_pool_3x3", "skip_connect", "zero"))
    # zero has the largest logit but is excluded; max pool beats skip
    alpha = [np.array([2.0, 1.0, 5.0]), np.array([2.0, 1.0, 5.0])]
    pairs = discretize_cell(spec, alpha)
    assert pairs == ((0, "max_pool_3x3"), (1, "max_pool_3x3"))


def test_discretize_retains_two_strongest_edges_per_node():
    # node 4 (pred 0, 1, 2) with edge strengths 0.5, 0.4, 0.3
    def two_op_logits(strength):
        return np.array([np.log(strength / (1 - strength)), 0.0])

    spec = CellSpec.full("normal", num_intermediate=2, ops=("skip_connect", "zero"))
    alpha = [
        two_op_logits(0.9),  # (0,2)
        two_op_logits(0.9),  # (1,2)
        two_op_logits(0.5),  # (0,3)
        two_op_logits(0.4),  # (1,3)
        two_op_logits(0.3),  # (2,3)
    ]
    pairs = discretize_cell(spec, alpha)
    assert pairs[2:] == ((0, "skip_connect"), (1, "skip_connect"))


def test_discretize_tie_breaks_lower_op_then_lower_pred():
    spec = CellSpec.full("normal", num_intermediate=1,
                         ops=("max_pool_3x3", "avg_pool_3x3", "zero"))
    alpha = logits_for(spec)  # exact ties everywhere
    pairs = discretize_cell(spec, alpha)
    # max_pool_3x3 is canonically before avg_pool_3x3; preds orderd 0 then 1
    assert pairs == ((0, "max_pool_3x3"), (1, "max_pool_3x3"))


def test_full_genotype_has_two_edges_per_node_and_no_zero():
    rng = np.random.default_rng(0)
    normal = CellSpec.full("normal")
    reduce_ = CellSpec.full("reduction")
    for _ in range(20):
        alpha_n = [rng.standard_normal(8) for _ in normal.edges]
        alpha_r = [rng.standard_normal(8) for _ in reduce_.edges]
        geno = discretize(normal, alpha_n, reduce_, alpha_r)
        assert len(geno.normal) == 8 and len(geno.reduce) == 8
        assert all(op != "zero" for _, op in geno.normal + geno.reduce)
        assert geno.concat == (2, 3, 4, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), st.floats(-30, 30, allow_nan=False))
def test_discretize_invariant_under_logit_shift(seed, shift):
    rng = np.random.default_rng(seed)
    spec = CellSpec.full("normal")
    alpha = [rng.standard_normal(8) * 3 for _ in spec.edges]
    shifted = [a + shift for a in alpha]
    assert discretize_cell(spec, alpha) == discretize_cell(spec, shifted)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9))
def test_restricted_space_genotype_is_subgraph(seed):
    rng = np.random.default_rng(seed)
    full = CellSpec.full("normal")
    edges = []
    for key, ops in full.edges:
        keep = rng.choice(8, size=3, replace=False)
        edges.append((key, tuple(ops[k] for k in sorted(keep))))
    restricted = CellSpec(kind="normal", edges=tuple(edges))
    alpha = [rng.standard_normal(3) for _ in restricted.edges]
    geno = Genotype(
        normal=discretize_cell(restricted, alpha),
        reduce=discretize_cell(restricted, alpha),
    )
    assert is_subgraph_of(geno, restricted, restricted)


class TestRefineSkipConnects:
    def _skip_heavy_alpha(self, spec, skip_weights):
        """Logits forcing skip_connect to win on the edges named in skip_weights."""
        alpha = []
        for (i, j), ops in spec.edges:
            v = np.zeros(len(ops))
            if (i, j) in skip_weights:
                v[ops.index("skip_connect")] = skip_weights[(i, j)]
            else:
                v[ops.index("max_pool_3x3")] = 3.0
            alpha.append(v)
        return alpha

    def test_already_within_cap_is_unchanged(self):
        spec = CellSpec.full("normal")
        alpha = self._skip_heavy_alpha(spec, {(0, 2): 6.0})
        assert refine_skip_connects(spec, alpha, 2) == discretize_cell(spec, alpha)

    def test_four_skips_capped_to_two_largest(self):
        spec = CellSpec.full("normal")
        skip_weights = {(0, 2): 8.0, (1, 3): 7.0, (1, 4): 6.0, (1, 5): 5.0}
        alpha = self._skip_heavy_alpha(spec, skip_weights)
        baseline = discretize_cell(spec, alpha)
        assert sum(op == "skip_connect" for _, op in baseline) == 4
        refined = refine_skip_connects(spec, alpha, 2)
        kept = [
            (i, j)
            for j, chunk in zip((2, 3, 4, 5), range(0, 8, 2))
            for i, op in refined[chunk : chunk + 2]
            if op == "skip_connect"
        ]
        assert sum(op == "skip_connect" for _, op in refined) == 2
        assert set(kept) == {(0, 2), (1, 3)}  # the two largest skip weights

    def test_zero_cap_removes_all_skips(self):
        spec = CellSpec.full("normal")
        alpha = self._skip_heavy_alpha(
            spec, {(0, 2): 8.0, (1, 2): 7.5, (1, 3): 7.0, (1, 4): 6.0, (1, 5): 5.0}
        )
        refined = refine_skip_connects(spec, alpha, 0)
        assert all(op != "skip_connect" for _, op in refined)

    def test_negative_cap_rejected(self):
        spec = CellSpec.full("normal")
        with pytest.raises(ValueError):
            refine_skip_connects(spec, logits_for(spec), -1)


def test_derive_genotype_applies_cap_to_normal_cell_only():
    spec = CellSpec.full("normal")
    rspec = CellSpec.full("reduction")
    alpha = []
    for (i, j), ops in spec.edges:
        v = np.zeros(len(ops))
        v[ops.index("skip_connect")] = 5.0
        alpha.append(v)
    geno = derive_genotype(spec, alpha, rspec, [a.copy() for a in alpha], max_skips=2)
    assert sum(op == "skip_connect" for _, op in geno.normal) == 2
    assert sum(op == "skip_connect" for _, op in geno.reduce) == 8


def test_genotype_json_round_trip_and_schema():
    spec = CellSpec.full("normal")
    rng = np.random.default_rng(2)
    geno = discretize(spec, [rng.standard_normal(8) for _ in spec.edges],
                      CellSpec.full("reduction"),
                      [rng.standard_normal(8) for _ in spec.edges])
    payload = json.loads(geno.to_json())
    assert set(payload) == {"normal", "reduce", "concat"}
    assert payload["concat"] == [2, 3, 4, 5]
    assert len(payload["normal"]) == 8
    for pred, op in payload["normal"]:
        assert isinstance(pred, int) and op in PRIMITIVES
    assert Genotype.from_json(geno.to_json()) == geno


def test_genotype_json_rejects_bad_payloads():
    with pytest.raises(ValueError, match="missing key"):
        Genotype.from_json('{"normal": []}')
    with pytest.raises(ValueError, match="bad genotype entry"):
        Genotype.from_json('{"normal": [[0, "conv_7x7"]], "reduce": [], "concat": [2]}')


def test_genotype_to_cellspec_builds_single_op_edges():
    geno = Genotype(
        normal=((0, "skip_connect"), (1, "sep_conv_3x3"),
                (0, "max_pool_3x3"), (2, "avg_pool_3x3"),
                (1, "sep_conv_5x5"), (3, "skip_connect"),
                (2, "dil_sep_conv_3x3"), (4, "sep_conv_3x3")),
        reduce=((0, "max_pool_3x3"), (1, "max_pool_3x3"),
                (0, "skip_connect"), (2, "avg_pool_3x3"),
                (1, "sep_conv_3x3"), (2, "skip_connect"),
                (0, "sep_conv_5x5"), (3, "max_pool_3x3")),
    )
    spec = genotype_to_cellspec(geno, "normal")
    assert spec.num_intermediate == 4
    assert len(spec.edges) == 8
    assert spec.ops_at(0, 2) == ("skip_connect",)
    assert spec.ops_at(4, 5) == ("sep_conv_3x3",)


class TestDotExport:
    def test_empty_genotype_renders_seven_nodes_no_op_edges(self):
        geno = Genotype(normal=(), reduce=())
        text = export_dot(geno, "normal")
        declarations = [
            line for line in text.splitlines()
            if line.strip().endswith('";') and "->" not in line
        ]
        assert len(declarations) == 7
        assert parse_dot_edges(text) == []

    def test_round_trip_recovers_edge_multiset(self):
        rng = np.random.default_rng(4)
        spec = CellSpec.full("normal")
        geno = discretize(spec, [rng.standard_normal(8) for _ in spec.edges],
                          CellSpec.full("reduction"),
                          [rng.standard_normal(8) for _ in spec.edges])
        for kind in ("normal", "reduce"):
            triples = parse_dot_edges(export_dot(geno, kind))
            expected = sorted(
                (i, j, op)
                for j, chunk in zip((2, 3, 4, 5), range(0, 8, 2))
                for i, op in geno.cell_pairs(kind)[chunk : chunk + 2]
            )
            assert sorted(triples) == expected

    def test_export_is_byte_deterministic(self):
        geno = Genotype(normal=((0, "skip_connect"), (1, "max_pool_3x3")),
                        reduce=(), concat=(2,))
        assert export_dot(geno, "normal") == export_dot(geno, "normal")

    def test_space_export_lists_every_admissible_op(self):
        spec = CellSpec.full("normal", num_intermediate=1,
                             ops=("skip_connect", "zero", "max_pool_3x3"))
        triples = parse_dot_edges(export_space_dot(spec))
        assert len(triples) == 6  # 2 edges x 3 ops
        assert (0, 2, "zero") in triples
