import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_rel_error, numeric_grad
from graphfsl.graphreg import (
    SIMILARITIES,
    DivergenceError,
    ParamTable,
    RegConfig,
    SGDConfig,
    _ns_loss_given,
    dump_binary,
    dump_text,
    embed_graph,
    graph_loss,
    graph_loss_exact,
    graph_loss_grad_exact,
    graph_loss_ns,
    load,
    load_binary,
    load_text,
    permute_table,
    sample_negatives,
    save,
    similarity,
    similarity_matrix,
)
from graphfsl.labelgraph import NeighborhoodMap, WalkConfig, build_neighborhoods, load_edge_list
from graphfsl.tasks import make_binary_tree


def random_nmap(n, rng, pairs=12):
    src = rng.integers(n, size=pairs)
    ctx = (src + 1 + rng.integers(n - 1, size=pairs)) % n
    return NeighborhoodMap(n, src, ctx)


# ---------------------------------------------------------------------------
# similarities


def test_similarity_examples():
    assert similarity([1, 0], [1, 0], "cosine") == 1.0
    assert similarity([0, 0], [1, 1], "neg-sq-euclidean") == -2.0
    assert similarity([1, 2], [3, 4], "dot") == 11.0


def test_cosine_zero_vector_error():
    with pytest.raises(ValueError):
        similarity([0, 0], [1, 0], "cosine")


def test_similarity_dimension_mismatch():
    with pytest.raises(ValueError):
        similarity([1, 2], [1, 2, 3], "dot")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(SIMILARITIES))
def test_similarity_ranges_and_matrix_agree(seed, kind):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    m = similarity_matrix(a, b, kind)
    for i in range(4):
        for j in range(5):
            s = similarity(a[i], b[j], kind)
            assert m[i, j] == pytest.approx(s, abs=1e-10)
            if kind == "neg-sq-euclidean":
                assert s <= 0
            if kind == "cosine":
                assert -1 <= s <= 1


# ---------------------------------------------------------------------------
# exact loss


def test_empty_map_loss_zero():
    t = ParamTable(np.ones((3, 2)))
    assert graph_loss_exact(t, NeighborhoodMap.empty(3), RegConfig()) == 0.0
    assert np.all(graph_loss_grad_exact(t, NeighborhoodMap.empty(3), RegConfig()) == 0)


def test_two_node_cosine_closed_form():
    t = ParamTable(np.array([[1.0, 0.0], [1.0, 0.0]]))
    nm = NeighborhoodMap.from_dict(2, {0: [1], 1: [0]})
    loss = graph_loss_exact(t, nm, RegConfig(temperature=2.0, similarity="cosine"))
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)
    assert loss == pytest.approx(1.3863, abs=1e-4)


@pytest.mark.parametrize("kind", SIMILARITIES)
def test_equal_similarities_give_uniform_softmax(kind):
    n = 5
    t = ParamTable(np.tile([0.3, -0.4], (n, 1)))
    rng = np.random.default_rng(0)
    nm = random_nmap(n, rng, pairs=17)
    want = float(nm.source_counts() @ np.full(n, math.log(n)))
    assert graph_loss_exact(t, nm, RegConfig(similarity=kind)) == pytest.approx(want, rel=1e-12)


def test_identical_rows_dot_gradient_rows_identical():
    n = 4
    t = ParamTable(np.tile([0.5, 1.0, -0.2], (n, 1)))
    nm = NeighborhoodMap.from_dict(n, {y: [v for v in range(n) if v != y] for y in range(n)})
    g = graph_loss_grad_exact(t, nm, RegConfig(similarity="dot"))
    assert np.allclose(g, g[0], atol=1e-14)


def test_frozen_rows_get_exactly_zero_gradient():
    rng = np.random.default_rng(3)
    t = ParamTable(rng.normal(size=(6, 3))).frozen([1, 4])
    nm = random_nmap(6, rng)
    for kind in SIMILARITIES:
        g = graph_loss_grad_exact(t, nm, RegConfig(similarity=kind))
        assert np.all(g[[1, 4]] == 0.0)
        _, gns = graph_loss_ns(t, nm, RegConfig(similarity=kind, partition="negative-sampling"),
                               np.random.default_rng(0))
        assert np.all(gns[[1, 4]] == 0.0)


@pytest.mark.parametrize("kind", SIMILARITIES)
@pytest.mark.parametrize("temperature", [0.5, 2.0])
def test_exact_gradient_matches_finite_differences(kind, temperature):
    rng = np.random.default_rng([SIMILARITIES.index(kind), int(4 * temperature)])
    x = rng.normal(size=(5, 3))
    nm = random_nmap(5, rng)
    cfg = RegConfig(similarity=kind, temperature=temperature)
    analytic = graph_loss_grad_exact(ParamTable(x), nm, cfg)
    numeric = numeric_grad(lambda v: graph_loss_exact(ParamTable(v), nm, cfg), x)
    assert max_rel_error(analytic, numeric) < 1e-4


def test_temperature_rescaling_identities_for_dot():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 4))
    nm = random_nmap(6, rng, pairs=20)

    def loss(v, t):
        return graph_loss_exact(ParamTable(v), nm, RegConfig(similarity="dot", temperature=t))

    # dot(x/√2, x/√2) = dot(x, x)/2: doubling T equals scaling rows by 1/√2
    assert loss(x, 4.0) == pytest.approx(loss(x / math.sqrt(2), 2.0), rel=1e-12)
    # halving every row quarters the similarity
    assert loss(x, 8.0) == pytest.approx(loss(x / 2, 2.0), rel=1e-12)
    # so halving rows does not match a doubled temperature
    assert loss(x, 4.0) != pytest.approx(loss(x / 2, 2.0), rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(SIMILARITIES))
def test_loss_permutation_invariant(seed, kind):
    rng = np.random.default_rng(seed)
    n = 6
    t = ParamTable(rng.normal(size=(n, 3)))
    nm = random_nmap(n, rng)
    perm = rng.permutation(n)
    cfg = RegConfig(similarity=kind)
    base = graph_loss_exact(t, nm, cfg)
    moved = graph_loss_exact(permute_table(t, perm), nm.permuted(perm), cfg)
    assert moved == pytest.approx(base, rel=1e-10)
    g = graph_loss_grad_exact(t, nm, cfg)
    gp = graph_loss_grad_exact(permute_table(t, perm), nm.permuted(perm), cfg)
    assert np.allclose(gp[perm], g, atol=1e-10)


def test_dimension_mismatch_between_map_and_table():
    with pytest.raises(ValueError):
        graph_loss_exact(ParamTable(np.ones((3, 2))), NeighborhoodMap.empty(4), RegConfig())


# ---------------------------------------------------------------------------
# negative sampling


def test_ns_empty_map():
    loss, grad = graph_loss_ns(ParamTable(np.ones((3, 2))), NeighborhoodMap.empty(3),
                               RegConfig(partition="negative-sampling"), np.random.default_rng(0))
    assert loss == 0.0 and np.all(grad == 0)


def test_ns_orthogonal_single_pair_two_log_two():
    t = ParamTable(np.eye(3))
    nm = NeighborhoodMap.from_dict(3, {0: [1]})
    loss, _ = _ns_loss_given(t, nm, np.array([[2]]), RegConfig(similarity="cosine", partition="negative-sampling"))
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)


def test_ns_loss_nonnegative_and_negatives_exclude_source():
    rng = np.random.default_rng(4)
    n = 7
    nm = random_nmap(n, rng, pairs=30)
    negs = sample_negatives(n, nm.sources, 5, rng)
    assert negs.shape == (30, 5)
    assert not np.any(negs == nm.sources[:, None])
    loss, _ = graph_loss_ns(ParamTable(rng.normal(size=(n, 3))), nm,
                            RegConfig(partition="negative-sampling"), rng)
    assert loss >= 0


@pytest.mark.parametrize("kind", SIMILARITIES)
def test_ns_gradient_matches_finite_differences_for_fixed_negatives(kind):
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 3))
    nm = random_nmap(6, rng)
    negs = sample_negatives(6, nm.sources, 3, rng)
    cfg = RegConfig(similarity=kind, partition="negative-sampling", negatives=3)
    _, analytic = _ns_loss_given(ParamTable(x), nm, negs, cfg)
    numeric = numeric_grad(lambda v: _ns_loss_given(ParamTable(v), nm, negs, cfg)[0], x)
    assert max_rel_error(analytic, numeric) < 1e-4


def test_graph_loss_dispatch():
    t = ParamTable(np.random.default_rng(0).normal(size=(4, 2)))
    nm = random_nmap(4, np.random.default_rng(1))
    loss, _ = graph_loss(t, nm, RegConfig())
    assert loss == graph_loss_exact(t, nm, RegConfig())
    with pytest.raises(ValueError):
        graph_loss(t, nm, RegConfig(partition="negative-sampling"))


def test_reg_config_validation():
    with pytest.raises(ValueError):
        RegConfig(temperature=0)
    with pytest.raises(ValueError):
        RegConfig(similarity="manhattan")
    with pytest.raises(ValueError):
        RegConfig(partition="negative-sampling", negatives=0)


# ---------------------------------------------------------------------------
# embedding


def test_embed_zero_epochs_returns_init():
    g = make_binary_tree(2)
    reg = RegConfig(similarity="dot")
    a = embed_graph(g, 3, WalkConfig(), reg, SGDConfig(epochs=0), np.random.default_rng(5))
    b = embed_graph(g, 3, WalkConfig(), reg, SGDConfig(epochs=0), np.random.default_rng(5))
    assert np.array_equal(a.values, b.values)
    assert np.all(np.abs(a.values) <= 0.5 / 3)


def test_embed_two_node_similarity_increases():
    g = load_edge_list("a b\n")
    reg = RegConfig(similarity="dot", temperature=2.0)
    walk = WalkConfig(walks_per_node=2, walk_length=4, window=2)
    init = embed_graph(g, 2, walk, reg, SGDConfig(epochs=0), np.random.default_rng(1))
    out = embed_graph(g, 2, walk, reg, SGDConfig(lr=0.5, epochs=30, batch=8), np.random.default_rng(1))
    assert similarity(*out.values, "dot") > similarity(*init.values, "dot")


def test_embed_deterministic():
    g = make_binary_tree(3)
    args = (g, 4, WalkConfig(walks_per_node=2, walk_length=8), RegConfig(similarity="dot"),
            SGDConfig(lr=0.5, epochs=3))
    a = embed_graph(*args, np.random.default_rng(9))
    b = embed_graph(*args, np.random.default_rng(9))
    assert np.array_equal(a.values, b.values)


def test_embed_h4_siblings_closer():
    g = make_binary_tree(4)
    emb = embed_graph(g, 4, WalkConfig(), RegConfig(similarity="dot"), SGDConfig(lr=0.5, epochs=30),
                      np.random.default_rng(0)).values
    leaves = [g.node_id(f"c{j}") for j in range(16)]
    sib = np.mean([np.linalg.norm(emb[leaves[j]] - emb[leaves[j + 1]]) for j in range(0, 16, 2)])
    cross = np.mean([np.linalg.norm(emb[a] - emb[b]) for a in leaves[:8] for b in leaves[8:]])
    assert sib < cross


def test_embed_divergence_reports_iteration():
    g = make_binary_tree(2)
    with pytest.raises(DivergenceError) as err, np.errstate(all="ignore"):
        embed_graph(g, 2, WalkConfig(walks_per_node=2, walk_length=5), RegConfig(similarity="dot"),
                    SGDConfig(lr=1e300, epochs=5, clip=0), np.random.default_rng(0))
    assert err.value.iteration is not None


def test_embed_rejects_tiny_dimension():
    with pytest.raises(ValueError):
        embed_graph(make_binary_tree(2), 1, WalkConfig(), RegConfig(), SGDConfig(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# tables and serialization


def test_param_table_validation():
    with pytest.raises(ValueError):
        ParamTable(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        ParamTable(np.ones(3))
    with pytest.raises(ValueError):
        ParamTable(np.ones((2, 2)), names=("a",))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_binary_round_trip_bit_exact(n, d, seed):
    rng = np.random.default_rng(seed)
    t = ParamTable(rng.normal(size=(n, d)) * 10.0 ** rng.integers(-300, 300, size=(n, d)),
                   tuple(f"nöde{i}" for i in range(n)), rng.random(n) < 0.5)
    back = load_binary(dump_binary(t))
    assert back.values.tobytes() == t.values.tobytes()
    assert back.names == t.names and np.array_equal(back.trainable, t.trainable)


def test_text_round_trip_and_file_io(tmp_path):
    t = ParamTable(np.random.default_rng(0).normal(size=(3, 2)), ("a", "b", "c"), [True, False, True])
    back = load_text(dump_text(t))
    assert np.array_equal(back.values, t.values) and np.array_equal(back.trainable, t.trainable)
    for binary in (True, False):
        save(t, tmp_path / "t.tab", binary=binary)
        assert np.array_equal(load(tmp_path / "t.tab").values, t.values)


def test_binary_trailing_bytes_rejected():
    with pytest.raises(ValueError):
        load_binary(dump_binary(ParamTable(np.ones((2, 2)))) + b"x")


def test_walk_neighborhoods_feed_exact_loss():
    g = make_binary_tree(3)
    nm = build_neighborhoods(g, WalkConfig(walks_per_node=2, walk_length=6, window=2), np.random.default_rng(0))
    t = ParamTable(np.random.default_rng(1).normal(size=(g.n_nodes, 4)))
    assert np.isfinite(graph_loss_exact(t, nm, RegConfig()))
