import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_rel_error, numeric_grad
from graphfsl.experiment import Arm, SynthCell, by_arm, run_synth_cell
from graphfsl.graphreg import SIMILARITIES, DivergenceError, ParamTable, RegConfig, graph_loss_exact
from graphfsl.labelgraph import NeighborhoodMap, build_neighborhoods, WalkConfig
from graphfsl.learners import (
    LEARNERS,
    GraphPrior,
    JointConfig,
    accuracy,
    ce_loss,
    class_softmax,
    episode_ce,
    fit_cosine,
    fit_inner_loop,
    fit_prototype,
    init_classifier,
    joint_objective,
    nearest_base,
)
from graphfsl.metrics import paired_gap_test
from graphfsl.tasks import Episode, make_binary_tree


def tiny_episode(support, labels, classes, query=None, query_y=None, base=(), anchors=None):
    support = np.asarray(support, dtype=float)
    return Episode(
        support_x=support,
        support_y=np.asarray(labels),
        query_x=np.asarray(query if query is not None else support, dtype=float),
        query_y=np.asarray(query_y if query_y is not None else labels),
        classes=tuple(classes),
        base_classes=tuple(base),
        base_anchors=np.asarray(anchors if anchors is not None else np.zeros((0, support.shape[1]))),
    )


def tree_episode(seed=0, h=2, d=3):
    """Classes c0, c1 novel and c2, c3 base on the h=2 tree."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, d))
    y = np.array([0, 1, 0, 1])
    return tiny_episode(x, y, ("c0", "c1"), query=rng.normal(size=(6, d)), query_y=[0, 1] * 3,
                        base=("c2", "c3"), anchors=rng.normal(size=(2, d)))


# ---------------------------------------------------------------------------
# softmax and cross-entropy


def test_softmax_symmetric():
    p = class_softmax(np.array([1.0, 0.0]), np.array([[0.0, 1.0], [0.0, -1.0]]), "dot")
    assert np.allclose(p, [0.5, 0.5])


def test_softmax_closed_form():
    p = class_softmax(np.array([1.0, 0.0]), np.eye(2), "dot")
    assert p[0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_softmax_single_class():
    assert class_softmax(np.array([0.3, 2.0]), np.array([[1.0, 1.0]]), "cosine").tolist() == [1.0]


def test_softmax_zero_feature_cosine():
    with pytest.raises(ValueError):
        class_softmax(np.zeros(2), np.eye(2), "cosine")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    x, rows = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    p = class_softmax(x, rows, "dot")
    assert np.all(p > 0) and np.allclose(p.sum(1), 1, atol=1e-12)
    # an extra coordinate that adds `shift` to every class similarity
    xs = np.hstack([x, np.ones((5, 1))])
    rs = np.hstack([rows, np.full((4, 1), shift)])
    ps = class_softmax(xs, rs, "dot")
    assert np.array_equal(ps.argmax(1), p.argmax(1))
    assert np.allclose(ps, p, atol=1e-9)


def test_ce_uniform_is_log_n():
    x = np.array([[1.0, 2.0]])
    assert ce_loss(x, [2], np.zeros((4, 2)), "dot") == pytest.approx(math.log(4))


def test_ce_three_class_closed_form():
    rows = np.array([[2.0], [1.0], [0.0]])
    loss = ce_loss(np.array([[1.0]]), [0], rows, "dot")
    assert loss == pytest.approx(math.log(1 + math.exp(-1) + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.4076, abs=1e-4)


def test_ce_perfect_limit():
    rows = np.array([[200.0], [0.0]])
    assert ce_loss(np.array([[1.0]]), [0], rows, "dot") < 1e-60


def test_ce_unknown_label():
    with pytest.raises(ValueError):
        ce_loss(np.ones((1, 2)), [3], np.eye(2), "dot")


# ---------------------------------------------------------------------------
# prototype learner


def test_prototype_vanilla_means():
    g = make_binary_tree(1)
    ep = tiny_episode([[0, 0], [2, 2]], [0, 1], ("c0", "c1"))
    clf = fit_prototype(ep, g, JointConfig(lam=0, iterations=0))
    assert np.array_equal(clf.rows, [[0.0, 0.0], [2.0, 2.0]])


def test_prototype_means_of_several_shots():
    g = make_binary_tree(1)
    ep = tiny_episode([[0, 0], [2, 0], [4, 4], [6, 4]], [0, 0, 1, 1], ("c0", "c1"))
    clf = fit_prototype(ep, g, JointConfig(lam=0, iterations=0))
    assert np.array_equal(clf.rows, [[1.0, 0.0], [5.0, 4.0]])


def test_prototype_zero_support_class():
    g = make_binary_tree(1)
    ep = tiny_episode([[0, 0], [1, 1]], [0, 0], ("c0", "c1"), query_y=[0, 0])
    with pytest.raises(ValueError, match="zero support"):
        fit_prototype(ep, g, JointConfig())


def test_prototype_lambda_one_refines():
    ep = tree_episode()
    clf = fit_prototype(ep, make_binary_tree(2), JointConfig(lam=1.0, iterations=20))
    means = np.array([ep.support_x[ep.support_y == j].mean(0) for j in range(2)])
    assert not np.allclose(clf.rows, means)
    assert len(clf.objective) == 21


# ---------------------------------------------------------------------------
# lambda = 0 identity and frozen rows


@pytest.mark.parametrize("name", sorted(LEARNERS))
def test_lambda_zero_matches_unregularized_bitwise(name):
    ep = tree_episode(3)
    g = make_binary_tree(2)
    cfg = JointConfig(lam=0.0, iterations=15, seed=4)
    a = LEARNERS[name](ep, g, cfg, regularize=True, record=True)
    b = LEARNERS[name](ep, g, cfg, regularize=False, record=True)
    assert a.rows.tobytes() == b.rows.tobytes()
    assert np.array_equal(a.trajectory, b.trajectory)
    assert episode_ce(ep, a) == episode_ce(ep, b)


@pytest.mark.parametrize("name", ["cosine", "inner-loop"])
def test_frozen_base_rows_unchanged(name):
    ep = tree_episode(5)
    g = make_binary_tree(2)
    clf = LEARNERS[name](ep, g, JointConfig(lam=3.0, iterations=20, seed=1))
    base_ids = [g.node_id(c) for c in ep.base_classes]
    assert np.array_equal(clf.table.values[base_ids], ep.base_anchors)
    assert not np.any(clf.table.trainable[base_ids])


def test_huge_lambda_graph_loss_strictly_decreases():
    ep = tree_episode(2, h=2)
    g = make_binary_tree(2)
    clf = fit_cosine(ep, g, JointConfig(lam=1e6, lr=1e-7, iterations=30, graph_similarity="dot"))
    assert np.all(np.diff(clf.graph_objective) < 0)


def test_inner_loop_zero_steps_is_initialization():
    ep = tree_episode(6)
    g = make_binary_tree(2)
    cfg = JointConfig(lam=2.0, inner_steps=0, seed=9)
    clf = fit_inner_loop(ep, g, cfg, record=True)
    assert clf.objective == [] and clf.trajectory.shape[0] == 1
    again = fit_cosine(ep, g, JointConfig(lam=2.0, iterations=0, seed=9))
    assert np.array_equal(clf.rows, again.rows)


def test_divergence_raises():
    ep = tree_episode(1)
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        fit_prototype(ep, make_binary_tree(2), JointConfig(lam=1.0, lr=1e200, iterations=5))


def test_joint_config_validation():
    with pytest.raises(ValueError):
        JointConfig(lam=-1)
    with pytest.raises(ValueError):
        JointConfig(iterations=-1)
    with pytest.raises(ValueError):
        JointConfig(init="D")


def test_predict_and_accuracy():
    ep = tiny_episode([[0, 0], [4, 0]], [0, 1], ("c0", "c1"), query=[[0.5, 0], [3.6, 0]], query_y=[0, 1])
    clf = fit_prototype(ep, make_binary_tree(1), JointConfig())
    assert clf.predict(ep.query_x).tolist() == [0, 1]
    assert accuracy(ep, clf) == 1.0


# ---------------------------------------------------------------------------
# initialization


def base_table(g, ep):
    values = np.zeros((g.n_nodes, ep.support_x.shape[1]))
    trainable = np.ones(g.n_nodes, dtype=bool)
    for name, row in zip(ep.base_classes, ep.base_anchors):
        values[g.node_id(name)] = row
        trainable[g.node_id(name)] = False
    return ParamTable(values, g.names, trainable)


def test_init_b_copies_sibling():
    g = make_binary_tree(2)
    ep = tiny_episode([[1, 0]], [0], ("c0",), base=("c1", "c2", "c3"),
                      anchors=[[5.0, 5.0], [6.0, 6.0], [7.0, 7.0]])
    rows = init_classifier(g, base_table(g, ep), ["c0"], "B", np.random.default_rng(0))
    assert np.array_equal(rows, [[5.0, 5.0]])


def test_init_b_tie_lowest_id():
    g = make_binary_tree(2)
    ep = tiny_episode([[1, 0]], [0], ("c0",), base=("c3", "c2"), anchors=[[3.0, 3.0], [2.0, 2.0]])
    assert nearest_base(g, g.node_id("c0"), [g.node_id("c3"), g.node_id("c2")]) == g.node_id("c2")
    rows = init_classifier(g, base_table(g, ep), ["c0"], "B", np.random.default_rng(0))
    assert np.array_equal(rows, [[2.0, 2.0]])


def test_init_a_scale():
    rows = init_classifier(make_binary_tree(2), ParamTable(np.zeros((7, 4))), [3, 4], "A",
                           np.random.default_rng(0))
    assert rows.shape == (2, 4) and np.all(np.abs(rows) <= 1 / 8)


def test_init_c_lowers_graph_loss_versus_a():
    g = make_binary_tree(3)
    reg = RegConfig()
    prior = GraphPrior.build(g, reg, seed=0)
    rng = np.random.default_rng(2)
    table = ParamTable(rng.uniform(-0.1, 0.1, size=(g.n_nodes, 4)), g.names)
    novel = [g.node_id(f"c{j}") for j in range(4)]
    base = [g.node_id(f"c{j}") for j in range(4, 8)]
    table = table.frozen(base)
    rows_a = init_classifier(prior, table, novel, "A", np.random.default_rng(7))
    rows_c = init_classifier(prior, table, novel, "C", np.random.default_rng(7), reg)
    xa, xc = table.values.copy(), table.values.copy()
    xa[novel], xc[novel] = rows_a, rows_c
    la = graph_loss_exact(ParamTable(xa), prior.nmap, reg)
    lc = graph_loss_exact(ParamTable(xc), prior.nmap, reg)
    assert lc <= la


def test_init_unknown_strategy():
    with pytest.raises(ValueError):
        init_classifier(make_binary_tree(1), ParamTable(np.zeros((3, 2))), [1], "Z", np.random.default_rng(0))


# ---------------------------------------------------------------------------
# joint-objective gradients


@pytest.mark.parametrize("kind,graph_sim", [("neg-sq-euclidean", "neg-sq-euclidean"),
                                            ("cosine", "cosine"), ("dot", "cosine"), ("dot", "dot")])
def test_joint_objective_gradient(kind, graph_sim):
    rng = np.random.default_rng([SIMILARITIES.index(graph_sim), len(kind)])
    g = make_binary_tree(2)
    ep = tree_episode(8)
    nmap = build_neighborhoods(g, WalkConfig(walks_per_node=2, walk_length=4, window=2), rng)
    trainable = np.ones(g.n_nodes, dtype=bool)
    trainable[[g.node_id("c2"), g.node_id("c3")]] = False
    x = rng.normal(size=(g.n_nodes, 3))
    cls_ids = np.array([g.node_id("c0"), g.node_id("c1")])
    reg = RegConfig(similarity=graph_sim)

    def f(v):
        return joint_objective(ParamTable(v, g.names, trainable), cls_ids, ep, kind, 2.5, nmap, reg)[0]

    _, _, analytic = joint_objective(ParamTable(x, g.names, trainable), cls_ids, ep, kind, 2.5, nmap, reg)
    numeric = numeric_grad(f, x, mask=trainable)
    assert max_rel_error(analytic, numeric) < 1e-4
    assert np.all(analytic[~trainable] == 0)


def test_joint_objective_without_graph_term():
    ep = tree_episode(0)
    g = make_binary_tree(2)
    x = np.random.default_rng(0).normal(size=(g.n_nodes, 3))
    obj, gl, grad = joint_objective(ParamTable(x, g.names), np.array([3, 4]), ep, "dot", 5.0, None, RegConfig())
    assert gl is None
    assert obj == ce_loss(ep.support_x, ep.support_y, x[[3, 4]], "dot")
    assert np.all(grad[[0, 1, 2, 5, 6]] == 0)


def test_graph_prior_child_parent():
    g = make_binary_tree(2)
    prior = GraphPrior.build(g, RegConfig(neighborhood="child-parent"))
    assert len(prior.nmap) == 2 * g.n_edges


def test_empty_neighborhoods_make_graph_term_zero():
    ep = tree_episode(0)
    g = make_binary_tree(2)
    a = fit_cosine(ep, g, JointConfig(lam=5.0, iterations=10), nmap=NeighborhoodMap.empty(g.n_nodes))
    b = fit_cosine(ep, g, JointConfig(lam=0.0, iterations=10), regularize=False)
    assert np.allclose(a.rows, b.rows)


# ---------------------------------------------------------------------------
# synthetic directions


@pytest.mark.parametrize("learner", ["prototype", "inner-loop"])
def test_regularized_learner_beats_baseline_on_synthetic_tasks(learner):
    arms = [Arm("baseline", learner, lam=0.0), Arm("graph", learner)]
    res = run_synth_cell(SynthCell(h=6, k=1, sigma=0.2), arms, 200, master_seed=0)
    gap, p = paired_gap_test(by_arm(res, "baseline"), by_arm(res, "graph"))
    assert gap > 0 and p < 0.01
