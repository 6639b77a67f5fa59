"""Graph-regularized few-shot learning on label graphs."""

from .graphreg import ParamTable, RegConfig, SGDConfig, embed_graph, graph_loss
from .labelgraph import LabelGraph, WalkConfig, build_neighborhoods, load_edge_list, read_edge_list
from .learners import JointConfig, fit_cosine, fit_inner_loop, fit_prototype, init_classifier
from .metrics import hardness, paired_gap_test, pearson, summarize
from .tasks import make_binary_tree, sample_episode, sample_synthetic_episode, split_leaves

__all__ = [
    "LabelGraph", "WalkConfig", "build_neighborhoods", "load_edge_list", "read_edge_list",
    "ParamTable", "RegConfig", "SGDConfig", "embed_graph", "graph_loss",
    "JointConfig", "fit_cosine", "fit_inner_loop", "fit_prototype", "init_classifier",
    "hardness", "paired_gap_test", "pearson", "summarize",
    "make_binary_tree", "sample_episode", "sample_synthetic_episode", "split_leaves",
]
