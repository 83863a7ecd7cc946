"""Meta-path learning on heterogeneous graphs and meta-path structured GNNs."""
from .hetgraph import GraphFormatError, HetGraph, LabeledSplit, MetaPath, load_graph, split_labels, write_graph
from .mpgnn import MPGNNModel, TrainConfig, evaluate, f1_macro, mp_forward, rgcn_forward, train
from .scoring import (Bag, BagTargets, NodeTargets, ScoreResult, ScorerConfig, generate_bags, relabel,
                      score_relation)
from .search import SearchConfig, SearchTrace, learn_beam, learn_single, prune
from .syngen import SynDataset, SynSpec, generate, verify_labels, write_dataset

__version__ = "0.1.0"
