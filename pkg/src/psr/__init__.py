"""Entity alignment with relational-reflection GNNs, stop-gradient training and attention sampling."""
from .config import RunConfig
from .encoder import ModelParams, forward, init_params
from .evaluate import EvalResult, evaluate
from .kg import JointGraph, KnowledgeGraph, SeedAlignment, load_dataset, merge_graphs, split_seeds
from .semisup import run_semi
from .trainer import train

__all__ = ["RunConfig", "ModelParams", "forward", "init_params", "EvalResult", "evaluate", "JointGraph",
           "KnowledgeGraph", "SeedAlignment", "load_dataset", "merge_graphs", "split_seeds", "run_semi", "train"]
__version__ = "0.1.0"
