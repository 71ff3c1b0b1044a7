"""Few-shot knowledge-graph link prediction via shared connection subgraphs.

Given K support triplets of an unseen relation, the engine discovers the
subgraph pattern their contexts share (the hypothesis, a soft edge mask
per support graph) and scores query candidates by how well a matching
evidence subgraph can be found in their contexts.  Two interchangeable
proposers are provided: a learning-free constrained mask optimizer over a
randomly initialized relational message-passing encoder, and a trainable
encoder/decoder with self-supervised reconstruction pretraining.
"""

from .context import ContextConfig, ContextGraph, contextualize_task, enclosing_subgraph
from .evaluation import EvalConfig, MetricsReport, evaluate, rank_metrics, sample_negatives
from .kg import KnowledgeGraph, load_kg, save_kg
from .learned import TrainConfig, propose_hypothesis, score_query, train, train_supervised
from .mask_opt import OptConfig, connectivity, entropy, propose_evidence_opt, propose_hypothesis_opt
from .model import Model, ModelConfig, cosine, decode, encode, init_model, load_checkpoint, save_checkpoint
from .synth import SynthConfig, SyntheticTask, generate_task, iou, supervised_mask_loss
from .tasks import FewShotTask, Query, load_task_file, save_task_file

__all__ = [
    "ContextConfig",
    "ContextGraph",
    "EvalConfig",
    "FewShotTask",
    "KnowledgeGraph",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "OptConfig",
    "Query",
    "SynthConfig",
    "SyntheticTask",
    "TrainConfig",
    "connectivity",
    "contextualize_task",
    "cosine",
    "decode",
    "enclosing_subgraph",
    "encode",
    "entropy",
    "evaluate",
    "generate_task",
    "init_model",
    "iou",
    "load_checkpoint",
    "load_kg",
    "load_task_file",
    "propose_evidence_opt",
    "propose_hypothesis",
    "propose_hypothesis_opt",
    "rank_metrics",
    "sample_negatives",
    "save_checkpoint",
    "save_kg",
    "save_task_file",
    "score_query",
    "supervised_mask_loss",
    "train",
    "train_supervised",
]

__version__ = "0.1.0"
