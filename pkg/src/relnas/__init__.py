"""Budgeted one-shot architecture search with knowledge distillation for
twin-tower text relevance, built on a from-scratch reverse-mode autodiff
engine over numpy arrays.
"""

from .autodiff import (
    ComputeGraph,
    ContractViolation,
    GraphConsumed,
    NumericFailure,
    Parameter,
    Tensor,
    backward,
    finite_diff_check,
)
from .distill import RuleTeacher, TeacherRecord, TransformerTeacher, kd_loss, soft_target
from .layers import LayerSpec, SequenceBatch, layer_cost
from .metrics import MetricsReport, pr_auc
from .model import ModelConfig, RelevanceModel
from .optim import Adam, adam_step, clip_grad_norm, cosine_lr
from .pipeline import PipelineConfig, run_pipeline
from .search import SearchConfig, retrain_best, search_candidates, train_supernet
from .search_space import (
    ArchitectureGenome,
    CostModel,
    SupernetStore,
    decode,
    enumerate_small,
    genome_cost,
    parse_genome,
    sample_uniform,
)
from .tokenizer import TriLetterVocab, build_vocab, encode, tri_letters, word_embedding

__version__ = "0.1.0"
