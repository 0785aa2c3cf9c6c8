"""Differentiable fragment generation jointly trained with a query classifier."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import ClassifierConfig, KnowledgeClassifier, reinit_output_layer
from .estimator import DraganClassifier
from .exceptions import ConfigError, ContractError, DataError, DraganError, NondeterminismError, NumericDomainError
from .generator import CandidateBatch, FragmentGenerator, GeneratorConfig, sample_start_positions
from .numerics import ParamStore, backward, grad_check, log_softmax, logsumexp, softmax
from .objective import candidate_weights, loss_and_grads, marginal_log_likelihood
from .text_data import CorpusSpec, Example, Vocab, build_vocab, load_dataset, save_dataset, synth_corpus
from .training import (
    MetricsReport,
    TrainConfig,
    benchmark_inference,
    evaluate,
    joint_train,
    pretrain_classifier,
    pretrain_generator,
)

__version__ = "0.1.0"
