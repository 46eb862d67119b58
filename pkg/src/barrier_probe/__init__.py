"""Detect source words whose counterfactual editing improves translation quality."""

__version__ = "0.1.0"

from .estimators import (
    EstimatorConfig,
    Histogram,
    RiskReport,
    counterfactual_scores,
    detect_barriers,
    estimate_risk,
    estimate_risk_exact,
    estimate_risk_gradient,
    estimate_risk_stratified,
    estimate_risk_uniform,
    simulate_estimators,
    truncated_mean,
)
from .gateway import DecodeCache, ModelHandle, RemoteModel, ToyModel, decode_cached
from .metrics import BleuScore, Ranking, kendall_w, overlap_at_k, sentence_bleu
from .text_core import (
    AnnotatedCorpus,
    Edit,
    ParallelExample,
    Sentence,
    Vocab,
    apply_edit,
    build_vocab,
    edit_set,
)
from .toy import SynthCorpusSpec, ToyParams, build_toy_model, gen_synth_corpus, toy_vocab

__all__ = [
    "AnnotatedCorpus",
    "BleuScore",
    "DecodeCache",
    "Edit",
    "EstimatorConfig",
    "Histogram",
    "ModelHandle",
    "ParallelExample",
    "Ranking",
    "RemoteModel",
    "RiskReport",
    "Sentence",
    "SynthCorpusSpec",
    "ToyModel",
    "ToyParams",
    "Vocab",
    "apply_edit",
    "build_toy_model",
    "build_vocab",
    "counterfactual_scores",
    "decode_cached",
    "detect_barriers",
    "edit_set",
    "estimate_risk",
    "estimate_risk_exact",
    "estimate_risk_gradient",
    "estimate_risk_stratified",
    "estimate_risk_uniform",
    "gen_synth_corpus",
    "kendall_w",
    "overlap_at_k",
    "sentence_bleu",
    "simulate_estimators",
    "toy_vocab",
    "truncated_mean",
]
