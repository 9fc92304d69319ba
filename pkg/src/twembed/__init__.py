"""Whole-graph embeddings of dynamic connectomes from temporal random walks."""

from .connectome import DynamicGraph, TimeSeriesMatrix, WindowSpec, build_dynamic_graph, pearson
from .encoder import EncoderConfig, EncoderState, Vocabulary, encode
from .evalkit import EvalConfig, EvalReport, metrics, run_cv, stratified_kfold
from .synth import RegimeSpec, generate_synthetic_corpus
from .tempwalk import TemporalWalk, WalkConfig, sample_corpus, sample_walk, transition_probs
from .trainer import Heads, TrainConfig, extract_embeddings, train

__version__ = "0.1.0"
