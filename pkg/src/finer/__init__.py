"""Federated incremental named-entity recognition with local-global forgetting defense."""
from .baselines import METHODS, resolve_objective
from .corpus import LabelRegistry, Sentence, build_task_stream, load_corpus, shard_clients
from .errors import AggregationError, ConfigurationError, ContractViolation, DeserializationError, ParseError
from .federation import Federation, FederationConfig, aggregate, run_experiment
from .metrics import span_f1
from .synthetic import generate_benchmark, generate_sentences
from .tagger import Tagger, TaggerConfig

__version__ = "0.1.0"

__all__ = [
    "METHODS", "resolve_objective", "LabelRegistry", "Sentence", "build_task_stream", "load_corpus",
    "shard_clients", "AggregationError", "ConfigurationError", "ContractViolation", "DeserializationError",
    "ParseError", "Federation", "FederationConfig", "aggregate", "run_experiment", "span_f1",
    "generate_benchmark", "generate_sentences", "Tagger", "TaggerConfig",
]
