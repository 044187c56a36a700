"""Text serialization of patient event streams for embedding-based prediction."""

from .events import (
    ClinicalEvent,
    IngestError,
    LabelConflictError,
    Patient,
    PredictionInstance,
    TaskSpec,
    Visit,
    events_before,
    ingest_events,
    ingest_labels,
    merge_labels,
    parse_rfc3339,
)
from .ontology import ConceptTable, OntologyError, OntologyIndex, default_concept_table
from .serialize import (
    SerializationConfig,
    SerializationFormat,
    SerializedRecord,
    component_texts,
    serialize_record,
)
from .embeddings import (
    CachedProvider,
    ChunkedMeanProvider,
    EmbeddingStore,
    HashingEmbedder,
    IntegrityError,
    MemeEmbedder,
    ProviderUnavailable,
    RemoteDecoder,
    RemoteProvider,
    VectorCache,
    concat_embed,
)
from .heads import GBMModel, LRModel, gbm_train, lr_train, tune
from .evaluation import MetricReport, auprc, auroc, bootstrap_ci, brier, sample_shots
from .experiment import FewShotConfig, derive_seed, run_fewshot

__version__ = "0.1.0"

__all__ = [
    "ClinicalEvent",
    "IngestError",
    "LabelConflictError",
    "Patient",
    "PredictionInstance",
    "TaskSpec",
    "Visit",
    "events_before",
    "ingest_events",
    "ingest_labels",
    "merge_labels",
    "parse_rfc3339",
    "ConceptTable",
    "OntologyError",
    "OntologyIndex",
    "default_concept_table",
    "SerializationConfig",
    "SerializationFormat",
    "SerializedRecord",
    "component_texts",
    "serialize_record",
    "CachedProvider",
    "ChunkedMeanProvider",
    "EmbeddingStore",
    "HashingEmbedder",
    "IntegrityError",
    "MemeEmbedder",
    "ProviderUnavailable",
    "RemoteDecoder",
    "RemoteProvider",
    "VectorCache",
    "concat_embed",
    "GBMModel",
    "LRModel",
    "gbm_train",
    "lr_train",
    "tune",
    "MetricReport",
    "auprc",
    "auroc",
    "bootstrap_ci",
    "brier",
    "sample_shots",
    "FewShotConfig",
    "derive_seed",
    "run_fewshot",
    "__version__",
]
