"""Streaming influence-aware group recommendation engine.

Submodules: ingest (data loading, group graph, temporal split), model
(group graph-convolution embeddings and ranking), sampling (variance-aware
edge sampling), cascade (item-conditioned influence propagation), temporal
(trajectory autoencoder profiles), index (key-ordered top-K serving index),
and pipeline/cli (end-to-end orchestration).
"""

from ._kernels import HAVE_COMPILED
from .ingest import (Dataset, GroupGraph, Interaction, TemporalSplit,
                     build_group_graph, dataset_stats, featurize_tags,
                     load_interactions, load_memberships, load_tags,
                     split_temporal, synthetic_dataset)
from .model import (GgcnConfig, ModelState, bpr_loss, check_gradients,
                    init_embeddings, load_state, new_state, predict_relevance,
                    propagate, save_state, train, update_item_embedding)
from .sampling import (SamplerConfig, SampledSubgraph, run_ges,
                       optimal_probabilities, approximate_probabilities,
                       estimator_variance)
from .cascade import (PropagationParams, PropagationGraph, CascadeResult,
                      build_propagation_graph, influence_probability,
                      simulate, willingness)
from .temporal import (GroupProfile, RnnAutoencoder, RnnConfig,
                       build_profiles, fine_tune_short_term, new_autoencoder,
                       predict_next, serving_embedding,
                       train_snapshot_sequence)
from .index import (IndexConfig, UgIndex, build_index, load_index,
                    query_knn, batch_query, save_index)
from .pipeline import (Engine, EngineConfig, evaluate, load_engine,
                       parse_config, recommend_groups, recommend_items,
                       recommend_stream, run_training, save_engine)

__version__ = "0.1.0"

__all__ = [
    "HAVE_COMPILED",
    "__version__",
    # ingest
    "Dataset", "GroupGraph", "Interaction", "TemporalSplit",
    "build_group_graph", "dataset_stats", "featurize_tags",
    "load_interactions", "load_memberships", "load_tags", "split_temporal",
    "synthetic_dataset",
    # model
    "GgcnConfig", "ModelState", "bpr_loss", "check_gradients",
    "init_embeddings", "load_state", "new_state", "predict_relevance",
    "propagate", "save_state", "train", "update_item_embedding",
    # sampling
    "SamplerConfig", "SampledSubgraph", "run_ges", "optimal_probabilities",
    "approximate_probabilities", "estimator_variance",
    # cascade
    "PropagationParams", "PropagationGraph", "CascadeResult",
    "build_propagation_graph", "influence_probability", "simulate",
    "willingness",
    # temporal
    "GroupProfile", "RnnAutoencoder", "RnnConfig", "build_profiles",
    "fine_tune_short_term", "new_autoencoder", "predict_next",
    "serving_embedding", "train_snapshot_sequence",
    # index
    "IndexConfig", "UgIndex", "build_index", "load_index", "query_knn",
    "batch_query", "save_index",
    # pipeline
    "Engine", "EngineConfig", "evaluate", "load_engine", "parse_config",
    "recommend_groups", "recommend_items", "recommend_stream",
    "run_training", "save_engine",
]
