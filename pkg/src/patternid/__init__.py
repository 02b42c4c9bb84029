"""Pose-invariant re-identification of individuals by their unique markings.

Train an embedding network with a triplet loss and online mining on a
synthetic marking corpus, match queries with exact nearest-neighbor search
over an embedding database, and evaluate with pair-verification and top-k
protocols.
"""

from patternid.corpus import (
    CorpusConfig,
    DatasetManifest,
    SpotPattern,
    build_dataset,
    generate_individual,
    load_manifest,
    render_view,
    split_by_individual,
)
from patternid.database import EmbeddingDatabase, build_database, knn_query, load_db, save_db
from patternid.estimators import NearestIndividual, TripletEmbedder
from patternid.net import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from patternid.train import TrainConfig, run_crossval, train
from patternid.warps import RenderParams, sample_view_params

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig",
    "DatasetManifest",
    "EmbeddingDatabase",
    "ModelConfig",
    "NearestIndividual",
    "RenderParams",
    "SpotPattern",
    "TrainConfig",
    "TripletEmbedder",
    "build_database",
    "build_dataset",
    "forward",
    "generate_individual",
    "init_params",
    "knn_query",
    "load_checkpoint",
    "load_db",
    "load_manifest",
    "render_view",
    "run_crossval",
    "sample_view_params",
    "save_checkpoint",
    "save_db",
    "split_by_individual",
    "train",
]
