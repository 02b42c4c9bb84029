"""Scikit-learn style estimators wrapping the embedding trainer and matcher.

TripletEmbedder is a transformer: fit on labelled gray images, transform
images to embedding vectors. NearestIndividual is a classifier over
embedding vectors backed by the same exact kNN scan as the database.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from patternid.errors import DataError
from patternid import net
from patternid.database import ranked_distances
from patternid.mining import BatchSpec, MiningConfig
from patternid.train import TrainConfig, fit_images
from patternid.validation import check_embedding_matrix, check_image_stack, check_labels


class TripletEmbedder(BaseEstimator, TransformerMixin):
    """Learn a marking embedding with a triplet (or contrastive) loss.

    Parameters mirror the training configuration; see TrainConfig. The
    estimator keeps the sklearn contract: constructor only stores arguments,
    fit(X, y) learns `params_`, transform(X) maps images to embeddings.
    """

    def __init__(
        self,
        conv_channels=(16, 32, 64, 128),
        embedding_dim=256,
        l2_normalize=False,
        loss="triplet",
        mining="semi_hard",
        margin=0.2,
        include_hard_negatives=True,
        negative_term="anchor",
        contrastive_margin=1.0,
        batch_classes=15,
        batch_images=5,
        steps=2000,
        learning_rate=1e-5,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        augmentation="extensive",
        eval_every=None,
        random_state=0,
    ):
        self.conv_channels = conv_channels
        self.embedding_dim = embedding_dim
        self.l2_normalize = l2_normalize
        self.loss = loss
        self.mining = mining
        self.margin = margin
        self.include_hard_negatives = include_hard_negatives
        self.negative_term = negative_term
        self.contrastive_margin = contrastive_margin
        self.batch_classes = batch_classes
        self.batch_images = batch_images
        self.steps = steps
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.augmentation = augmentation
        self.eval_every = eval_every
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        eval_every = self.eval_every if self.eval_every is not None else min(500, self.steps)
        return TrainConfig(
            steps=self.steps,
            seed=self.random_state,
            batch=BatchSpec(p=self.batch_classes, k=self.batch_images),
            mining=MiningConfig(
                strategy=self.mining,
                margin=self.margin,
                include_hard_negatives=self.include_hard_negatives,
                negative_term=self.negative_term,
            ),
            model=net.ModelConfig(
                conv_channels=tuple(self.conv_channels),
                embedding_dim=self.embedding_dim,
                l2_normalize=self.l2_normalize,
            ),
            loss=self.loss,
            contrastive_margin=self.contrastive_margin,
            augmentation=self.augmentation,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            eval_every=eval_every,
        )

    def fit(self, X, y):
        """Train the embedding network on labelled images."""
        pixels = check_image_stack(X)
        labels = check_labels(y, pixels.shape[0])
        images: dict[str, list[str]] = {}
        row_of: dict[tuple[str, str], int] = {}
        for row, iid in enumerate(labels):
            key = f"r{row:06d}"
            images.setdefault(iid, []).append(key)
            row_of[(iid, key)] = row

        config = self._train_config()
        result = fit_images(pixels, images, row_of, config)
        self.params_ = result.params
        self.model_config_ = config.model
        self.train_log_ = result.log
        self.classes_ = np.asarray(sorted(images))
        return self

    def transform(self, X) -> np.ndarray:
        """Map images to embedding vectors."""
        self._check_fitted()
        pixels = check_image_stack(X)
        return net.embed_pixels(self.params_, self.model_config_, pixels)

    def save(self, path: Path) -> None:
        self._check_fitted()
        net.save_checkpoint(self.params_, self.model_config_, path)

    @classmethod
    def from_checkpoint(cls, path: Path) -> "TripletEmbedder":
        params, config = net.load_checkpoint(path)
        est = cls(
            conv_channels=config.conv_channels,
            embedding_dim=config.embedding_dim,
            l2_normalize=config.l2_normalize,
        )
        est.params_ = params
        est.model_config_ = config
        est.classes_ = np.asarray([])
        return est

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise DataError("TripletEmbedder is not fitted; call fit or from_checkpoint")


class NearestIndividual(BaseEstimator):
    """Exact nearest-neighbor identity matcher over embedding vectors."""

    def __init__(self, n_neighbors=10):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        matrix = check_embedding_matrix(X)
        labels = check_labels(y, matrix.shape[0])
        self.vectors_ = matrix
        self.labels_ = np.asarray(labels)
        self.classes_ = np.asarray(sorted(set(labels)))
        return self

    def kneighbors(self, X, n_neighbors: int | None = None):
        """Distances and record indices of the nearest stored vectors."""
        self._check_fitted()
        queries = check_embedding_matrix(X, self.vectors_.shape[1])
        k = min(n_neighbors or self.n_neighbors, len(self.vectors_))
        dists = np.empty((len(queries), k))
        idx = np.empty((len(queries), k), dtype=np.int64)
        for row, q in enumerate(queries):
            d, order = ranked_distances(self.vectors_, q)
            idx[row] = order[:k]
            dists[row] = d[idx[row]]
        return dists, idx

    def predict(self, X) -> np.ndarray:
        """Identity of the single nearest record per query."""
        _, idx = self.kneighbors(X, n_neighbors=1)
        return self.labels_[idx[:, 0]]

    def score(self, X, y) -> float:
        labels = check_labels(y, np.asarray(X).shape[0])
        return float(np.mean(self.predict(X) == np.asarray(labels)))

    def _check_fitted(self) -> None:
        if not hasattr(self, "vectors_"):
            raise DataError("NearestIndividual is not fitted")
