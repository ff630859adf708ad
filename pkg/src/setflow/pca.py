"""PCA reduction of instance embeddings, fitted on pooled training instances."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import BagDataset, EmbeddingBag, Instance


@dataclass
class PcaModel:
    mean: np.ndarray              # [D]
    components: np.ndarray        # [D, d], orthonormal columns
    explained_variance: np.ndarray  # [d], non-increasing
    standardize: bool = False

    @property
    def source_dim(self):
        return self.components.shape[0]

    @property
    def target_dim(self):
        return self.components.shape[1]


def fit_pca(x, d, standardize=False):
    """Top-d principal directions of the rows of x, via SVD of centered data.

    Components are sign-fixed so each one's largest-magnitude entry is
    positive; explained variances use the 1/(N-1) convention.
    """
    x = np.asarray(x, dtype=np.float64)
    n, big_d = x.shape
    if n < 2:
        raise ValueError(f"fit_pca: need at least 2 rows, got {n}")
    if not (1 <= d <= min(n - 1, big_d)):
        raise ValueError(f"fit_pca: d={d} outside [1, {min(n - 1, big_d)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    if not (centered ** 2).sum() > 0:
        raise ValueError("fit_pca: data has zero variance")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:d].T.copy()
    explained = (s[:d] ** 2) / (n - 1)
    for j in range(d):
        k = int(np.argmax(np.abs(components[:, j])))
        if components[k, j] < 0:
            components[:, j] = -components[:, j]
    return PcaModel(mean, components, explained, standardize=standardize)


def transform(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.source_dim:
        raise ValueError(f"transform: dim {x.shape[1]} != model {model.source_dim}")
    z = (x - model.mean) @ model.components
    if model.standardize:
        scale = np.sqrt(np.where(model.explained_variance > 0,
                                 model.explained_variance, 1.0))
        z = z / scale
    return z


def inverse_transform(model, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] != model.target_dim:
        raise ValueError(f"inverse_transform: dim {z.shape[1]} != model {model.target_dim}")
    if model.standardize:
        scale = np.sqrt(np.where(model.explained_variance > 0,
                                 model.explained_variance, 1.0))
        z = z * scale
    return z @ model.components.T + model.mean


def transform_dataset(model, ds):
    """Apply the reduction to every instance, keeping bag structure intact."""
    bags = []
    for bag in ds.bags:
        vecs = transform(model, np.stack([i.vector for i in bag.instances]))
        bags.append(EmbeddingBag(
            [Instance(vecs[j], inst.stream) for j, inst in enumerate(bag.instances)],
            bag.label,
        ))
    meta = dict(ds.meta)
    meta["pca_dim"] = model.target_dim
    return BagDataset(bags, dim=model.target_dim, split=ds.split, meta=meta)


def save_pca(model, path):
    doc = {
        "mean": model.mean.tolist(),
        "components_shape": list(model.components.shape),
        "components": model.components.ravel().tolist(),
        "explained_variance": model.explained_variance.tolist(),
        "standardize": model.standardize,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_pca(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    shape = tuple(doc["components_shape"])
    return PcaModel(
        np.asarray(doc["mean"], dtype=np.float64),
        np.asarray(doc["components"], dtype=np.float64).reshape(shape),
        np.asarray(doc["explained_variance"], dtype=np.float64),
        standardize=bool(doc.get("standardize", False)),
    )
