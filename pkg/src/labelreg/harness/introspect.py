"""Bottleneck nearest-neighbour search over label regions.

A region is one spatial cell of the autoencoder bottleneck. Its feature is
the channel vector at that cell, either from the encoder applied to the
ground truth (``encoder_gt``) or from a CNN's aux head (``cnn_predicted``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autoencoder import LabelAutoencoder, one_hot_labels
from ..core import Tensor, conv2d
from ..data import VOID_ID, SegDataset
from ..errors import ConfigError, DataError
from ..regularizer import AUX_PREFIX, RegularizedModel

ORIGINS = ("encoder_gt", "cnn_predicted")


@dataclass(frozen=True)
class RegionFeature:
    sample: int
    cell: tuple[int, int]
    vector: np.ndarray
    origin: str
    # most frequent non-void label inside the cell's footprint (-1 if all void)
    dominant: int

    @property
    def source(self) -> tuple[int, int, int]:
        return (self.sample, *self.cell)


def dominant_classes(labels: np.ndarray, grid: tuple[int, int], num_classes: int) -> np.ndarray:
    """(n, gh, gw) majority label per footprint; ties go to the lower id."""
    n, h, w = labels.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise ConfigError(f"label size {(h, w)} not divisible by bottleneck grid {grid}")
    blocks = labels.reshape(n, gh, h // gh, gw, w // gw).transpose(0, 1, 3, 2, 4).reshape(n, gh, gw, -1)
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(num_classes)], axis=-1)
    dom = counts.argmax(axis=-1)
    dom[counts.sum(axis=-1) == 0] = -1
    return dom


def _bottleneck_codes(source, dataset: SegDataset, origin: str, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        if origin == "encoder_gt":
            onehot = one_hot_labels(dataset.labels[sl], source.config.num_classes, VOID_ID)
            z, _ = source.encode(Tensor(onehot.astype(source.params.dtype)))
        else:
            pen = source.seg.forward(Tensor(dataset.images[sl].astype(source.params.dtype)), source.params).penultimate
            z = conv2d(pen, source.params[f"{AUX_PREFIX}weight"], source.params[f"{AUX_PREFIX}bias"])
        out.append(z.data)
    return np.concatenate(out)


def extract_region_features(source: LabelAutoencoder | RegularizedModel, dataset: SegDataset,
                            origin: str = "encoder_gt", batch_size: int = 32) -> list[RegionFeature]:
    if origin not in ORIGINS:
        raise ConfigError(f"unknown feature origin {origin!r}; choose from {ORIGINS}")
    if origin == "encoder_gt" and not isinstance(source, LabelAutoencoder):
        raise ConfigError("encoder_gt features need a label autoencoder")
    if origin == "cnn_predicted" and not (isinstance(source, RegularizedModel)
                                          and source.scheme.variant == "decoder_aux"):
        raise ConfigError("cnn_predicted features need a segnet with its decoder_aux head attached")
    codes = _bottleneck_codes(source, dataset, origin, batch_size)
    n, c, gh, gw = codes.shape
    dom = dominant_classes(dataset.labels, (gh, gw), dataset.num_classes)
    feats = []
    for s in range(n):
        for i in range(gh):
            for j in range(gw):
                feats.append(RegionFeature(s, (i, j), codes[s, :, i, j].copy(), origin, int(dom[s, i, j])))
    return feats


@dataclass(frozen=True)
class Match:
    feature: RegionFeature
    distance: float


def nn_query(query: RegionFeature, db: list[RegionFeature], k: int = 1, exclude: str = "none") -> list[Match]:
    """Exact Euclidean top-k.

    ``exclude``: "none", "cell" (drop the query's own region) or "sample"
    (drop every region of the query's sample). Equal distances are ordered by
    (sample, row, col).
    """
    if not db:
        raise DataError("nearest-neighbour database is empty")
    if exclude not in ("none", "cell", "sample"):
        raise ConfigError(f"unknown exclusion rule {exclude!r}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    dims = {f.vector.shape for f in db}
    if len(dims) != 1 or query.vector.shape not in dims:
        raise ConfigError("query and database features must share one dimensionality")
    if any(f.origin != query.origin for f in db):
        raise ConfigError("query and database features must share one origin")
    keep = [f for f in db if not (
        (exclude == "cell" and f.source == query.source) or (exclude == "sample" and f.sample == query.sample))]
    if not keep:
        raise DataError("every database entry was excluded")
    mat = np.stack([f.vector for f in keep]).astype(np.float64)
    d = np.sqrt(((mat - query.vector.astype(np.float64)) ** 2).sum(axis=1))
    keys = np.array([f.source for f in keep])
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], d))
    return [Match(keep[i], float(d[i])) for i in order[:k]]


def match_rate(features: list[RegionFeature], queries: int = 100, rng: np.random.Generator | int = 0,
               exclude: str = "sample", background: int = 0):
    """Fraction of random class-bearing queries whose top-1 neighbour has the same dominant class.

    Returns (rate, list of (query, match)).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pool = [f for f in features if f.dominant not in (-1, background)]
    if not pool:
        raise DataError("no class-bearing regions to query")
    picks = rng.choice(len(pool), size=min(queries, len(pool)), replace=False)
    pairs = []
    for i in picks:
        q = pool[int(i)]
        pairs.append((q, nn_query(q, features, 1, exclude)[0]))
    hits = sum(1 for q, m in pairs if m.feature.dominant == q.dominant)
    return hits / len(pairs), pairs
