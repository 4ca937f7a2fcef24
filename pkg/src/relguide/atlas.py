"""Similar-case retrieval over hidden activations.

An atlas index stores the flattened inference-mode activation of every
reference sample at one trace position. Queries run exhaustive exact
nearest-neighbor search (atlas sizes here are small), and the label
homogeneity among the returned neighbors serves as a credibility value for
a prediction. Retrieved pairs can be explained with the joint relevance
decomposition from :mod:`relguide.bilrp`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bilrp import JointRelevance, bilrp
from .errors import FormatError
from .lrp import LRPRuleConfig
from .network import Model, forward_inference

ATLAS_MAGIC = b"RGTA"
ATLAS_VERSION = 1
METRICS = ("euclidean", "cosine")


@dataclass
class AtlasIndex:
    layer_index: int
    vectors: np.ndarray  # (N, dim) float32
    ids: np.ndarray  # (N,) uint32
    labels: np.ndarray  # (N,) uint8
    metric: str = "euclidean"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        n = self.vectors.shape[0]
        if len(self.ids) != n or len(self.labels) != n:
            raise ValueError("vector/id/label counts differ")

    def __len__(self):
        return self.vectors.shape[0]


def build_index(model: Model, samples, layer_indices, metric="euclidean") -> list:
    """One index per requested trace position; vectors are inference-mode
    activations (dropout off)."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot build an index from an empty sample set")
    per_layer = {li: [] for li in layer_indices}
    ids = []
    labels = []
    for s in samples:
        _, acts, _ = forward_inference(model, s.image)
        for li in layer_indices:
            if not 0 <= li < len(acts):
                raise IndexError(f"layer index {li} out of range (0..{len(acts) - 1})")
            per_layer[li].append(acts[li].reshape(-1).astype(np.float32))
        ids.append(s.sample_id)
        labels.append(s.label)
    ids = np.asarray(ids, dtype=np.uint32)
    labels = np.asarray(labels, dtype=np.uint8)
    return [
        AtlasIndex(li, np.stack(per_layer[li]), ids.copy(), labels.copy(), metric)
        for li in layer_indices
    ]


def _distances(index: AtlasIndex, q: np.ndarray) -> np.ndarray:
    v = index.vectors.astype(np.float64)
    q = q.astype(np.float64)
    if index.metric == "euclidean":
        return np.sqrt(((v - q[None, :]) ** 2).sum(axis=1))
    # cosine distance as 0.5*|u_v - u_q|^2 == 1 - cos: exactly 0 for
    # identical vectors, symmetric, never negative
    qn = np.sqrt((q**2).sum())
    vn = np.sqrt((v**2).sum(axis=1))
    uq = q / qn if qn > 0 else q
    uv = v / np.where(vn > 0, vn, 1)[:, None]
    d = 0.5 * ((uv - uq[None, :]) ** 2).sum(axis=1)
    if qn == 0:
        # a zero vector has no direction: identical to another zero, else 1
        d = np.where(vn == 0, 0.0, 1.0)
    else:
        d = np.where(vn > 0, d, 1.0)
    return d


def query_knn_vector(index: AtlasIndex, q: np.ndarray, k: int) -> list:
    """Exact k nearest neighbors of a raw embedding vector, as
    (sample_id, distance, label) ascending by distance, ties broken by
    smaller sample id."""
    n = len(index)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    q = np.asarray(q).reshape(-1)
    if q.shape[0] != index.vectors.shape[1]:
        raise ValueError(
            f"query embedding length {q.shape[0]} does not match index {index.vectors.shape[1]}"
        )
    d = _distances(index, q)
    order = np.lexsort((index.ids, d))[:k]
    return [(int(index.ids[i]), float(d[i]), int(index.labels[i])) for i in order]


def query_knn(index: AtlasIndex, x: np.ndarray, model: Model, k: int) -> list:
    """k nearest atlas samples to an input, embedded at the index's layer."""
    _, acts, _ = forward_inference(model, x)
    return query_knn_vector(index, acts[index.layer_index], k)


def credibility(neighbors, predicted_label: int) -> float:
    """Fraction of neighbors whose label matches the prediction."""
    if not neighbors:
        raise ValueError("credibility needs at least one neighbor")
    agree = sum(1 for _, _, label in neighbors if label == predicted_label)
    return agree / len(neighbors)


def explain_pair(
    model: Model,
    x: np.ndarray,
    atlas_sample,
    layer_index: int,
    rules: Optional[LRPRuleConfig] = None,
    grid: int = 8,
    query_id: int = -1,
    **bilrp_kw,
) -> JointRelevance:
    """Joint relevance between a query and one retrieved atlas sample."""
    return bilrp(
        model,
        x,
        atlas_sample.image,
        layer_index,
        rules=rules,
        grid=grid,
        pair=(query_id, atlas_sample.sample_id),
        **bilrp_kw,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_index(index: AtlasIndex, path) -> None:
    n, dim = index.vectors.shape
    with open(path, "wb") as f:
        f.write(ATLAS_MAGIC)
        f.write(
            struct.pack(
                "<IIBII",
                ATLAS_VERSION,
                index.layer_index,
                METRICS.index(index.metric),
                n,
                dim,
            )
        )
        f.write(np.ascontiguousarray(index.ids, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(index.labels, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated atlas file while reading {what}")
    return buf


def load_index(path) -> AtlasIndex:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != ATLAS_MAGIC:
            raise FormatError("bad magic: not an atlas index file")
        version, layer, metric_code, n, dim = struct.unpack(
            "<IIBII", _read_exact(f, 17, "header")
        )
        if version != ATLAS_VERSION:
            raise FormatError(f"unsupported atlas file version {version}")
        if metric_code >= len(METRICS):
            raise FormatError(f"unknown metric code {metric_code}")
        ids = np.frombuffer(_read_exact(f, 4 * n, "ids"), dtype="<u4").copy()
        labels = np.frombuffer(_read_exact(f, n, "labels"), dtype="u1").copy()
        vectors = (
            np.frombuffer(_read_exact(f, 4 * n * dim, "vectors"), dtype="<f4")
            .reshape(n, dim)
            .copy()
        )
        if f.read(1):
            raise FormatError("trailing bytes after atlas payload")
    return AtlasIndex(int(layer), vectors, ids, labels, METRICS[metric_code])
