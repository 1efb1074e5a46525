"""Incremental speaker clustering over per-video embedding vectors.

Labels a corpus of videos by speaker without any identity supervision, in
four stages over unit-norm embeddings:

1. ``assign`` — stream videos into clusters: join the most similar cluster
   when cosine similarity clears ``t1`` (updating its centroid by momentum
   EMA), otherwise open a new cluster;
2. ``verify_split`` — break clusters whose members don't all look like the
   same person: connected components of the member graph with edges at
   similarity ``t2``;
3. ``identify_merge`` — fuse clusters of the same person: components of the
   cluster graph with edges at similarity ``t3``, iterated to a fixpoint;
4. ``boundary_candidates`` — report cluster pairs in the ambiguous band
   ``[t4, t3)`` for manual inspection; nothing is merged automatically.

The embedding extractor itself is upstream: this module ingests vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ContractError, DataError, FormatError

DEFAULT_EMBEDDING_DIM = 512
_ZERO_NORM = 1e-12


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


def unit_normalize(vector: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere; zero vectors carry no direction."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise DataError(f"embedding must be a vector, got shape {v.shape}")
    norm = float(np.linalg.norm(v))
    if norm < _ZERO_NORM:
        raise DataError("zero embedding vector cannot be normalized")
    return v / norm


@dataclass(frozen=True)
class VideoEmbedding:
    """One video's speaker representation on the unit sphere."""

    video_id: str
    vector: np.ndarray

    @classmethod
    def ingest(cls, video_id: str, vector: np.ndarray) -> "VideoEmbedding":
        if not video_id:
            raise DataError("video_id must be non-empty")
        return cls(video_id=str(video_id), vector=unit_normalize(vector))


@dataclass
class Cluster:
    """A hypothesized speaker: unit centroid plus its member video ids."""

    cluster_id: int
    centroid: np.ndarray
    members: list

    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Thresholds:
    """Cosine cutoffs for the four stages plus the centroid EMA momentum."""

    t1: float = 0.41
    t2: float = 0.63
    t3: float = 0.63
    t4: float = 0.59
    m: float = 0.9

    def __post_init__(self) -> None:
        for name in ("t1", "t2", "t3", "t4"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0):
                raise ContractError(f"threshold {name}={v} outside [-1, 1]")
        if not (0.0 <= self.m <= 1.0):
            raise ContractError(f"momentum m={self.m} outside [0, 1]")
        if self.t4 >= self.t3:
            raise ContractError(
                f"boundary threshold t4={self.t4} must be below merge threshold t3={self.t3}"
            )


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------


def _check_unit(embeddings: Sequence[VideoEmbedding]) -> None:
    for e in embeddings:
        norm = float(np.linalg.norm(e.vector))
        if abs(norm - 1.0) > 1e-6:
            raise DataError(f"embedding {e.video_id!r} has norm {norm}, expected 1")


def _vector_map(embeddings: Sequence[VideoEmbedding]) -> dict:
    vectors: dict = {}
    for e in embeddings:
        if e.video_id in vectors:
            raise DataError(f"duplicate video_id {e.video_id!r}")
        vectors[e.video_id] = e.vector
    return vectors


def _member_mean(vectors: Mapping, members: Sequence) -> np.ndarray:
    mean = np.mean([vectors[v] for v in members], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < _ZERO_NORM:
        # perfectly cancelling members; keep an arbitrary-but-deterministic one
        return np.array(vectors[members[0]], dtype=np.float64)
    return mean / norm


def _components(n: int, edges: np.ndarray) -> list:
    """Connected components as lists of node indices, ordered by first node."""
    graph = csr_matrix((np.ones(len(edges), dtype=np.int8), (edges[:, 0], edges[:, 1])), shape=(n, n)) if len(edges) else csr_matrix((n, n), dtype=np.int8)
    _, labels = connected_components(graph, directed=False)
    groups: dict = {}
    for node in range(n):
        groups.setdefault(labels[node], []).append(node)
    return [groups[k] for k in sorted(groups, key=lambda k: groups[k][0])]


def _renumber(clusters: Iterable[Cluster]) -> list:
    return [
        Cluster(cluster_id=i, centroid=c.centroid, members=list(c.members))
        for i, c in enumerate(clusters)
    ]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def assign(embeddings: Sequence[VideoEmbedding], t1: float, m: float) -> list:
    """Stage 2: stream videos into clusters in input order.

    A video joins the cluster of highest centroid similarity when that
    similarity reaches ``t1``; the winning centroid moves by
    ``normalize(m * centroid + (1 - m) * vector)``.  Otherwise the video
    founds a new cluster whose centroid is its own vector.
    """
    _check_unit(embeddings)
    clusters: list = []
    centroids: list = []  # stacked view for vectorized similarity
    for e in embeddings:
        if clusters:
            sims = np.asarray(centroids) @ e.vector
            best = int(np.argmax(sims))
            if sims[best] >= t1:
                c = clusters[best]
                c.members.append(e.video_id)
                blended = m * c.centroid + (1.0 - m) * e.vector
                norm = float(np.linalg.norm(blended))
                if norm >= _ZERO_NORM:
                    c.centroid = blended / norm
                centroids[best] = c.centroid
                continue
        clusters.append(
            Cluster(cluster_id=len(clusters), centroid=e.vector.copy(), members=[e.video_id])
        )
        centroids.append(clusters[-1].centroid)
    return clusters


def verify_split(cluster: Cluster, vectors: Mapping, t2: float) -> list:
    """Stage 3: split one cluster into its same-person components.

    Members stay together exactly when they are connected through pairwise
    similarities of at least ``t2``; each component becomes a cluster with
    centroid recomputed as the normalized member mean.
    """
    members = list(cluster.members)
    if len(members) <= 1:
        return [Cluster(cluster_id=cluster.cluster_id, centroid=cluster.centroid.copy(), members=members)]
    mat = np.stack([vectors[v] for v in members])
    sims = mat @ mat.T
    ii, jj = np.nonzero(np.triu(sims >= t2, k=1))
    parts = _components(len(members), np.stack([ii, jj], axis=1) if len(ii) else np.empty((0, 2), dtype=np.int64))
    out = []
    for part in parts:
        group = [members[i] for i in part]
        out.append(Cluster(cluster_id=0, centroid=_member_mean(vectors, group), members=group))
    return out


def split_all(clusters: Sequence[Cluster], vectors: Mapping, t2: float) -> list:
    """verify_split over every cluster, renumbered in stable order."""
    out: list = []
    for c in clusters:
        out.extend(verify_split(c, vectors, t2))
    return _renumber(out)


def identify_merge(clusters: Sequence[Cluster], vectors: Mapping, t3: float) -> list:
    """Stage 4: merge clusters that look like the same person.

    Cluster features are normalized member means; clusters connected through
    pairwise feature similarity of at least ``t3`` merge into one.  Repeats
    until no pair qualifies, so the result is a fixpoint and independent of
    input order.
    """
    current = [Cluster(cluster_id=0, centroid=_member_mean(vectors, c.members), members=list(c.members)) for c in clusters]
    while len(current) > 1:
        feats = np.stack([c.centroid for c in current])
        sims = feats @ feats.T
        ii, jj = np.nonzero(np.triu(sims >= t3, k=1))
        if len(ii) == 0:
            break
        parts = _components(len(current), np.stack([ii, jj], axis=1))
        merged = []
        for part in parts:
            members: list = []
            for i in part:
                members.extend(current[i].members)
            merged.append(Cluster(cluster_id=0, centroid=_member_mean(vectors, members), members=members))
        if len(merged) == len(current):
            break
        current = merged
    return _renumber(current)


def boundary_candidates(clusters: Sequence[Cluster], t4: float, t3: float) -> list:
    """Stage 5: cluster pairs in the ambiguous band, for human review.

    Returns (cluster_id_a, cluster_id_b, similarity) triples with
    ``t4 <= similarity < t3``, each unordered pair once, most similar first.
    """
    if t4 >= t3:
        raise ContractError(f"boundary threshold t4={t4} must be below merge threshold t3={t3}")
    if len(clusters) < 2:
        return []
    feats = np.stack([c.centroid for c in clusters])
    sims = feats @ feats.T
    out = []
    for i in range(len(clusters)):
        for j in range(i + 1, len(clusters)):
            s = float(sims[i, j])
            if t4 <= s < t3:
                out.append((clusters[i].cluster_id, clusters[j].cluster_id, s))
    out.sort(key=lambda triple: (-triple[2], triple[0], triple[1]))
    return out


def run_pipeline(embeddings: Sequence[VideoEmbedding], thresholds: Thresholds = Thresholds()) -> tuple:
    """All four stages; returns (clusters, report).

    The report carries per-stage cluster counts, the video → cluster
    partition, and the boundary candidate list.
    """
    vectors = _vector_map(embeddings)
    assigned = assign(embeddings, thresholds.t1, thresholds.m)
    split = split_all(assigned, vectors, thresholds.t2)
    merged = identify_merge(split, vectors, thresholds.t3)
    candidates = boundary_candidates(merged, thresholds.t4, thresholds.t3)
    check_partition(merged, [e.video_id for e in embeddings])
    report = {
        "videos": len(embeddings),
        "clusters_after_assign": len(assigned),
        "clusters_after_split": len(split),
        "clusters_after_merge": len(merged),
        "candidates": [list(c) for c in candidates],
        "partition": partition_of(merged),
    }
    return merged, report


# ---------------------------------------------------------------------------
# partition utilities
# ---------------------------------------------------------------------------


def partition_of(clusters: Sequence[Cluster]) -> dict:
    """video_id -> cluster_id mapping."""
    out: dict = {}
    for c in clusters:
        for v in c.members:
            out[v] = c.cluster_id
    return out


def check_partition(clusters: Sequence[Cluster], video_ids: Sequence[str]) -> None:
    """Every input id in exactly one non-empty cluster, or DataError."""
    seen: set = set()
    for c in clusters:
        if not c.members:
            raise DataError(f"cluster {c.cluster_id} has no members")
        for v in c.members:
            if v in seen:
                raise DataError(f"video {v!r} appears in more than one cluster")
            seen.add(v)
    expected = set(video_ids)
    if seen != expected:
        missing = sorted(expected - seen)[:5]
        extra = sorted(seen - expected)[:5]
        raise DataError(f"partition mismatch: missing {missing}, unexpected {extra}")


def adjusted_rand_index(labels_a: Sequence, labels_b: Sequence) -> float:
    """Chance-corrected agreement between two labelings of the same items."""
    if len(labels_a) != len(labels_b):
        raise ContractError("labelings must cover the same items")
    n = len(labels_a)
    if n == 0:
        return 1.0
    ids_a = {v: i for i, v in enumerate(dict.fromkeys(labels_a))}
    ids_b = {v: i for i, v in enumerate(dict.fromkeys(labels_b))}
    table = np.zeros((len(ids_a), len(ids_b)), dtype=np.int64)
    for a, b in zip(labels_a, labels_b):
        table[ids_a[a], ids_b[b]] += 1

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = int(np.sum(comb2(table)))
    sum_rows = int(np.sum(comb2(table.sum(axis=1))))
    sum_cols = int(np.sum(comb2(table.sum(axis=0))))
    total = comb2(n)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# file interfaces
# ---------------------------------------------------------------------------


def load_embedding_dir(directory) -> list:
    """Read index.tsv + embeddings.f32 + meta.json into VideoEmbeddings.

    ``embeddings.f32`` is a raw little-endian float32 row-major matrix whose
    shape lives in ``meta.json`` as {"rows": R, "dim": D}; ``index.tsv``
    gives the video_id of each row, one per line.
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    index_path = directory / "index.tsv"
    data_path = directory / "embeddings.f32"
    for p in (meta_path, index_path, data_path):
        if not p.exists():
            raise DataError(f"missing embedding file {p}")
    try:
        meta = json.loads(meta_path.read_text())
        rows, dim = int(meta["rows"]), int(meta["dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad meta.json: {exc}") from None
    if rows < 0 or dim < 1:
        raise FormatError(f"bad embedding shape {rows}x{dim}")
    ids = [line.strip() for line in index_path.read_text().splitlines() if line.strip()]
    if len(ids) != rows:
        raise FormatError(f"index.tsv has {len(ids)} ids but meta declares {rows} rows")
    raw = data_path.read_bytes()
    expected = rows * dim * 4
    if len(raw) != expected:
        raise FormatError(f"embeddings.f32 has {len(raw)} bytes, expected {expected}")
    mat = np.frombuffer(raw, dtype="<f4").reshape(rows, dim)
    return [VideoEmbedding.ingest(vid, mat[i]) for i, vid in enumerate(ids)]


def save_embedding_dir(directory, embeddings: Sequence[VideoEmbedding]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if embeddings:
        dims = {e.vector.shape[0] for e in embeddings}
        if len(dims) != 1:
            raise DataError(f"mixed embedding dims {sorted(dims)}")
        dim = dims.pop()
        mat = np.stack([e.vector for e in embeddings]).astype("<f4")
    else:
        dim = DEFAULT_EMBEDDING_DIM
        mat = np.zeros((0, dim), dtype="<f4")
    (directory / "meta.json").write_text(json.dumps({"rows": len(embeddings), "dim": int(dim)}))
    (directory / "index.tsv").write_text("".join(e.video_id + "\n" for e in embeddings))
    (directory / "embeddings.f32").write_bytes(mat.tobytes())


def write_pipeline_outputs(directory, clusters: Sequence[Cluster], report: dict) -> None:
    """partition.tsv + candidates.tsv + report.json under one directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    partition = partition_of(clusters)
    lines = [f"{vid}\t{cid}\n" for vid, cid in partition.items()]
    (directory / "partition.tsv").write_text("".join(lines))
    cand_lines = [f"{a}\t{b}\t{s:.6f}\n" for a, b, s in report.get("candidates", [])]
    (directory / "candidates.tsv").write_text("".join(cand_lines))
    serializable = {k: v for k, v in report.items() if k != "partition"}
    serializable["partition_size"] = len(partition)
    (directory / "report.json").write_text(json.dumps(serializable, indent=2, sort_keys=True) + "\n")
