"""Incremental speaker-clustering stages against planted-partition oracles."""

import json

import numpy as np
import pytest

from oracles import adjusted_rand_index as ari_oracle
from padapt.cluster import (
    Cluster,
    Thresholds,
    VideoEmbedding,
    adjusted_rand_index,
    assign,
    boundary_candidates,
    check_partition,
    identify_merge,
    load_embedding_dir,
    partition_of,
    run_pipeline,
    save_embedding_dir,
    split_all,
    unit_normalize,
    verify_split,
    write_pipeline_outputs,
)
from padapt.errors import ContractError, DataError, FormatError


def planted(n_identities: int, per: int, dim: int = 16, noise: float = 0.05, seed: int = 0):
    """Unit embeddings tightly grouped around well-separated identity centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_identities, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    embeddings = []
    truth = []
    for k in range(n_identities):
        for i in range(per):
            v = centers[k] + noise * rng.normal(size=dim)
            embeddings.append(VideoEmbedding.ingest(f"spk{k}_clip{i}", v))
            truth.append(k)
    return embeddings, truth


def unit(*values) -> np.ndarray:
    return unit_normalize(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# ingest and thresholds
# ---------------------------------------------------------------------------


def test_ingest_normalizes_and_rejects_zero() -> None:
    e = VideoEmbedding.ingest("v", np.array([3.0, 4.0]))
    np.testing.assert_allclose(e.vector, [0.6, 0.8], atol=1e-12)
    with pytest.raises(DataError):
        VideoEmbedding.ingest("v", np.zeros(4))
    with pytest.raises(DataError):
        VideoEmbedding.ingest("", np.array([1.0, 0.0]))


def test_threshold_defaults_and_validation() -> None:
    t = Thresholds()
    assert (t.t1, t.t2, t.t3, t.t4, t.m) == (0.41, 0.63, 0.63, 0.59, 0.9)
    with pytest.raises(ContractError):
        Thresholds(t1=1.5)
    with pytest.raises(ContractError):
        Thresholds(m=-0.1)
    with pytest.raises(ContractError):
        Thresholds(t3=0.5, t4=0.6)  # boundary band must sit below merges


# ---------------------------------------------------------------------------
# stage 2: streaming assignment
# ---------------------------------------------------------------------------


def test_first_embedding_founds_a_cluster() -> None:
    e = VideoEmbedding.ingest("only", np.array([1.0, 0.0]))
    clusters = assign([e], t1=0.41, m=0.9)
    assert len(clusters) == 1
    assert clusters[0].members == ["only"]
    np.testing.assert_allclose(clusters[0].centroid, e.vector)


def test_orthogonal_embeddings_split_into_two_clusters() -> None:
    a = VideoEmbedding.ingest("a", np.array([1.0, 0.0]))
    b = VideoEmbedding.ingest("b", np.array([0.0, 1.0]))
    clusters = assign([a, b], t1=0.41, m=0.9)
    assert [c.members for c in clusters] == [["a"], ["b"]]


def test_full_momentum_pins_centroids() -> None:
    a = VideoEmbedding.ingest("a", np.array([1.0, 0.0]))
    b = VideoEmbedding.ingest("b", unit(1.0, 0.5))
    clusters = assign([a, b], t1=0.5, m=1.0)
    assert len(clusters) == 1
    assert clusters[0].members == ["a", "b"]
    np.testing.assert_allclose(clusters[0].centroid, [1.0, 0.0], atol=1e-12)


def test_ema_centroid_update_matches_formula() -> None:
    a = np.array([1.0, 0.0])
    b = unit(0.8, 0.6)
    clusters = assign(
        [VideoEmbedding.ingest("a", a), VideoEmbedding.ingest("b", b)], t1=0.5, m=0.9
    )
    expected = 0.9 * a + 0.1 * b
    expected /= np.linalg.norm(expected)
    np.testing.assert_allclose(clusters[0].centroid, expected, atol=1e-12)


def test_assign_joins_most_similar_cluster() -> None:
    ids = ["x", "y", "probe"]
    vecs = [unit(1.0, 0.0, 0.0), unit(0.0, 1.0, 0.0), unit(0.9, 0.1, 0.0)]
    clusters = assign([VideoEmbedding.ingest(i, v) for i, v in zip(ids, vecs)], t1=0.3, m=0.9)
    assert [c.members for c in clusters] == [["x", "probe"], ["y"]]


def test_assign_rejects_denormalized_input() -> None:
    bad = VideoEmbedding(video_id="v", vector=np.array([2.0, 0.0]))
    with pytest.raises(DataError):
        assign([bad], t1=0.41, m=0.9)


# ---------------------------------------------------------------------------
# stage 3: within-cluster verification
# ---------------------------------------------------------------------------


def test_coherent_cluster_survives_verification() -> None:
    embeddings, _ = planted(1, 6, noise=0.02)
    vectors = {e.video_id: e.vector for e in embeddings}
    cluster = Cluster(cluster_id=0, centroid=embeddings[0].vector, members=[e.video_id for e in embeddings])
    parts = verify_split(cluster, vectors, t2=0.63)
    assert len(parts) == 1
    assert parts[0].members == cluster.members


def test_mixed_cluster_splits_into_planted_identities() -> None:
    embeddings, truth = planted(2, 5, noise=0.03, seed=1)
    vectors = {e.video_id: e.vector for e in embeddings}
    cluster = Cluster(cluster_id=0, centroid=embeddings[0].vector, members=[e.video_id for e in embeddings])
    parts = verify_split(cluster, vectors, t2=0.63)
    assert len(parts) == 2
    got = {tuple(sorted(p.members)) for p in parts}
    want = {
        tuple(sorted(e.video_id for e, t in zip(embeddings, truth) if t == k)) for k in (0, 1)
    }
    assert got == want
    for p in parts:
        np.testing.assert_allclose(np.linalg.norm(p.centroid), 1.0, atol=1e-9)


def test_singleton_cluster_unchanged() -> None:
    v = unit(1.0, 2.0)
    cluster = Cluster(cluster_id=3, centroid=v, members=["solo"])
    parts = verify_split(cluster, {"solo": v}, t2=0.9)
    assert len(parts) == 1 and parts[0].members == ["solo"]


def test_split_never_merges() -> None:
    embeddings, _ = planted(3, 4, seed=2)
    vectors = {e.video_id: e.vector for e in embeddings}
    clusters = assign(embeddings, t1=0.41, m=0.9)
    split = split_all(clusters, vectors, t2=0.63)
    # every split cluster's members come from a single pre-split cluster
    origin = partition_of(clusters)
    for c in split:
        assert len({origin[v] for v in c.members}) == 1


# ---------------------------------------------------------------------------
# stage 4: cross-cluster merging
# ---------------------------------------------------------------------------


def test_distant_clusters_stay_apart() -> None:
    embeddings, _ = planted(3, 4, seed=3)
    vectors = {e.video_id: e.vector for e in embeddings}
    clusters = split_all(assign(embeddings, t1=0.41, m=0.9), vectors, t2=0.63)
    merged = identify_merge(clusters, vectors, t3=0.999)
    assert [c.members for c in merged] == [c.members for c in clusters]


def test_planted_split_identity_remerges() -> None:
    embeddings, _ = planted(1, 8, noise=0.03, seed=4)
    vectors = {e.video_id: e.vector for e in embeddings}
    half = len(embeddings) // 2
    a = Cluster(0, embeddings[0].vector, [e.video_id for e in embeddings[:half]])
    b = Cluster(1, embeddings[half].vector, [e.video_id for e in embeddings[half:]])
    merged = identify_merge([a, b], vectors, t3=0.63)
    assert len(merged) == 1
    assert sorted(merged[0].members) == sorted(e.video_id for e in embeddings)


def test_merge_partition_is_order_independent() -> None:
    embeddings, _ = planted(3, 5, noise=0.05, seed=5)
    vectors = {e.video_id: e.vector for e in embeddings}
    clusters = split_all(assign(embeddings, t1=0.41, m=0.9), vectors, t2=0.63)
    merged = identify_merge(clusters, vectors, t3=0.63)
    reversed_merged = identify_merge(list(reversed(clusters)), vectors, t3=0.63)
    want = {tuple(sorted(c.members)) for c in merged}
    got = {tuple(sorted(c.members)) for c in reversed_merged}
    assert want == got


def test_merge_never_splits() -> None:
    embeddings, _ = planted(2, 6, seed=6)
    vectors = {e.video_id: e.vector for e in embeddings}
    clusters = split_all(assign(embeddings, t1=0.41, m=0.9), vectors, t2=0.63)
    origin = partition_of(clusters)
    merged = identify_merge(clusters, vectors, t3=0.63)
    # pre-merge clusters map entirely into single merged clusters
    final = partition_of(merged)
    for c in clusters:
        assert len({final[v] for v in c.members}) == 1


def test_merge_chains_through_intermediate_clusters() -> None:
    # a~b and b~c qualify but a~c alone would not: components pull all three
    vectors = {
        "a": unit(1.0, 0.0),
        "b": unit(np.cos(0.4), np.sin(0.4)),
        "c": unit(np.cos(0.8), np.sin(0.8)),
    }
    clusters = [Cluster(i, vectors[k], [k]) for i, k in enumerate("abc")]
    t3 = np.cos(0.45)  # accepts 0.4-radian gaps, rejects 0.8
    merged = identify_merge(clusters, vectors, t3=t3)
    assert len(merged) == 1


# ---------------------------------------------------------------------------
# stage 5: boundary candidates
# ---------------------------------------------------------------------------


def test_no_pair_in_band_gives_empty_list() -> None:
    embeddings, _ = planted(2, 4, seed=7)
    vectors = {e.video_id: e.vector for e in embeddings}
    clusters = split_all(assign(embeddings, t1=0.41, m=0.9), vectors, t2=0.63)
    assert boundary_candidates(clusters, t4=0.59, t3=0.63) == []


def test_band_pair_is_reported_once_sorted() -> None:
    angle_ab = np.arccos(0.61)
    clusters = [
        Cluster(0, unit(1.0, 0.0), ["a"]),
        Cluster(1, unit(np.cos(angle_ab), np.sin(angle_ab)), ["b"]),
        Cluster(2, unit(-1.0, 0.0), ["c"]),
    ]
    got = boundary_candidates(clusters, t4=0.59, t3=0.63)
    assert len(got) == 1
    a, b, sim = got[0]
    assert (a, b) == (0, 1)
    assert sim == pytest.approx(0.61)


def test_candidates_sorted_by_descending_similarity() -> None:
    def at(angle):
        return unit(np.cos(angle), np.sin(angle))

    clusters = [
        Cluster(0, at(0.0), ["a"]),
        Cluster(1, at(np.arccos(0.60)), ["b"]),
        Cluster(2, at(-np.arccos(0.62)), ["c"]),
    ]
    got = boundary_candidates(clusters, t4=0.59, t3=0.63)
    sims = [s for _, _, s in got]
    assert sims == sorted(sims, reverse=True)
    pairs = {(a, b) for a, b, _ in got}
    assert all(a < b for a, b in pairs)
    assert len(pairs) == len(got)


def test_inverted_band_rejected() -> None:
    with pytest.raises(ContractError):
        boundary_candidates([], t4=0.7, t3=0.63)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def test_pipeline_recovers_planted_partition_exactly() -> None:
    embeddings, truth = planted(4, 10, noise=0.03, seed=8)
    clusters, report = run_pipeline(embeddings, Thresholds())
    partition = report["partition"]
    predicted = [partition[e.video_id] for e in embeddings]
    assert adjusted_rand_index(predicted, truth) == 1.0
    assert report["clusters_after_merge"] == 4
    check_partition(clusters, [e.video_id for e in embeddings])


def test_pipeline_single_noisy_identity_collapses_to_one() -> None:
    embeddings, _ = planted(1, 100, noise=0.08, seed=9)
    clusters, report = run_pipeline(embeddings, Thresholds())
    assert len(clusters) == 1
    assert report["clusters_after_merge"] == 1


def test_pipeline_empty_input() -> None:
    clusters, report = run_pipeline([], Thresholds())
    assert clusters == []
    assert report["videos"] == 0
    assert report["partition"] == {}


def test_pipeline_duplicate_ids_rejected() -> None:
    v = unit(1.0, 0.0)
    dup = [VideoEmbedding.ingest("same", v), VideoEmbedding.ingest("same", v)]
    with pytest.raises(DataError):
        run_pipeline(dup, Thresholds())


def test_partition_validity_after_every_stage() -> None:
    embeddings, _ = planted(3, 7, noise=0.1, seed=10)
    ids = [e.video_id for e in embeddings]
    vectors = {e.video_id: e.vector for e in embeddings}
    t = Thresholds()
    assigned = assign(embeddings, t.t1, t.m)
    check_partition(assigned, ids)
    split = split_all(assigned, vectors, t.t2)
    check_partition(split, ids)
    merged = identify_merge(split, vectors, t.t3)
    check_partition(merged, ids)


# ---------------------------------------------------------------------------
# agreement score
# ---------------------------------------------------------------------------


def test_ari_known_values() -> None:
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 2, 3]) == pytest.approx(0.0)
    assert adjusted_rand_index([], []) == 1.0


def test_ari_matches_independent_oracle() -> None:
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 4, size=n).tolist()
        b = rng.integers(0, 4, size=n).tolist()
        assert adjusted_rand_index(a, b) == pytest.approx(ari_oracle(a, b), abs=1e-12)


# ---------------------------------------------------------------------------
# file interfaces
# ---------------------------------------------------------------------------


def test_embedding_dir_round_trip(tmp_path) -> None:
    embeddings, _ = planted(2, 3, dim=8, seed=12)
    save_embedding_dir(tmp_path / "emb", embeddings)
    loaded = load_embedding_dir(tmp_path / "emb")
    assert [e.video_id for e in loaded] == [e.video_id for e in embeddings]
    for a, b in zip(loaded, embeddings):
        np.testing.assert_allclose(a.vector, b.vector, atol=1e-6)  # f32 storage


def test_embedding_dir_corruption_detected(tmp_path) -> None:
    embeddings, _ = planted(2, 3, dim=8, seed=13)
    root = tmp_path / "emb"
    save_embedding_dir(root, embeddings)
    (root / "embeddings.f32").write_bytes((root / "embeddings.f32").read_bytes()[:-4])
    with pytest.raises(FormatError, match="bytes"):
        load_embedding_dir(root)
    save_embedding_dir(root, embeddings)
    (root / "meta.json").write_text(json.dumps({"rows": 999, "dim": 8}))
    with pytest.raises(FormatError):
        load_embedding_dir(root)
    (root / "meta.json").write_text("not json")
    with pytest.raises(FormatError):
        load_embedding_dir(root)


def test_embedding_dir_missing_file(tmp_path) -> None:
    with pytest.raises(DataError, match="missing"):
        load_embedding_dir(tmp_path / "nowhere")


def test_pipeline_outputs_files(tmp_path) -> None:
    embeddings, _ = planted(3, 4, seed=14)
    clusters, report = run_pipeline(embeddings, Thresholds())
    out = tmp_path / "out"
    write_pipeline_outputs(out, clusters, report)
    partition_lines = (out / "partition.tsv").read_text().splitlines()
    assert len(partition_lines) == len(embeddings)
    parsed = dict(line.split("\t") for line in partition_lines)
    assert parsed == {k: str(v) for k, v in report["partition"].items()}
    saved = json.loads((out / "report.json").read_text())
    assert saved["clusters_after_merge"] == report["clusters_after_merge"]
    assert "partition" not in saved
    for line in (out / "candidates.tsv").read_text().splitlines():
        a, b, s = line.split("\t")
        assert 0.59 <= float(s) < 0.63
