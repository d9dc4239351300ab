"""Acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary. The end-to-end checks build a 500-region, 4-year
synthetic database of 64x64 tiles once per session and train through the
pipeline commands with the default configuration and a fixed seed; recall
is scored with one prediction per region (raw-entry recall is printed too).
"""
import dataclasses
import math
import time

import numpy as np
import pytest
from shapely.geometry import box

from astroloc import pipeline
from astroloc.config import EvalConfig, Paths, RunConfig
from astroloc.evaluation import correct_matrix, random_baseline, score
from astroloc.features import encode_feature_store, l2_normalize, read_feature_store
from astroloc.geodesy import RegionId, Relation, visible_distance, overlap_fraction
from astroloc.index import (
    IncompatibleIndexError,
    RotationTag,
    TtaIndex,
    build_index,
    knn,
    load_index,
    predict_orientation,
    rotate,
    save_index,
)
from astroloc.training import AblationConfig, BatchSpec, ClusterConfig, OptimizerConfig, QuadrupletDataset
from astroloc.training import kmeans, ms_loss, na_ms_loss, train_linear_head
from astroloc.training.augment import apply_params
from astroloc.training.losses import chain_grad_to_embeddings, label_relations, similarity_matrix
from astroloc.training.trainer import ReplayConfig

from reference import central_diff, max_rel_error, mixed_relations, ms_loss_ref, normalize_rows
from test_evaluation import ROW, box_query


# -- 1 ------------------------------------------------------------------------

def test_c01_visible_distance(criterion):
    d = visible_distance(6371.0, 450.0)
    assert criterion("C1 visible_distance(6371, 450) = 2436 +/- 1", abs(d - 2436.0) <= 1.0, f"{d:.2f} km")


# -- 2 ------------------------------------------------------------------------

def test_c02_gradients(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        if k % 2:
            Z = rng.normal(size=6) + 0.15 * rng.normal(size=(8, 6))  # similarities near 1
        else:
            Z = rng.normal(size=(8, 6))
        rel = mixed_relations(rng, 8)
        E = l2_normalize(Z)
        S = similarity_matrix(E)
        _, G = na_ms_loss(S, rel)
        worst = max(worst, max_rel_error(G, central_diff(lambda s: ms_loss_ref(s, rel), S)))

        def chain(z):
            e = normalize_rows(z)
            return ms_loss_ref(e @ e.T, rel)

        dZ = chain_grad_to_embeddings(G, E, pre_norm=Z)
        worst = max(worst, max_rel_error(dZ, central_diff(chain, Z)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 1.0
    assert criterion("C2 NA-MS and embedding-chain gradients vs central differences", ok,
                     f"max rel err {worst:.2e} on 20 instances, {elapsed:.2f} s")


# -- 3 ------------------------------------------------------------------------

def test_c03_na_ms_reduces_to_ms(criterion):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        labels = rng.integers(0, 5, size=16)
        S = similarity_matrix(l2_normalize(rng.normal(size=(16, 8))))
        worst = max(worst, abs(na_ms_loss(S, label_relations(labels))[0] - ms_loss(S, labels)[0]))
    rel = mixed_relations(rng, 16)
    i, j = np.argwhere(np.triu(rel == Relation.NEUTRAL, 1))[0]
    S = similarity_matrix(l2_normalize(rng.normal(size=(16, 8))))
    base = na_ms_loss(S, rel)[0]
    S2 = S.copy()
    S2[i, j] += 0.5
    S2[j, i] -= 0.25
    change = na_ms_loss(S2, rel)[0] - base
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and change == 0.0 and elapsed < 1.0
    assert criterion("C3 na_ms == ms without neutrals; neutral perturbation changes nothing", ok,
                     f"max diff {worst:.1e}, neutral change {change}, {elapsed:.2f} s")


# -- 4 ------------------------------------------------------------------------

def test_c04_hand_values(criterion):
    a, b = 2.0, 50.0
    same = na_ms_loss(np.ones((4, 4)), np.ones((4, 4), np.int8))[0]
    diff = ms_loss(np.ones((2, 2)), ["a", "b"])[0]
    ok = abs(same - math.log(4) / a) <= 1e-9 and abs(diff - math.log(2) / b) <= 1e-9
    assert criterion("C4 hand values (1/alpha) ln4 and (1/beta) ln2", ok, f"{same:.12f}, {diff:.12f}")


# -- 5 ------------------------------------------------------------------------

def test_c05_half_stride_overlaps(criterion):
    grid = [RegionId(10, 400 + i, 300 + j, 1) for j in range(20) for i in range(20)]
    t0 = time.perf_counter()
    got = {(a, b): overlap_fraction(a, b) for a in grid for b in grid}
    elapsed = time.perf_counter() - t0
    bad = 0
    for (a, b), frac in got.items():
        # a side spans two half-strides, so shared extent per axis is (2 - offset) / 2
        dx, dy = abs(a.ix - b.ix), abs(a.iy - b.iy)
        want = max(0, 2 - dx) * max(0, 2 - dy) / 4
        bad += abs(frac - want) > 1e-12
        if (dx, dy) in ((1, 0), (0, 1)):
            bad += want != 0.5
        elif (dx, dy) == (1, 1):
            bad += want != 0.25
    # geometric spot check on the neighbourhood of one cell
    a = grid[210]
    for b in grid:
        if abs(a.ix - b.ix) <= 2 and abs(a.iy - b.iy) <= 2:
            geom = box(*a.bounds()).intersection(box(*b.bounds())).area / box(*a.bounds()).area
            bad += abs(geom - got[a, b]) > 1e-9
    ok = bad == 0 and elapsed < 1.0
    assert criterion("C5 half-stride overlaps: axis 50%, diagonal 25% (20x20 grid)", ok,
                     f"{len(got)} pairs, {bad} wrong, {elapsed:.2f} s")


# -- shared end-to-end workdir -------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Database, evaluation set and base features for the default configuration."""
    work = tmp_path_factory.mktemp("e2e")
    # random picks are distinct regions, so recall is compared with one prediction per region
    cfg = RunConfig(paths=Paths(workdir=str(work)), eval=EvalConfig(dedup=True))
    t0 = time.perf_counter()
    pipeline.cmd_build_db(cfg)
    pipeline.cmd_build_evalset(cfg)
    pipeline.cmd_extract(cfg)
    return {"cfg": cfg, "prep_s": time.perf_counter() - t0, "runs": {}}


def variant(e2e, tag, use_head=True, **ablation):
    """Train (unless untrained), index, query and evaluate one configuration; cached per tag."""
    if tag in e2e["runs"]:
        return e2e["runs"][tag]
    base = e2e["cfg"]
    cfg = dataclasses.replace(
        base, ablation=AblationConfig(**ablation), eval=dataclasses.replace(base.eval, use_head=use_head),
        paths=dataclasses.replace(base.paths, train=f"train_{tag}", index=f"index_{tag}",
                                  reports=f"reports_{tag}"))
    t0 = time.perf_counter()
    trained = pipeline.cmd_train(cfg) if use_head else None
    pipeline.cmd_index(cfg)
    pipeline.cmd_query(cfg)
    out = pipeline.cmd_eval(cfg)
    # raw (non-deduplicated) recall for the record
    ex = pipeline.embedder(cfg)
    index = load_index(pipeline.Layout.of(cfg).index, ex.fingerprint)
    ids, Q = pipeline.query_embeddings(cfg, ex)
    raw = score(pipeline.search(index, ids, Q, 10, dedup=False), pipeline.load_evalset(cfg).queries, (1, 10))
    e2e["runs"][tag] = run = {"cfg": cfg, "eval": out, "train": trained, "raw": raw,
                              "seconds": time.perf_counter() - t0}
    return run


# -- 6 ------------------------------------------------------------------------

def test_c06_tta_self_retrieval(e2e, criterion):
    cfg = e2e["cfg"]
    db = pipeline.load_database(cfg)
    ex = pipeline.base_extractor(cfg)
    items = [(r, y, img.astype(np.float32) / 255.0) for r, y, img in db.items()][:1000]
    t0 = time.perf_counter()
    index = build_index(items, ex)
    rng = np.random.default_rng(6)
    self_hits = orient_hits = 0
    low = 1.0
    for region, year, img in items:
        r = RotationTag(int(rng.choice([0, 90, 180, 270])))
        preds = knn(index, ex.extract(rotate(img, r)), n=5)
        top = preds[0]
        self_hits += top.region == region and top.year == year and top.score >= 1 - 1e-6
        orient_hits += predict_orientation(preds) == r
        low = min(low, top.score)
    elapsed = time.perf_counter() - t0
    ok = self_hits == len(items) == 1000 and orient_hits == len(items) and elapsed < 30.0
    assert criterion("C6 4x90TTA: rotated database query finds itself, orientation recovered", ok,
                     f"{self_hits}/{len(items)} self at rank 1, {orient_hits} orientations, "
                     f"min score {low:.7f}, {elapsed:.1f} s")


# -- 7 ------------------------------------------------------------------------

def test_c07_knn_matches_naive_scan(criterion):
    rng = np.random.default_rng(7)
    n, dim = 10_000, 64
    M = l2_normalize(rng.normal(size=(n, dim))).astype(np.float32)
    M[5000:5010] = M[17]  # exact ties resolve to the lower index
    keys = np.array([RegionId(16, i % 60000, i // 60000, 1).key() for i in range(n)], np.uint64)
    index = TtaIndex(M, keys, np.full(n, 2021, np.uint16), np.zeros(n, np.uint16), 1, "naive")
    t0 = time.perf_counter()
    mismatches = 0
    for p in range(100):
        q = M[17].astype(np.float64) if p == 0 else l2_normalize(rng.normal(size=dim))
        got = [int(k) for k in (pr.region.key() for pr in knn(index, q, n=100))]
        s = [float(np.dot(M[i].astype(np.float64), q)) for i in range(n)]
        want = [int(keys[i]) for i in sorted(range(n), key=lambda i: (-s[i], i))[:100]]
        mismatches += got != want
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30.0
    assert criterion("C7 kNN equals a naive full scan, order included (10k entries, 100 probes)", ok,
                     f"{mismatches} mismatching probes, {elapsed:.1f} s")


# -- 8 ------------------------------------------------------------------------

def test_c08_monotone_recall_and_random_baseline(e2e, criterion):
    reports = []
    for tag in ("untrained", "full"):
        out = variant(e2e, tag, use_head=tag == "full")
        reports += [out["eval"][k] for k in ("method", "nadir", "random")]
    monotone = all(r[1] <= r[10] <= r[100] for r in reports)
    rng = np.random.default_rng(8)
    queries = [box_query(f"q{i}", ROW[i]) for i in range(10)]
    assert correct_matrix(queries, ROW).sum(axis=1).tolist() == [1] * 10
    trials = 400
    rand = random_baseline(ROW, queries, rng, trials=trials, ns=(5,))
    sigma = 100.0 * 0.5 / math.sqrt(trials * len(queries))
    ok = monotone and abs(rand[5] - 50.0) <= 3 * sigma and rand.notes["expected"][5] == pytest.approx(50.0)
    assert criterion("C8 R@1 <= R@10 <= R@100 on every report; random baseline within 3 sigma", ok,
                     f"{len(reports)} reports monotone={monotone}; random R@5 {rand[5]:.2f} "
                     f"vs 50.0 +/- {3 * sigma:.2f}")


# -- 9 ------------------------------------------------------------------------

def test_c09_batches(e2e, criterion):
    cfg = e2e["cfg"]
    db = pipeline.load_database(cfg)
    data = QuadrupletDataset(db.regions, db.years, db.images.astype(np.float32) / 255.0)
    ex = pipeline.base_extractor(cfg)
    ref = ex.extract_batch(data.images[:, data.years.index(cfg.clusters.reference_year)])
    q = cfg.batch.quadruplets_per_batch
    clusters = ClusterConfig(num_clusters=cfg.clusters.num_clusters, refresh_every=10_000)
    # the trainer clusters the reference features under W = I at iteration 0 with seed + 0
    labels = kmeans(l2_normalize(ref), clusters.num_clusters, seed=0).labels
    sizes = np.bincount(labels)

    def run():
        seen = []
        res = train_linear_head(data, ex, clusters, BatchSpec(q), optimizer_cfg=OptimizerConfig(1e-3, iterations=25),
                                seed=0, ref_features=ref, replay=ReplayConfig(0),
                                on_batch=lambda b, imgs, plan: seen.append((b, imgs, plan)))
        return res, seen

    res, seen = run()
    single = distinct = yearwise = 0
    for batch, imgs, plan in seen:
        own = np.flatnonzero(labels == batch.cluster)
        if sizes[batch.cluster] >= q:
            single += bool(np.all(labels[batch.regions] == batch.cluster))
        else:
            # topped up: every member of the small cluster is in the batch
            single += set(own.tolist()) <= set(batch.regions.tolist())
        distinct += len({data.regions[i] for i in batch.regions}) >= 2
        src = data.images[batch.regions].reshape((-1,) + data.images.shape[2:])
        yrs = np.tile(np.asarray(data.years), batch.regions.size)
        same = all(np.array_equal(imgs[yrs == y], apply_params(src[yrs == y], plan[y])) for y in data.years)
        yearwise += same and set(plan.params) == set(data.years)
    res2, seen2 = run()
    deterministic = (res.log == res2.log and np.array_equal(res.weights, res2.weights)
                     and all(np.array_equal(a[0].regions, b[0].regions) for a, b in zip(seen, seen2)))
    n = len(seen)
    ok = single == distinct == yearwise == n and deterministic
    assert criterion("C9 single-cluster batches, >= 2 regions, one augmentation per year, deterministic", ok,
                     f"{n} batches: single-cluster {single}, distinct {distinct}, year-wise {yearwise}, "
                     f"deterministic={deterministic}")


# -- 10 -----------------------------------------------------------------------

def test_c10_end_to_end(e2e, criterion):
    untrained = variant(e2e, "untrained", use_head=False)
    full = variant(e2e, "full")
    total = e2e["prep_s"] + untrained["seconds"] + full["seconds"]
    r_untrained = untrained["eval"]["method"][10]
    r_full = full["eval"]["method"][10]
    expected_random = full["eval"]["random"].notes["expected"][10]
    smooth = full["train"].smoothed()
    ok_a = r_full > r_untrained
    ok_b = r_full > 5 * expected_random
    ok_c = smooth[-1] < smooth[0]
    ok_t = total < 600.0
    criterion("C10a trained R@10 > untrained R@10", ok_a,
              f"{r_full:.1f} vs {r_untrained:.1f} (raw {full['raw'][10]:.1f} vs {untrained['raw'][10]:.1f})")
    criterion("C10b trained R@10 > 5x random", ok_b, f"{r_full:.1f} vs 5 x {expected_random:.2f}")
    criterion("C10c final smoothed loss < initial", ok_c, f"{smooth[-1]:.4f} vs {smooth[0]:.4f}")
    criterion("C10 end-to-end within 10 minutes", ok_t, f"{total:.0f} s")
    assert ok_a and ok_b and ok_c and ok_t


# -- 11 -----------------------------------------------------------------------

def test_c11_ablations(e2e, criterion):
    full = variant(e2e, "full")["eval"]["method"][10]
    no_clusters = variant(e2e, "random_batches", clustered_batches=False)["eval"]["method"][10]
    no_neutral = variant(e2e, "no_neutral", neutral_aware=False)["eval"]["method"][10]
    ok_c = full >= no_clusters
    ok_n = full >= no_neutral
    criterion("C11 clustered batches do not lower R@10", ok_c, f"on {full:.1f}, off {no_clusters:.1f}")
    criterion("C11 neutral-aware loss does not lower R@10", ok_n, f"on {full:.1f}, off {no_neutral:.1f}")
    assert ok_c and ok_n


# -- 12 -----------------------------------------------------------------------

def test_c12_round_trips(e2e, criterion, tmp_path):
    cfg = e2e["cfg"]
    lay = pipeline.Layout.of(cfg)
    store_ok = all(encode_feature_store(read_feature_store(p, mmap=m)) == p.read_bytes()
                   for p in (lay.db_features, lay.query_features) for m in (False, True))
    full = variant(e2e, "full")
    ex = pipeline.embedder(full["cfg"])
    src = pipeline.Layout.of(full["cfg"]).index
    index = load_index(src, ex.fingerprint)
    save_index(index, tmp_path / "copy")
    index_ok = all((tmp_path / "copy" / f).read_bytes() == (src / f).read_bytes()
                   for f in ("features.emb", "manifest.json"))
    back = load_index(tmp_path / "copy", ex.fingerprint)
    index_ok &= all(np.asarray(getattr(back, a)).tobytes() == np.asarray(getattr(index, a)).tobytes()
                    for a in ("matrix", "keys", "years", "rotations"))
    rejected = []
    try:
        load_index(src, expected_fingerprint=pipeline.base_extractor(cfg).fingerprint)
    except IncompatibleIndexError:
        rejected.append("index")
    other = dataclasses.replace(cfg, extractor=dataclasses.replace(cfg.extractor, seed=cfg.extractor.seed + 1))
    try:
        pipeline.cmd_train(dataclasses.replace(other, paths=dataclasses.replace(other.paths, train="train_x")))
    except pipeline.DataError:
        rejected.append("features")
    ok = store_ok and index_ok and rejected == ["index", "features"]
    assert criterion("C12 index and feature-store round trips bit-identical; fingerprint mismatch rejected", ok,
                     f"stores {store_ok}, index {index_ok}, rejected {rejected}")
