import json
import math

import numpy as np
import pytest

from astroloc.features import Extractor, ExtractorConfig, l2_normalize
from astroloc.geodesy import RegionId
from astroloc.index import (
    CorruptIndexError,
    IncompatibleIndexError,
    RotationTag,
    TtaIndex,
    build_index,
    knn,
    load_index,
    predict_orientation,
    rotate,
    save_index,
    top_order,
)


@pytest.fixture(scope="module")
def ex():
    return Extractor(ExtractorConfig(dim=32, grid=4))


def items(rng, n=12, px=16):
    return [(RegionId(12, 2 * i, 6, 1), 2021, rng.random((px, px, 3))) for i in range(n)]


def naive_order(matrix, q, n):
    s = [math.fsum(float(a) * float(b) for a, b in zip(row, q)) for row in matrix]
    return sorted(range(len(s)), key=lambda i: (-s[i], i))[:n]


def random_index(rng, n, dim=16, dup_every=0):
    M = l2_normalize(rng.normal(size=(n, dim))).astype(np.float32)
    if dup_every:
        M[dup_every::dup_every] = M[0]
    keys = np.array([RegionId(14, i, 0, 1).key() for i in range(n)], np.uint64)
    return TtaIndex(M, keys, np.full(n, 2021, np.uint16), np.zeros(n, np.uint16), 1, "test")


def test_rotation_matches_rot90(rng):
    img = rng.random((4, 4, 3))
    assert np.array_equal(rotate(img, 90), np.rot90(img))
    assert np.array_equal(rotate(img, RotationTag.R270), np.rot90(img, 3))
    with pytest.raises(ValueError):
        rotate(img, 45)


def test_rotated_query_finds_itself(rng, ex):
    its = items(rng)
    index = build_index(its, ex)
    assert len(index) == 4 * len(its)
    for region, _, img in its[::3]:
        for r in RotationTag:
            preds = knn(index, ex.extract(rotate(img, r)), n=5)
            assert preds[0].region == region and preds[0].score >= 1 - 1e-6
            assert predict_orientation(preds) == r


def test_knn_matches_naive_scan(rng):
    index = random_index(rng, 500, dup_every=50)
    for _ in range(20):
        q = l2_normalize(rng.normal(size=16))
        got = [p.region.key() for p in knn(index, q, n=25)]
        want = [int(index.keys[i]) for i in naive_order(index.matrix, q, 25)]
        assert got == want
    # exact duplicates of row 0 come out in index order
    q = index.matrix[0].astype(np.float64)
    top = [p.region.ix for p in knn(index, q, n=10)]
    assert top == list(range(0, 500, 50))


def test_top_order_edges():
    s = np.array([0.5, 0.9, 0.9, 0.1])
    assert top_order(s, 2).tolist() == [1, 2]
    assert top_order(s, 10).tolist() == [1, 2, 0, 3]
    assert top_order(s, 0).size == 0


def test_dedup_keeps_best_rotation_per_region_year(rng, ex):
    its = items(rng, n=4)
    its += [(r, 2019, rng.random(img.shape)) for r, _, img in its]
    index = build_index(its, ex)
    q = l2_normalize(rng.normal(size=32))
    preds = knn(index, q, n=8, dedup=True)
    assert len({(p.region, p.year) for p in preds}) == 8
    raw = knn(index, q, n=len(index))
    best = {}
    for p in raw:
        best.setdefault((p.region, p.year), p)
    assert [(p.region, p.year, p.rotation) for p in preds] == [(p.region, p.year, p.rotation)
                                                               for p in best.values()]
    with pytest.raises(ValueError):
        knn(index, q, n=0)
    with pytest.raises(ValueError):
        knn(index, q[:5])


def test_years_filter_and_spans(rng, ex):
    its = items(rng, n=3) + [(RegionId(12, 0, 6, 1), 2019, rng.random((16, 16, 3)))]
    index = build_index(its, ex, years_filter={2019})
    assert len(index) == 4 and set(index.years.tolist()) == {2019}
    with pytest.raises(ValueError):
        build_index([(RegionId(12, 0, 0, 1), 2021, its[0][2]), (RegionId(12, 0, 0, 2), 2021, its[0][2])], ex)
    empty = build_index([], ex)
    assert len(empty) == 0 and empty.dim == 32


@pytest.mark.parametrize("mmap", [False, True])
def test_save_load_bit_identical(rng, ex, tmp_path, mmap):
    index = build_index(items(rng, n=5), ex)
    index.extra["head"] = "abc"
    save_index(index, tmp_path / "idx")
    back = load_index(tmp_path / "idx", expected_fingerprint=ex.fingerprint, mmap=mmap)
    for name in ("matrix", "keys", "years", "rotations"):
        a, b = np.asarray(getattr(index, name)), np.asarray(getattr(back, name))
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert back.span == index.span and back.extra == {"head": "abc"}
    assert back.manifest() == index.manifest()


def test_fingerprint_mismatch_rejected(rng, ex, tmp_path):
    save_index(build_index(items(rng, n=2), ex), tmp_path / "idx")
    with pytest.raises(IncompatibleIndexError):
        load_index(tmp_path / "idx", expected_fingerprint="something-else")


def test_damaged_index(rng, ex, tmp_path):
    d = tmp_path / "idx"
    save_index(build_index(items(rng, n=2), ex), d)
    manifest = json.loads((d / "manifest.json").read_text())
    (d / "manifest.json").write_text(json.dumps(dict(manifest, count=99)))
    with pytest.raises(CorruptIndexError):
        load_index(d)
    (d / "manifest.json").write_text(json.dumps(dict(manifest, format=7)))
    with pytest.raises(IncompatibleIndexError):
        load_index(d)
    (d / "manifest.json").write_text("{")
    with pytest.raises(CorruptIndexError):
        load_index(d)
    (d / "manifest.json").write_text(json.dumps(manifest))
    data = (d / "features.emb").read_bytes()
    (d / "features.emb").write_bytes(data[:-1])
    with pytest.raises(CorruptIndexError):
        load_index(d)
    with pytest.raises(FileNotFoundError, match="astroloc index"):
        load_index(tmp_path / "nowhere")
