"""Command implementations behind the ``astroloc`` CLI.

Each command reads its inputs from the run directory, writes its outputs
atomically and prints a short summary. Layout under ``paths.workdir``::

    db/regions.json            region manifest (written last, marks completion)
    db/quadruplets.jsonl       one line per region: its image keys
    db/images.npy              (regions, years, px, px, 3) uint8
    evalset/evalset.json       queries plus database regions near the POI
    evalset/query_images.npy   query images (synthetic source)
    features/db.emb            base features, one record per region and year
    features/queries.emb       base features, one record per query
    train/head.npz             trained linear head
    train/log.jsonl            per-iteration training log
    index/                     4x90TTA index
    reports/                   predictions, report.json/.txt, binned curves, SVGs
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig
from .database import (
    ACCEPT_ALL,
    BoxMask,
    EvalSet,
    build_eval_set,
    build_quadruplets,
    enumerate_regions,
    filter_queries_by_area,
    ingest_query_catalog,
    region_centers,
)
from .evaluation import (
    binned_recall,
    correct_matrix,
    format_table,
    nadir_baseline,
    plot_binned,
    random_baseline,
    score,
)
from .features import (
    CorruptStoreError,
    Extractor,
    FeatureStore,
    HeadExtractor,
    l2_normalize,
    read_feature_store,
    write_feature_store,
)
from .geodesy import GeoPoint, RegionId
from .index import Prediction, RotationTag, build_index, knn, load_index, save_index
from .io_utils import atomic_write_bytes, atomic_write_text
from .synthetic import SyntheticWorld
from .tiles import TileError, TileFetcher
from .training import QuadrupletDataset, train_linear_head

log = logging.getLogger(__name__)


class PipelineError(Exception):
    exit_code = 1


class DataError(PipelineError):
    exit_code = 3


class MissingArtifactError(DataError):
    def __init__(self, path, producer: str):
        super().__init__(f"{path} not found; run `astroloc {producer}` first")
        self.path = Path(path)
        self.producer = producer


class NetworkError(PipelineError):
    exit_code = 4


@dataclass(frozen=True)
class Layout:
    root: Path
    features: Path
    train: Path
    index: Path
    reports: Path

    @classmethod
    def of(cls, cfg: RunConfig) -> "Layout":
        root = Path(cfg.paths.workdir)
        p = cfg.paths
        return cls(root, root / p.features, root / p.train, root / p.index, root / p.reports)

    @property
    def regions(self) -> Path:
        return self.root / "db" / "regions.json"

    @property
    def quadruplets(self) -> Path:
        return self.root / "db" / "quadruplets.jsonl"

    @property
    def images(self) -> Path:
        return self.root / "db" / "images.npy"

    @property
    def fetch_errors(self) -> Path:
        return self.root / "db" / "fetch_errors.jsonl"

    @property
    def evalset(self) -> Path:
        return self.root / "evalset" / "evalset.json"

    @property
    def query_images(self) -> Path:
        return self.root / "evalset" / "query_images.npy"

    @property
    def db_features(self) -> Path:
        return self.features / "db.emb"

    @property
    def query_features(self) -> Path:
        return self.features / "queries.emb"

    @property
    def head(self) -> Path:
        return self.train / "head.npz"

    @property
    def train_log(self) -> Path:
        return self.train / "log.jsonl"

    @property
    def predictions(self) -> Path:
        return self.reports / "predictions.jsonl"

    @property
    def report_json(self) -> Path:
        return self.reports / "report.json"


# --------------------------------------------------------------------------
# small helpers
# --------------------------------------------------------------------------

def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _save_npy(path, arr) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    atomic_write_bytes(path, buf.getvalue())


def _to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _world(cfg: RunConfig) -> SyntheticWorld:
    return SyntheticWorld(dataclasses.replace(cfg.world, seed=cfg.seeds.world))


def _check_config(cfg: RunConfig) -> None:
    if cfg.source.kind == "synthetic":
        if cfg.tiling.image_px != cfg.world.image_px:
            raise ConfigError(f"tiling.image_px {cfg.tiling.image_px} differs from world.image_px "
                              f"{cfg.world.image_px}")
        if tuple(cfg.tiling.years) != tuple(cfg.world.years):
            raise ConfigError("tiling.years and world.years differ")
    missing = set(cfg.eval.index_years) - set(cfg.tiling.years)
    if missing:
        raise ConfigError(f"eval.index_years {sorted(missing)} not among tiling.years")
    if cfg.clusters.reference_year not in cfg.tiling.years:
        raise ConfigError(f"clusters.reference_year {cfg.clusters.reference_year} not among tiling.years")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")


def _db_signature(cfg: RunConfig) -> str:
    parts = {"source": dataclasses.asdict(cfg.source), "tiling": dataclasses.asdict(cfg.tiling)}
    if cfg.source.kind == "synthetic":
        parts["world"] = dataclasses.asdict(cfg.world)
        parts["seed"] = cfg.seeds.world
    parts["source"].pop("num_queries")
    return _digest(parts)


@dataclass
class Database:
    regions: list
    years: tuple
    images: np.ndarray  # uint8

    def items(self, years=None):
        """``(region, year, image)`` triples, optionally for some years only."""
        for j, y in enumerate(self.years):
            if years is not None and y not in years:
                continue
            for i, r in enumerate(self.regions):
                yield r, y, self.images[i, j]


def load_database(cfg: RunConfig) -> Database:
    lay = Layout.of(cfg)
    manifest = json.loads(_require(lay.regions, "build-db").read_text(encoding="utf-8"))
    span = manifest["span"]
    regions = [RegionId(z, i, j, span) for z, i, j in manifest["regions"]]
    images = np.load(_require(lay.images, "build-db"))
    if images.shape[:2] != (len(regions), len(manifest["years"])):
        raise DataError(f"{lay.images}: shape {images.shape} does not match the region manifest")
    return Database(regions, tuple(manifest["years"]), images)


def load_evalset(cfg: RunConfig) -> EvalSet:
    return EvalSet.load(_require(Layout.of(cfg).evalset, "build-evalset"))


def load_query_images(cfg: RunConfig, evalset: EvalSet) -> np.ndarray:
    lay = Layout.of(cfg)
    if cfg.source.kind == "synthetic":
        images = np.load(_require(lay.query_images, "build-evalset"))
        if images.shape[0] != len(evalset.queries):
            raise DataError(f"{lay.query_images} holds {images.shape[0]} images for "
                            f"{len(evalset.queries)} queries")
        return images
    folder = Path(cfg.source.query_images)
    out = []
    for q in evalset.queries:
        for ext in (".png", ".jpg", ".jpeg"):
            path = folder / f"{q.id}{ext}"
            if path.exists():
                break
        else:
            raise DataError(f"no image for query {q.id} in {folder}")
        with Image.open(path) as im:
            im = im.convert("RGB")
            side = min(im.size)
            im = im.crop((0, 0, side, side)).resize((cfg.tiling.image_px, cfg.tiling.image_px), Image.BILINEAR)
            out.append(np.asarray(im, dtype=np.uint8))
    if not out:
        return np.zeros((0, cfg.tiling.image_px, cfg.tiling.image_px, 3), np.uint8)
    return np.stack(out)


def base_extractor(cfg: RunConfig) -> Extractor:
    return Extractor(cfg.extractor)


def load_head(cfg: RunConfig, base: Extractor) -> np.ndarray:
    path = _require(Layout.of(cfg).head, "train")
    with np.load(path) as z:
        weights = z["weights"]
        trained_on = str(z["base_fingerprint"])
    if trained_on != base.fingerprint:
        raise DataError(f"{path} was trained on extractor {trained_on}, configured extractor is "
                        f"{base.fingerprint}; re-run `astroloc train`")
    return weights


def embedder(cfg: RunConfig):
    """Extractor used for indexing and querying: base or base plus trained head."""
    base = base_extractor(cfg)
    return HeadExtractor(base, load_head(cfg, base)) if cfg.eval.use_head else base


def _read_store(path: Path, producer: str, fingerprint: str) -> FeatureStore:
    meta_path = path.with_suffix(".json")
    _require(path, producer)
    try:
        store = read_feature_store(path)
    except CorruptStoreError as exc:
        raise DataError(str(exc)) from exc
    meta = json.loads(_require(meta_path, producer).read_text(encoding="utf-8"))
    if meta.get("fingerprint") != fingerprint:
        raise DataError(f"{path} holds features of extractor {meta.get('fingerprint')}, configured "
                        f"extractor is {fingerprint}; re-run `astroloc {producer}`")
    return store


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_build_db(cfg: RunConfig) -> dict:
    """Enumerate regions, gather their yearly images and write the manifests."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    signature = _db_signature(cfg)
    if lay.regions.exists() and lay.images.exists():
        old = json.loads(lay.regions.read_text(encoding="utf-8"))
        if old.get("signature") == signature:
            print(f"database up to date: {len(old['regions'])} regions ({lay.regions})")
            return {"regions": len(old["regions"]), "fetched": 0, "reused": True}
    failures = []
    fetched = 0
    if cfg.source.kind == "synthetic":
        world = _world(cfg)
        tiling = world.tiling()
        regions = enumerate_regions(tiling, world.mask())
        images = _to_uint8(world.database_images(regions))
    else:
        tiling = cfg.tiling
        mask = BoxMask(*cfg.source.bbox) if cfg.source.bbox else ACCEPT_ALL
        regions = enumerate_regions(tiling, mask)
        px = tiling.image_px
        fetcher = TileFetcher(cfg.source.endpoint, cfg.paths.cache_dir, image_px=px, jobs=cfg.jobs)
        images = np.zeros((len(regions), len(tiling.years), px, px, 3), np.uint8)
        for i, r in enumerate(regions):
            for j, y in enumerate(tiling.years):
                try:
                    images[i, j] = fetcher.fetch(r, y)
                except TileError as exc:
                    failures.append({"region": [r.zoom, r.ix, r.iy], "year": y,
                                     "kind": type(exc).__name__, "error": str(exc)})
        fetched = fetcher.network_calls
    if not regions:
        raise DataError("no regions selected; check the tiling and source settings")
    if failures:
        atomic_write_text(lay.fetch_errors, "".join(json.dumps(f) + "\n" for f in failures))
        raise NetworkError(f"{len(failures)} of {len(regions) * len(tiling.years)} images could not be "
                           f"fetched; see {lay.fetch_errors}")
    quads = build_quadruplets(regions, tiling)
    atomic_write_text(lay.quadruplets, "".join(
        json.dumps({"region": [q.region.zoom, q.region.ix, q.region.iy],
                    "images": [im.key for im in q.images]}) + "\n" for q in quads))
    _save_npy(lay.images, images)
    manifest = {
        "signature": signature,
        "source": cfg.source.kind,
        "span": tiling.span,
        "image_px": tiling.image_px,
        "years": list(tiling.years),
        "regions": [[r.zoom, r.ix, r.iy] for r in regions],
    }
    atomic_write_text(lay.regions, json.dumps(manifest))
    print(f"database: {len(regions)} regions x {len(tiling.years)} years, {fetched} network calls")
    return {"regions": len(regions), "fetched": fetched, "reused": False}


def cmd_build_evalset(cfg: RunConfig) -> EvalSet:
    """Select queries near the POI and the database regions visible from them."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    db = load_database(cfg)
    src = cfg.source
    images = None
    if src.kind == "synthetic":
        records, images = _world(cfg).make_queries(src.num_queries, seed=cfg.seeds.queries)
        if src.poi_lat is None or src.poi_lon is None:
            lat, lon = region_centers(db.regions)
            poi = GeoPoint(float(lat.mean()), float(lon.mean()))
        else:
            poi = GeoPoint(src.poi_lat, src.poi_lon)
    else:
        if not src.catalog:
            raise ConfigError("source.catalog is required to build an evaluation set from real queries")
        if src.poi_lat is None or src.poi_lon is None:
            raise ConfigError("source.poi_lat and source.poi_lon are required for the xyz source")
        try:
            records = filter_queries_by_area(ingest_query_catalog(src.catalog))
        except OSError as exc:
            raise DataError(f"cannot read catalog {src.catalog}: {exc}") from exc
        poi = GeoPoint(src.poi_lat, src.poi_lon)
    evalset = build_eval_set(poi, records, db.regions, cfg.visibility, name=src.kind)
    if images is not None:
        keep = {q.id for q in evalset.queries}
        images = _to_uint8(np.stack([im for r, im in zip(records, images) if r.id in keep])
                           if keep else np.zeros((0,) + images.shape[1:]))
        _save_npy(lay.query_images, images)
    evalset.save(lay.evalset)
    if not evalset.queries:
        print("warning: the evaluation set has no queries")
    print(f"evaluation set: {len(evalset.queries)} queries, {len(evalset.db_regions)} database regions")
    return evalset


def _write_store(path: Path, store: FeatureStore, meta: dict) -> None:
    write_feature_store(path, store)
    atomic_write_text(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True))


def cmd_extract(cfg: RunConfig) -> dict:
    """Base features for every database image and every query."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    db = load_database(cfg)
    evalset = load_evalset(cfg)
    qimages = load_query_images(cfg, evalset)
    ex = base_extractor(cfg)
    keys = np.array([r.key() for r in db.regions], np.uint64)
    values, ids, years = [], [], []
    for j, y in enumerate(db.years):
        values.append(ex.extract_batch(db.images[:, j], cfg.jobs))
        ids.append(keys)
        years.append(np.full(len(keys), y, np.uint16))
    store = FeatureStore(np.concatenate(ids), np.zeros(len(keys) * len(db.years), np.uint16),
                         np.concatenate(years), np.concatenate(values).astype(np.float32))
    _write_store(lay.db_features, store, {"fingerprint": ex.fingerprint})
    qvalues = ex.extract_batch(qimages, cfg.jobs) if len(qimages) else np.zeros((0, ex.dim))
    qstore = FeatureStore(np.arange(len(qimages), dtype=np.uint64), np.zeros(len(qimages), np.uint16),
                          np.zeros(len(qimages), np.uint16), qvalues.astype(np.float32))
    _write_store(lay.query_features, qstore,
                 {"fingerprint": ex.fingerprint, "query_ids": [q.id for q in evalset.queries]})
    print(f"features: {len(store)} database images, {len(qstore)} queries, dim {ex.dim}")
    return {"db": len(store), "queries": len(qstore)}


def cmd_train(cfg: RunConfig):
    """Fit the linear head on the database quadruplets."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    db = load_database(cfg)
    ex = base_extractor(cfg)
    store = _read_store(lay.db_features, "extract", ex.fingerprint)
    ref = cfg.clusters.reference_year
    rows = np.flatnonzero(np.asarray(store.years) == ref)
    ref_features = np.asarray(store.values[rows], dtype=np.float64)
    if not np.array_equal(np.asarray(store.ids[rows]), [r.key() for r in db.regions]):
        raise DataError(f"{lay.db_features} does not match the region manifest; re-run `astroloc extract`")
    dataset = QuadrupletDataset(db.regions, db.years, db.images.astype(np.float32) / 255.0)
    lay.train.mkdir(parents=True, exist_ok=True)
    tmp_log = lay.train_log.with_name(lay.train_log.name + ".tmp")
    result = train_linear_head(
        dataset, ex, cfg.clusters, cfg.batch, cfg.loss, cfg.optimizer, cfg.ablation, cfg.augmentation,
        seed=cfg.seeds.train, jobs=cfg.jobs, log_path=tmp_log, replay=cfg.replay, ref_features=ref_features,
    )
    os.replace(tmp_log, lay.train_log)
    buf = io.BytesIO()
    np.savez(buf, weights=result.weights, base_fingerprint=np.array(ex.fingerprint))
    atomic_write_bytes(lay.head, buf.getvalue())
    smooth = result.smoothed()
    log_hash = hashlib.sha256(lay.train_log.read_bytes()).hexdigest()[:16]
    print(f"trained {len(result.log)} iterations: smoothed loss {smooth[0]:.4f} -> {smooth[-1]:.4f} "
          f"(log {log_hash})")
    return result


def cmd_index(cfg: RunConfig):
    """Build and save the 4x90TTA index over the configured index years."""
    _check_config(cfg)
    db = load_database(cfg)
    ex = embedder(cfg)
    years = set(cfg.eval.index_years)
    index = build_index(((r, y, np.asarray(img, np.float32) / 255.0) for r, y, img in db.items(years)),
                        ex, jobs=cfg.jobs)
    index.extra["head"] = bool(cfg.eval.use_head)
    path = save_index(index, Layout.of(cfg).index)
    print(f"index: {len(index)} entries, dim {index.dim}, extractor {index.fingerprint} ({path})")
    return index


def query_embeddings(cfg: RunConfig, ex) -> tuple[list, np.ndarray]:
    """Query ids and their embeddings under ``ex``, from the stored base features."""
    lay = Layout.of(cfg)
    base = ex.base if isinstance(ex, HeadExtractor) else ex
    store = _read_store(lay.query_features, "extract", base.fingerprint)
    ids = json.loads(lay.query_features.with_suffix(".json").read_text(encoding="utf-8"))["query_ids"]
    F = np.asarray(store.values, dtype=np.float64)
    if isinstance(ex, HeadExtractor):
        F = l2_normalize(F @ ex.weights) if len(F) else np.zeros((0, ex.dim))
    return ids, F


def search(index, ids, Q, n: int, dedup: bool) -> dict:
    return {qid: knn(index, q, n, dedup=dedup) for qid, q in zip(ids, Q)}


def _prediction_row(p: Prediction) -> dict:
    return {"rank": p.rank, "region": [p.region.zoom, p.region.ix, p.region.iy], "year": p.year,
            "rotation": int(p.rotation), "score": p.score}


def cmd_query(cfg: RunConfig) -> dict:
    """Search every query against the index and write ranked predictions."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    ex = embedder(cfg)
    try:
        index = load_index(lay.index, expected_fingerprint=ex.fingerprint)
    except FileNotFoundError:
        raise MissingArtifactError(lay.index, "index") from None
    ids, Q = query_embeddings(cfg, ex)
    preds = search(index, ids, Q, max(cfg.eval.ns), cfg.eval.dedup)
    lines = []
    for qid in ids:
        rows = preds[qid]
        lines.append(json.dumps({"id": qid, "orientation": int(rows[0].rotation) if rows else None,
                                 "predictions": [_prediction_row(p) for p in rows]}))
    atomic_write_text(lay.predictions, "".join(line + "\n" for line in lines))
    print(f"queried {len(ids)} images against {len(index)} index entries ({lay.predictions})")
    return preds


def load_predictions(cfg: RunConfig) -> dict:
    path = _require(Layout.of(cfg).predictions, "query")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        out[d["id"]] = [Prediction(p["rank"], RegionId(*p["region"], span=cfg.tiling.span), p["year"],
                                   RotationTag(p["rotation"]), p["score"]) for p in d["predictions"]]
    return out


def _binned_n(ns) -> int:
    return 10 if 10 in ns else min(ns)


def cmd_eval(cfg: RunConfig) -> dict:
    """Score predictions, add the nadir and random baselines, write reports."""
    _check_config(cfg)
    lay = Layout.of(cfg)
    evalset = load_evalset(cfg)
    preds = load_predictions(cfg)
    queries = evalset.queries
    ns = tuple(cfg.eval.ns)
    fingerprint = json.loads(_require(lay.index / "manifest.json", "index").read_text())["fingerprint"]
    name = "trained" if cfg.eval.use_head else "baseline"
    method = score(preds, queries, ns, name=name, fingerprint=fingerprint)
    nadir = score({q.id: nadir_baseline(q, evalset.db_regions) for q in queries}, queries, ns, name="nadir")
    correct = correct_matrix(queries, evalset.db_regions)
    rng = np.random.default_rng(cfg.seeds.eval)
    rand = random_baseline(evalset.db_regions, queries, rng, cfg.eval.random_trials, ns, correct=correct)
    n = _binned_n(ns)
    binned = {key: binned_recall(method, queries, key, n=n).to_dict() for key in ("distance", "area")}
    report = {
        "dedup": cfg.eval.dedup,
        "num_queries": len(queries),
        "num_db_regions": len(evalset.db_regions),
        "reports": [method.to_dict(), nadir.to_dict(), rand.to_dict()],
        "binned": binned,
    }
    atomic_write_text(lay.report_json, json.dumps(report, indent=2, sort_keys=True))
    table = format_table([method, nadir, rand])
    atomic_write_text(lay.reports / "report.txt", table + "\n")
    print(table)
    return {"method": method, "nadir": nadir, "random": rand, "binned": binned}


def cmd_plot(cfg: RunConfig) -> list:
    """Render the binned recall curves of the last evaluation to SVG."""
    from .evaluation import BinnedReport

    lay = Layout.of(cfg)
    report = json.loads(_require(lay.report_json, "eval").read_text(encoding="utf-8"))
    written = []
    for key, d in sorted(report["binned"].items()):
        path = lay.reports / f"recall_vs_{key}.svg"
        plot_binned(BinnedReport(d["key"], d["edges"], d["counts"], d["recall"], d["n"]), path)
        written.append(path)
        print(f"wrote {path}")
    return written


def cmd_bench(cfg: RunConfig) -> list:
    from .bench import format_results, run_benchmarks

    results = run_benchmarks()
    print(format_results(results))
    return results


def run_all(cfg: RunConfig) -> dict:
    """build-db through eval in one go; returns the eval result."""
    cmd_build_db(cfg)
    cmd_build_evalset(cfg)
    cmd_extract(cfg)
    if cfg.eval.use_head:
        cmd_train(cfg)
    cmd_index(cfg)
    cmd_query(cfg)
    return cmd_eval(cfg)
