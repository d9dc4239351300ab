"""Linear-head training loop: clustered batches, year-wise augmentation, NA-MS loss.

The head ``W`` maps baseline embeddings to the final space,
``e = normalize(extract(img) @ W)``. Only ``W`` is learned; the extractor
stays fixed, so this is a desk-scale stand-in for training a backbone.

Because the extractor is frozen, the base features of augmented batches can
be reused. With ``ReplayConfig.pool_batches > 0`` every cluster refresh
renders a pool of augmented batches once and the optimizer then draws from
it, which makes a head step far cheaper than augmenting and extracting a
fresh batch. With ``pool_batches = 0`` every iteration uses a fresh batch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..features import Extractor, l2_normalize
from ..geodesy import relation_matrix
from .augment import AugmentationRanges, per_image_augment, yearwise_augment
from .clustering import BatchSpec, ClusterConfig, clustered_batches, kmeans, random_batches
from .losses import LossParams, chain_grad_to_embeddings, label_relations, na_ms_loss, similarity_matrix

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 2000


@dataclass(frozen=True)
class AblationConfig:
    clustered_batches: bool = True
    year_wise_aug: bool = True
    neutral_aware: bool = True


@dataclass(frozen=True)
class ReplayConfig:
    pool_batches: int = 0

    def __post_init__(self):
        if self.pool_batches < 0:
            raise ValueError("pool_batches must be non-negative")


@dataclass
class QuadrupletDataset:
    regions: list
    years: tuple
    images: np.ndarray  # (n_regions, n_years, H, W, 3), float in [0, 1]

    def __post_init__(self):
        if len(self.regions) == 0:
            raise ValueError("empty dataset")
        if self.images.shape[:2] != (len(self.regions), len(self.years)):
            raise ValueError(f"image stack {self.images.shape[:2]} does not match "
                             f"{len(self.regions)} regions x {len(self.years)} years")


@dataclass
class TrainResult:
    weights: np.ndarray
    log: list = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.log])

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = self.losses()
        window = max(1, min(window, x.size))
        return np.convolve(x, np.ones(window) / window, mode="valid")


class Adam:
    def __init__(self, shape, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return params - c.lr * mhat / (np.sqrt(vhat) + c.eps)


def head_loss_and_grad(F, W, relations, params: LossParams):
    """Loss of a batch of base features under head ``W`` and ``dL/dW``.

    ``relations`` is the int8 relation matrix of the batch labels.
    """
    Z = F @ W
    E = l2_normalize(Z)
    loss, G = na_ms_loss(similarity_matrix(E), relations, params)
    dZ = chain_grad_to_embeddings(G, E, pre_norm=Z)
    return loss, F.T @ dZ


def train_linear_head(
    dataset: QuadrupletDataset,
    extractor: Extractor,
    cluster_cfg: ClusterConfig = ClusterConfig(),
    batch_spec: BatchSpec = BatchSpec(),
    loss_params: LossParams = LossParams(),
    optimizer_cfg: OptimizerConfig = OptimizerConfig(),
    ablation: AblationConfig = AblationConfig(),
    aug_ranges: AugmentationRanges = AugmentationRanges(),
    seed: int = 0,
    jobs: int = 1,
    log_path=None,
    on_iteration: Callable | None = None,
    replay: ReplayConfig = ReplayConfig(),
    on_batch: Callable | None = None,
    ref_features=None,
) -> TrainResult:
    """Fit the linear head; deterministic for a fixed ``seed``.

    ``on_batch(batch, images, plan)`` sees every augmented batch as it is
    built (``plan`` is the year-wise plan or the per-image parameter list).
    ``ref_features`` are precomputed base features of the reference-year
    images, one row per region; they are computed here when omitted.
    """
    rng = np.random.default_rng(seed)
    W = np.eye(extractor.dim)
    opt = Adam(W.shape, optimizer_cfg)
    years = np.asarray(dataset.years)
    n_regions = len(dataset.regions)
    if dataset.images.shape[1] != batch_spec.images_per_quadruplet:
        batch_spec = BatchSpec(batch_spec.quadruplets_per_batch, dataset.images.shape[1])
    if ablation.clustered_batches and cluster_cfg.reference_year not in dataset.years:
        raise ValueError(f"reference year {cluster_cfg.reference_year} not in {dataset.years}")
    ref_feats = None
    if ablation.clustered_batches:
        ref = dataset.years.index(cluster_cfg.reference_year)
        if ref_features is None:
            ref_feats = extractor.extract_batch(dataset.images[:, ref], jobs)
        else:
            ref_feats = np.asarray(ref_features, dtype=np.float64)
            if ref_feats.shape != (n_regions, extractor.dim):
                raise ValueError(f"ref_features of shape {ref_feats.shape}, expected {(n_regions, extractor.dim)}")

    def make_batch(batch):
        idx = batch.regions
        imgs = dataset.images[idx].reshape((-1,) + dataset.images.shape[2:])
        if ablation.year_wise_aug:
            imgs, plan = yearwise_augment(imgs, np.tile(years, idx.size), aug_ranges, rng,
                                          known_years=dataset.years)
        else:
            imgs, plan = per_image_augment(imgs, aug_ranges, rng)
        if on_batch:
            on_batch(batch, imgs, plan)
        labels = [dataset.regions[i] for i in np.repeat(idx, years.size)]
        rel = relation_matrix(labels) if ablation.neutral_aware else label_relations(labels)
        return batch.cluster, extractor.extract_batch(imgs, jobs), rel

    stream = None
    pool = []
    prev_cluster = None
    history = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for it in range(optimizer_cfg.iterations):
            refresh = it % cluster_cfg.refresh_every == 0
            if refresh and ablation.clustered_batches:
                feats = l2_normalize(ref_feats @ W)
                km = kmeans(feats, min(cluster_cfg.num_clusters, n_regions), seed=seed + it)
                stream = clustered_batches(km.labels, dataset.regions, batch_spec, rng, km.centroids)
            elif stream is None:
                stream = random_batches(n_regions, batch_spec, rng)
            if replay.pool_batches:
                if refresh:
                    pool = [make_batch(next(stream)) for _ in range(replay.pool_batches)]
                    log.debug("iteration %d: rebuilt pool of %d batches", it, len(pool))
                pick = int(rng.integers(len(pool)))
                if ablation.clustered_batches and pool[pick][0] == prev_cluster:
                    others = [i for i, b in enumerate(pool) if b[0] != prev_cluster]
                    if others:
                        pick = others[int(rng.integers(len(others)))]
                cluster, F, rel = pool[pick]
            else:
                cluster, F, rel = make_batch(next(stream))
            prev_cluster = cluster
            loss, dW = head_loss_and_grad(F, W, rel, loss_params)
            if not np.isfinite(loss) or not np.all(np.isfinite(dW)):
                recent = [round(r["loss"], 6) for r in history[-5:]]
                raise TrainingDivergedError(f"non-finite loss at iteration {it}; recent losses {recent}")
            W = opt.step(W, dW)
            if not np.all(np.isfinite(W)):
                raise TrainingDivergedError(f"non-finite head weights after iteration {it}")
            row = {"iteration": it, "loss": float(loss), "cluster_id": int(cluster), "lr": optimizer_cfg.lr}
            history.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
            if on_iteration:
                on_iteration(row)
    finally:
        if sink:
            sink.close()
    return TrainResult(W, history)
