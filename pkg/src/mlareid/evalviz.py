"""Retrieval metrics with the cross-camera protocol, and Grad-CAM export.

Evaluation ranks the gallery per query by descending cosine similarity,
excluding gallery entries that share both pid and camera with the query
(the standard market-style protocol); ties break by gallery index.
Queries with no valid positive are excluded from both averages and
counted. Heatmaps weight the post-attention feature map by the spatial
mean of the score gradient per channel, rectify, and max-normalize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, global_avg_pool, l2_normalize
from .backbone import BackboneParams, forward_to_featuremap
from .contrast import MemoryDictionary
from .dataio import ImageRecord, bilinear_upsample, read_ppm, write_ppm
from .errors import ContractError


@dataclass
class RetrievalMetrics:
    map_score: float
    cmc: dict[int, float]  # rank -> accuracy, ranks 1, 5, 10
    queries_evaluated: int
    queries_excluded: int

    def rows(self) -> list[tuple[str, float]]:
        out = [("mAP", self.map_score)]
        out += [(f"top{k}", self.cmc[k]) for k in sorted(self.cmc)]
        out += [
            ("queries_evaluated", float(self.queries_evaluated)),
            ("queries_excluded", float(self.queries_excluded)),
        ]
        return out


@dataclass
class Heatmap:
    grid: np.ndarray  # [h', w'] floats in [0, 1]
    source_path: str
    target: str  # human-readable score description


CMC_RANKS = (1, 5, 10)


def evaluate(
    query_features: np.ndarray,
    query_pids: np.ndarray,
    query_camids: np.ndarray,
    gallery_features: np.ndarray,
    gallery_pids: np.ndarray,
    gallery_camids: np.ndarray,
) -> RetrievalMetrics:
    """mAP and CMC over all queries with valid positives."""
    query_pids = np.asarray(query_pids)
    query_camids = np.asarray(query_camids)
    gallery_pids = np.asarray(gallery_pids)
    gallery_camids = np.asarray(gallery_camids)
    aps: list[float] = []
    cmc_hits = {k: 0 for k in CMC_RANKS}
    excluded = 0

    for q, qpid, qcam in zip(query_features, query_pids, query_camids):
        valid = ~((gallery_pids == qpid) & (gallery_camids == qcam))
        sims = gallery_features[valid] @ q
        pids = gallery_pids[valid]
        order = np.argsort(-sims, kind="stable")  # descending, index-stable ties
        hits = pids[order] == qpid
        positions = np.flatnonzero(hits)
        if positions.size == 0:
            excluded += 1
            continue
        ranks = positions + 1.0
        aps.append(float(np.mean(np.arange(1, positions.size + 1) / ranks)))
        for k in CMC_RANKS:
            if positions[0] < k:
                cmc_hits[k] += 1

    evaluated = len(aps)
    if evaluated == 0:
        return RetrievalMetrics(0.0, {k: 0.0 for k in CMC_RANKS}, 0, excluded)
    return RetrievalMetrics(
        map_score=float(np.mean(aps)),
        cmc={k: cmc_hits[k] / evaluated for k in CMC_RANKS},
        queries_evaluated=evaluated,
        queries_excluded=excluded,
    )


def write_metrics_csv(metrics: RetrievalMetrics, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in metrics.rows():
            writer.writerow([name, np.format_float_positional(value, unique=True)])


def cam_from_gradients(fmap: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Rectified gradient-weighted channel sum, normalized to max 1."""
    weights = grads.mean(axis=(0, 1))  # [c]
    cam = np.maximum(fmap @ weights, 0.0)  # [h', w']
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def grad_cam_heatmap(
    record: ImageRecord,
    params: BackboneParams,
    memory: MemoryDictionary | None = None,
    cluster_id: int | None = None,
) -> Heatmap:
    """Spatial evidence for a cluster logit, or for the embedding energy.

    With a memory the score is the target cluster's temperature-scaled
    logit; without one it is the squared pre-normalization embedding,
    whose gradient still carries spatial structure (the normalized
    embedding has constant norm and would give a zero map).
    """
    x = Tensor(record.pixels[None, ...])
    fmap = forward_to_featuremap(x, params, training=False)
    pooled = global_avg_pool(fmap)
    projected = pooled @ params.embed_w + params.embed_b

    if memory is not None:
        if cluster_id is None or not 0 <= cluster_id < memory.k:
            raise ContractError(
                f"cluster id {cluster_id} is not in [0,{memory.k})"
            )
        feat = l2_normalize(projected, axis=-1)
        score = (feat * Tensor(memory.centroids[cluster_id][None, :] / memory.tau)).sum()
        target = f"cluster {cluster_id} logit"
    else:
        score = (projected * projected).sum()
        target = "embedding energy"
    score.backward()
    grid = cam_from_gradients(fmap.data[0], fmap.grad[0])
    return Heatmap(grid=grid, source_path=record.path, target=target)


def export_heatmap(hm: Heatmap, out_base: str | Path, source_pixels: np.ndarray | None = None) -> None:
    """Write <base>.csv (the raw grid) and <base>.ppm (blended overlay).

    The overlay upsamples the grid to the source image size, maps it
    through a blue-to-red ramp and alpha-blends at 0.5.
    """
    out_base = Path(out_base)
    with open(out_base.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in hm.grid:
            writer.writerow([f"{v:.17g}" for v in row])

    if source_pixels is None:
        source_pixels = read_ppm(hm.source_path)
    h, w, _ = source_pixels.shape
    heat = bilinear_upsample(hm.grid, h, w)
    ramp = np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=-1)
    overlay = 0.5 * source_pixels + 0.5 * ramp
    write_ppm(out_base.with_suffix(".ppm"), overlay)


def load_heatmap_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
