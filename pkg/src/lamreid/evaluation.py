"""Gallery ranking, CMC curves, mean average precision and the repeat protocol."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import network

CSV_SCHEMA_VERSION = 1
JSON_SCHEMA_VERSION = 1


def extract_features(params, images, batch_size: int = 32) -> np.ndarray:
    """One feature row per image; batch-norm runs on its running statistics."""
    images = np.asarray(images)
    out = []
    for s in range(0, len(images), batch_size):
        f, _ = network.forward(params, images[s:s + batch_size], mode="inference")
        out.append(f)
    if not out:
        return np.zeros((0, params.config.feature_dim))
    return np.concatenate(out).astype(np.float64)


def distance_matrix(probe, gallery, chunk: int = 64) -> np.ndarray:
    """Squared Euclidean distances, computed by explicit differencing."""
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    out = np.empty((len(probe), len(gallery)))
    for s in range(0, len(probe), chunk):
        diff = probe[s:s + chunk, None, :] - gallery[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


@dataclass
class RankingResult:
    """Per probe, gallery positions sorted by ascending distance."""

    probe_ids: np.ndarray
    gallery_ids: np.ndarray
    gallery_index: np.ndarray
    order: np.ndarray          # (probes, gallery) positions into the gallery arrays
    distances: np.ndarray      # (probes, gallery) sorted distances

    def ranked_ids(self) -> np.ndarray:
        return self.gallery_ids[self.order]


@dataclass
class CmcCurve:
    rates: np.ndarray   # rates[r - 1] = fraction of probes matched within rank r

    def rank(self, r: int) -> float:
        return float(self.rates[min(r, len(self.rates)) - 1])


def rank_gallery(probe_features, gallery_features, gallery_ids, gallery_index=None,
                 probe_ids=None) -> RankingResult:
    """Sort the gallery for every probe; ties go to the smaller ``gallery_index``.

    ``gallery_index`` is a stable per-image key (manifest order); it defaults
    to the position in ``gallery_features``.
    """
    gallery_features = np.asarray(gallery_features)
    if len(gallery_features) == 0:
        raise ValueError("cannot rank against an empty gallery")
    gallery_ids = np.asarray(gallery_ids)
    if gallery_index is None:
        gallery_index = np.arange(len(gallery_ids))
    gallery_index = np.asarray(gallery_index)
    D = distance_matrix(probe_features, gallery_features)
    order = np.empty(D.shape, dtype=np.int64)
    for i, row in enumerate(D):
        order[i] = np.lexsort((gallery_index, row))
    probe_ids = np.full(len(D), -1) if probe_ids is None else np.asarray(probe_ids)
    return RankingResult(probe_ids, gallery_ids, gallery_index, order, np.take_along_axis(D, order, axis=1))


def _check_truth(ranking: RankingResult):
    present = set(ranking.gallery_ids.tolist())
    for pid in ranking.probe_ids:
        if pid not in present:
            raise ValueError(f"probe identity {pid} has no image in the gallery")


def identity_ranks(ranking: RankingResult) -> np.ndarray:
    """1-based rank of each probe's true identity after collapsing to identities."""
    _check_truth(ranking)
    ranked = ranking.ranked_ids()
    out = np.empty(len(ranked), dtype=np.int64)
    for i, (row, pid) in enumerate(zip(ranked, ranking.probe_ids)):
        _, first = np.unique(row, return_index=True)
        first_positions = np.sort(first)
        out[i] = int(np.searchsorted(first_positions, np.flatnonzero(row == pid)[0])) + 1
    return out


def cmc_curve(ranking: RankingResult) -> CmcCurve:
    """Identity-level CMC: multi-shot galleries count an identity at its best image."""
    ranks = identity_ranks(ranking)
    n_ids = len(np.unique(ranking.gallery_ids))
    counts = np.bincount(ranks, minlength=n_ids + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(ranks))


def average_precision(ranked_ids, pid) -> float:
    hits = np.asarray(ranked_ids) == pid
    if not hits.any():
        raise ValueError(f"probe identity {pid} has no image in the gallery")
    positions = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(positions) + 1) / positions))


def mean_average_precision(ranking: RankingResult) -> float:
    ranked = ranking.ranked_ids()
    return float(np.mean([average_precision(r, p) for r, p in zip(ranked, ranking.probe_ids)]))


@dataclass
class ProtocolResult:
    cmc_mean: np.ndarray
    cmc_std: np.ndarray
    map_mean: float
    map_std: float
    curves: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    rankings: list = field(default_factory=list)

    def rank(self, r: int) -> float:
        return float(self.cmc_mean[min(r, len(self.cmc_mean)) - 1])


def repeat_protocol(dataset, params, repeats: int = 10, seed: int = 0, mode: str = "single",
                    ids=None, features=None) -> ProtocolResult:
    """Average CMC/mAP over random probe/gallery draws of the test identities.

    Probes come from camera A, gallery from camera B. In ``single`` mode each
    repeat draws one probe and one gallery image per identity; ``multi`` uses
    every image, so all repeats agree.
    """
    ids = list(dataset.test_ids if ids is None else ids)
    if len(ids) < 2:
        raise ValueError("evaluation needs at least two identities")
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    pool = np.concatenate([dataset.indices(ids, 0), dataset.indices(ids, 1)])
    if features is None:
        feats = extract_features(params, dataset.images[pool])
    else:
        feats = features
    row_of = {int(ix): k for k, ix in enumerate(pool)}
    rng = np.random.default_rng(seed)
    curves, maps, rankings = [], [], []
    for _ in range(repeats):
        if mode == "single":
            probes = np.array([rng.choice(dataset.indices([p], 0)) for p in ids])
            gallery = np.array([rng.choice(dataset.indices([p], 1)) for p in ids])
        else:
            probes, gallery = dataset.indices(ids, 0), dataset.indices(ids, 1)
        ranking = rank_gallery(feats[[row_of[i] for i in probes]], feats[[row_of[i] for i in gallery]],
                               dataset.person_ids[gallery], gallery_index=gallery,
                               probe_ids=dataset.person_ids[probes])
        curves.append(cmc_curve(ranking).rates)
        maps.append(mean_average_precision(ranking))
        rankings.append(ranking)
    curves_arr = np.asarray(curves)
    return ProtocolResult(curves_arr.mean(axis=0), curves_arr.std(axis=0), float(np.mean(maps)),
                          float(np.std(maps)), curves, maps, rankings)


def write_cmc_csv(path, result: ProtocolResult):
    with open(path, "w", newline="") as fh:
        fh.write(f"# lamreid cmc schema_version={CSV_SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["rank", "mean", "std"])
        for r, (m, s) in enumerate(zip(result.cmc_mean, result.cmc_std), start=1):
            w.writerow([r, repr(float(m)), repr(float(s))])


def write_rankings_csv(path, ranking: RankingResult, top_k: int = 10, gallery_image_ids=None):
    """One row per probe: its identity and the top-k gallery identities with distances."""
    k = min(top_k, ranking.order.shape[1])
    with open(path, "w", newline="") as fh:
        fh.write(f"# lamreid rankings schema_version={CSV_SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["probe_id", "rank", "gallery_id", "gallery_index", "distance"])
        for i, pid in enumerate(ranking.probe_ids):
            for r in range(k):
                j = ranking.order[i, r]
                w.writerow([int(pid), r + 1, int(ranking.gallery_ids[j]), int(ranking.gallery_index[j]),
                            repr(float(ranking.distances[i, r]))])


def summary_dict(result: ProtocolResult, **extra) -> dict:
    out = {"schema_version": JSON_SCHEMA_VERSION,
           "rank1": result.rank(1), "rank5": result.rank(5), "rank10": result.rank(10),
           "rank1_std": float(result.cmc_std[0]), "map": result.map_mean, "map_std": result.map_std,
           "repeats": len(result.curves), "gallery_identities": len(result.cmc_mean)}
    out.update(extra)
    return out


def write_summary_json(path, result: ProtocolResult, **extra):
    with open(path, "w") as fh:
        json.dump(summary_dict(result, **extra), fh, indent=2, sort_keys=True)
        fh.write("\n")
