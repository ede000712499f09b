"""Retrieval metrics: distance matrices, CMC and mAP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .numerics import ContractError, DimensionError


@dataclass
class RankingReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    skipped: int = 0
    config: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        return {
            "cmc": [float(v) for v in self.cmc],
            "map": None if np.isnan(self.map) else float(self.map),
            "rank1": self.rank1,
            "skipped_queries": int(self.skipped),
            "config": self.config,
        }

    def write(self, path: str | Path, per_query_csv: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if per_query_csv is not None:
            with open(per_query_csv, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["query", "ap"])
                for i, ap in enumerate(self.per_query_ap):
                    writer.writerow([i, repr(float(ap))])


def pairwise_distance(queries, gallery, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"distance operands {q.shape} and {g.shape} are not conformable")
    if metric == "euclidean":
        sq = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            raise ContractError("cosine distance is undefined for zero-norm vectors")
        return 1.0 - (q @ g.T) / (qn[:, None] * gn[None, :])
    raise ContractError(f"unknown metric {metric!r}")


def _ranked_matches(distances, query_labels, gallery_labels, query_cams, gallery_cams, single_gallery):
    """Per query: boolean match vector over the valid gallery in ranked order, or None."""
    d = np.asarray(distances, dtype=np.float64)
    ql, gl = np.asarray(query_labels), np.asarray(gallery_labels)
    nq, ng = d.shape
    if len(ql) != nq or len(gl) != ng:
        raise DimensionError(f"labels ({len(ql)}, {len(gl)}) do not match distances {d.shape}")
    if not single_gallery:
        qc, gc = np.asarray(query_cams), np.asarray(gallery_cams)
        if len(qc) != nq or len(gc) != ng:
            raise DimensionError(f"cameras ({len(qc)}, {len(gc)}) do not match distances {d.shape}")
    out = []
    for i in range(nq):
        order = np.argsort(d[i], kind="stable")
        if single_gallery:
            keep = np.ones(ng, dtype=bool)
        else:
            keep = ~((gl[order] == ql[i]) & (gc[order] == qc[i]))
        matches = gl[order][keep] == ql[i]
        out.append(matches if matches.any() else None)
    return out


def cmc_curve(
    distances,
    query_labels,
    gallery_labels,
    query_cams=None,
    gallery_cams=None,
    max_rank: int = 20,
    single_gallery: bool = False,
) -> np.ndarray:
    """``cmc[k]``: fraction of valid queries whose first true match ranks within ``k + 1``.

    Gallery entries sharing both identity and camera with the query are
    dropped unless ``single_gallery``.  Queries left without any match are
    skipped (see :func:`count_skipped`).  Ties rank by gallery index.
    """
    ranked = [m for m in _ranked_matches(distances, query_labels, gallery_labels,
                                          query_cams, gallery_cams, single_gallery) if m is not None]
    cmc = np.zeros(max_rank)
    if not ranked:
        return cmc
    for matches in ranked:
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc[first:] += 1.0
    return cmc / len(ranked)


def count_skipped(distances, query_labels, gallery_labels, query_cams=None, gallery_cams=None,
                  single_gallery: bool = False) -> int:
    ranked = _ranked_matches(distances, query_labels, gallery_labels, query_cams, gallery_cams, single_gallery)
    return sum(m is None for m in ranked)


def mean_ap(distances, query_labels, gallery_labels, query_cams=None, gallery_cams=None,
            single_gallery: bool = False) -> tuple[float, np.ndarray]:
    """Mean over valid queries of the average precision at each true match.

    AP is a ratio of integer ranks, so it is summed exactly and rounded once.
    """
    aps = []
    for matches in _ranked_matches(distances, query_labels, gallery_labels, query_cams, gallery_cams, single_gallery):
        if matches is None:
            continue
        ranks = np.flatnonzero(matches) + 1
        aps.append(sum(Fraction(k + 1, int(r)) for k, r in enumerate(ranks)) / len(ranks))
    per_query = np.asarray([float(a) for a in aps])
    return (float(sum(aps) / len(aps)) if aps else float("nan")), per_query


def evaluate(
    query_features,
    gallery_features,
    query_labels,
    gallery_labels,
    query_cams=None,
    gallery_cams=None,
    metric: str = "euclidean",
    normalize: bool = True,
    max_rank: int = 20,
    single_gallery: bool = False,
) -> RankingReport:
    """Rank the gallery for every query and summarise as CMC and mAP.

    With ``normalize`` the descriptors are L2-normalised first, which makes
    euclidean ranking agree with cosine ranking.
    """
    q = np.asarray(query_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    if len(q) == 0 or len(g) == 0:
        raise ContractError(f"empty query ({len(q)}) or gallery ({len(g)}) set")
    if normalize:
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
    d = pairwise_distance(q, g, metric)
    args = (d, query_labels, gallery_labels, query_cams, gallery_cams)
    cmc = cmc_curve(*args, max_rank=max_rank, single_gallery=single_gallery)
    skipped = count_skipped(*args, single_gallery=single_gallery)
    if single_gallery:
        m, per_query = float("nan"), np.zeros(0)
    else:
        m, per_query = mean_ap(*args)
    config = {"metric": metric, "normalize": normalize, "max_rank": max_rank, "single_gallery": single_gallery}
    return RankingReport(cmc, m, per_query, skipped, config)
