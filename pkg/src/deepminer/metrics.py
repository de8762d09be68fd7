"""Retrieval evaluation: Euclidean distances, CMC and mAP with cross-camera filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGallery, ShapeMismatch


@dataclass
class EvalResult:
    dist: np.ndarray
    cmc: np.ndarray  # cmc[k - 1] = Rank-k
    map: float
    per_query_ap: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    @property
    def rank1(self) -> float:
        return self.rank(1)

    def to_lines(self, ranks=None) -> list[str]:
        ranks = ranks or range(1, len(self.cmc) + 1)
        return [f"mAP {self.map:.6f}"] + [f"Rank-{k} {self.cmc[k - 1]:.6f}" for k in ranks]

    def format(self, ranks=None) -> str:
        return "\n".join(self.to_lines(ranks)) + "\n"


def parse_metrics(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, value = line.split()
            out[key] = float(value)
    return out


def pairwise_dist(q, g) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeMismatch(f"cannot compare features {q.shape} with {g.shape}")
    out = np.empty((len(q), len(g)))
    # row blocks keep the (rows, Ng, d) difference tensor small
    step = max(1, 2_000_000 // max(1, len(g) * q.shape[1]))
    for i in range(0, len(q), step):
        diff = q[i:i + step, None, :] - g[None, :, :]
        out[i:i + step] = np.sqrt((diff * diff).sum(axis=2))
    return out


def evaluate(dist, q_ids, g_ids, q_cams, g_cams, k_max: int = 10, *, cross_camera: bool = True,
             exclude_self: bool = False) -> EvalResult:
    """CMC and mAP over the queries that keep at least one correct gallery match.

    Gallery items sharing both identity and camera with a query are ignored when
    ``cross_camera`` is set; ``exclude_self`` drops gallery index i for query i.
    Ranking is by ascending distance, ties broken by gallery index.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    if dist.ndim != 2 or dist.shape != (len(q_ids), len(g_ids)):
        raise ShapeMismatch(f"distance matrix {dist.shape} vs {len(q_ids)} queries x {len(g_ids)} gallery")
    if len(q_cams) != len(q_ids) or len(g_cams) != len(g_ids):
        raise ShapeMismatch("camera ids must align with identities")
    if exclude_self and dist.shape[0] != dist.shape[1]:
        raise ShapeMismatch("exclude_self needs a square distance matrix")
    if len(g_ids) == 0:
        raise EmptyGallery("gallery is empty")

    hits = np.zeros(k_max)
    aps, skipped = [], []
    for qi in range(len(q_ids)):
        order = np.argsort(dist[qi], kind="stable")
        keep = np.ones(len(g_ids), dtype=bool)
        if cross_camera:
            keep &= ~((g_ids == q_ids[qi]) & (g_cams == q_cams[qi]))
        if exclude_self:
            keep[qi] = False
        order = order[keep[order]]
        matches = g_ids[order] == q_ids[qi]
        if not matches.any():
            skipped.append(qi)
            continue
        first = int(np.argmax(matches))
        if first < k_max:
            hits[first:] += 1
        ranks = np.flatnonzero(matches) + 1
        # fsum: exactly rounded, so AP and mAP do not depend on summation order
        aps.append(math.fsum(np.arange(1, len(ranks) + 1) / ranks) / len(ranks))

    if not aps:
        raise EmptyGallery("no query has a valid gallery match after filtering")
    return EvalResult(dist=dist, cmc=hits / len(aps), map=math.fsum(aps) / len(aps), per_query_ap=aps,
                      skipped=skipped)


def evaluate_model(model, query_set, gallery_set, k_max: int = 10, **kwargs) -> EvalResult:
    """Embed both sets with the eval-mode model and score the retrieval."""
    q = model.embed(query_set.images())
    g = model.embed(gallery_set.images())
    return evaluate(pairwise_dist(q, g), query_set.identities(), gallery_set.identities(),
                    query_set.cameras(), gallery_set.cameras(), k_max, **kwargs)
