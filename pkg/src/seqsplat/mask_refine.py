"""Refine segmenter transient masks with per-entity photometric error.

A frame's transient mask is grown by entity segments that the model fails
to reproduce (high mean error) and shrunk by segments it reproduces well.
Only small entities and small mask components take part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class EntityStats:
    entity_id: int
    area: int
    mean_error: float


@dataclass(frozen=True)
class Thresholds:
    rho1: float
    rho2: float
    rho_pho: float


def entity_error(err_map: np.ndarray, entity_map: np.ndarray) -> list[EntityStats]:
    """Area and mean error of every nonzero label, ordered by label."""
    err_map = np.asarray(err_map, np.float64)
    labels = np.asarray(entity_map)
    if err_map.shape != labels.shape:
        raise ValueError(f"error map {err_map.shape} and entity map {labels.shape} differ")
    flat = labels.ravel().astype(np.int64)
    area = np.bincount(flat)
    total = np.bincount(flat, weights=err_map.ravel())
    ids = np.nonzero(area)[0]
    return [EntityStats(int(e), int(area[e]), float(total[e] / area[e])) for e in ids if e != 0]


def pho_threshold(stats: list[EntityStats]) -> float:
    """``mean - std / 2`` of the entities' mean errors (population std)."""
    if not stats:
        raise ValueError("photometric threshold needs at least one entity")
    r = np.array([s.mean_error for s in stats])
    return float(r.mean() - r.std() / 2.0)


def sam_components(sam: np.ndarray):
    """4-connected components of the transient mask: ``(labels, areas)`` with ``areas[0]`` unused."""
    labels, n = ndimage.label(np.asarray(sam) != 0)
    return labels, np.bincount(labels.ravel(), minlength=n + 1)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return np.asarray(mask, bool).copy()
    return ndimage.binary_dilation(np.asarray(mask, bool), structure=np.ones((2 * radius + 1,) * 2, bool))


def area_thresholds(entity_areas, sam_areas, rho1_pct: float = 70, rho2_pct: float = 80):
    """Percentile cut-offs; an empty population gives +inf (nothing discarded)."""
    rho1 = float(np.percentile(entity_areas, rho1_pct)) if len(entity_areas) else np.inf
    rho2 = float(np.percentile(sam_areas, rho2_pct)) if len(sam_areas) else np.inf
    return rho1, rho2


def dataset_thresholds(frames, rho1_pct: float = 70, rho2_pct: float = 80) -> Thresholds:
    """Thresholds pooled over many frames.

    ``frames`` yields ``(sam, entity_map, err_map)`` triples.
    """
    frames = list(frames)
    ent_areas, sam_areas, stats = [], [], []
    per_frame = []
    for sam, ent, err in frames:
        st = entity_error(err, ent)
        per_frame.append(st)
        ent_areas += [s.area for s in st]
        _, comp = sam_components(sam)
        sam_areas += list(comp[1:])
    rho1, rho2 = area_thresholds(ent_areas, sam_areas, rho1_pct, rho2_pct)
    for st in per_frame:
        stats += [s for s in st if s.area < rho1]
    rho_pho = pho_threshold(stats) if stats else np.inf
    return Thresholds(rho1, rho2, rho_pho)


def refine_masks(sam: np.ndarray, entity_map: np.ndarray, err_map: np.ndarray,
                 rho1_pct: float = 70, rho2_pct: float = 80, dilation_px: int = 3,
                 thresholds: Thresholds | None = None, drop_large_sam: bool = False) -> np.ndarray:
    """Refined binary transient mask for one frame.

    Thresholds are computed from this frame alone unless ``thresholds`` is
    given (the trainer pools them over the whole training set). Large mask
    components are kept in the output but cannot select entities; set
    ``drop_large_sam`` to remove them from the output as well.
    """
    sam = np.asarray(sam) != 0
    labels = np.asarray(entity_map)
    if sam.shape != labels.shape or sam.shape != np.shape(err_map):
        raise ValueError("sam mask, entity map and error map must share a shape")
    stats = entity_error(err_map, labels)
    comp_labels, comp_areas = sam_components(sam)
    if thresholds is None:
        rho1, rho2 = area_thresholds([s.area for s in stats], comp_areas[1:], rho1_pct, rho2_pct)
        small = [s for s in stats if s.area < rho1]
        rho_pho = pho_threshold(small) if small else np.inf
    else:
        rho1, rho2, rho_pho = thresholds.rho1, thresholds.rho2, thresholds.rho_pho

    small_comp = comp_areas < rho2
    small_comp[0] = False
    seed = small_comp[comp_labels]
    out = sam.copy()
    if drop_large_sam:
        out = seed.copy()
    grown = dilate(seed, dilation_px)

    for s in stats:
        if s.area >= rho1:
            continue
        pix = labels == s.entity_id
        if not (pix & grown).any():
            continue
        if s.mean_error > rho_pho:
            out |= pix
        else:
            out &= ~pix
    return out.astype(np.uint8)
