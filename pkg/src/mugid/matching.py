"""Descriptor matching and spatial verification of match sets.

Candidate correspondences come from the nearest-neighbor ratio test. They are
then verified by checking, over triples of corresponding points, that the
directed angle between the two segments sharing the first point and the ratio
of the segment lengths agree between the query-side and gallery-side triples.
Both attributes are invariant to translation, rotation and uniform scaling,
so a consistent set of matches indicates a shared spatial layout.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi
_DEGENERATE_EPS = 1e-9


class DegenerateTripleError(ValueError):
    """Raised when a triple's anchor coincides with one of the other points."""


@dataclass(frozen=True)
class MatchParams:
    """Tunables for ratio matching and triple verification.

    ratio_threshold: accept a match when nearest distance < threshold x
        second-nearest distance.
    angle_tolerance: max |angle difference| in radians for a consistent triple.
    ratio_tolerance: max relative length-ratio difference for a consistent triple.
    max_triples: cap on evaluated triples; beyond it, seeded uniform sampling
        without replacement.
    consistency_quorum: fraction of a pair's evaluated triples that must be
        consistent for the pair to survive.
    seed: RNG seed for triple sampling.
    """

    ratio_threshold: float = 0.8
    angle_tolerance: float = 0.0873  # ~5 degrees
    ratio_tolerance: float = 0.10
    max_triples: int = 2000
    consistency_quorum: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio_threshold < 1.0:
            raise ValueError("ratio_threshold must lie in (0, 1)")
        if self.angle_tolerance <= 0 or self.ratio_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_triples < 1:
            raise ValueError("max_triples must be >= 1")
        if not 0.0 < self.consistency_quorum <= 1.0:
            raise ValueError("consistency_quorum must lie in (0, 1]")


@dataclass(frozen=True)
class MatchPair:
    query_index: int
    gallery_index: int
    distance: float


@dataclass(frozen=True)
class AlrAttributes:
    """Directed angle (in (-pi, pi]) and length ratio of a point triple."""

    angle: float
    length_ratio: float


@dataclass(frozen=True)
class VerifiedMatches:
    """Outcome of spatial verification.

    `fractions` is parallel to the *input* pair list; `survivors` holds the
    pairs that met the quorum (deduplicated per gallery keypoint), and
    `verified_count` equals len(survivors). `unverified` marks the n < 3
    fallback where no topology check was possible.
    """

    survivors: tuple
    verified_count: int
    fractions: tuple
    unverified: bool = False


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(theta + math.pi, _TWO_PI)
    if w <= 0.0:
        w += _TWO_PI
    return w - math.pi


def _wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    w = np.mod(theta + math.pi, _TWO_PI)
    w = np.where(w <= 0.0, w + _TWO_PI, w)
    return w - math.pi


def ratio_match(query, gallery, params: MatchParams) -> list[MatchPair]:
    """Nearest-neighbor ratio-test matching of query against gallery descriptors.

    For each query descriptor the nearest and second-nearest gallery
    descriptors (Euclidean) are found by exhaustive search; a pair is emitted
    iff d1 < ratio_threshold * d2. At most one match per query keypoint.
    A gallery with fewer than two descriptors yields no matches.
    """
    q = np.asarray(query.descriptors, dtype=np.float64)
    g = np.asarray(gallery.descriptors, dtype=np.float64)
    if q.shape[0] == 0 or g.shape[0] < 2:
        return []

    # Squared distances via the expansion trick (BLAS); exact distances for
    # the selected two are recomputed directly so reported values do not
    # carry the expansion's cancellation error.
    d2 = (
        np.einsum("ij,ij->i", q, q)[:, None]
        + np.einsum("ij,ij->i", g, g)[None, :]
        - 2.0 * (q @ g.T)
    )
    cand = np.argpartition(d2, 1, axis=1)[:, :2]
    vals = np.take_along_axis(d2, cand, axis=1)
    swap = (vals[:, 1] < vals[:, 0]) | (
        (vals[:, 1] == vals[:, 0]) & (cand[:, 1] < cand[:, 0])
    )
    best = np.where(swap, cand[:, 1], cand[:, 0])
    second = np.where(swap, cand[:, 0], cand[:, 1])
    d1 = np.sqrt(np.sum((q - g[best]) ** 2, axis=1))
    dn = np.sqrt(np.sum((q - g[second]) ** 2, axis=1))
    emit = d1 < params.ratio_threshold * dn
    return [
        MatchPair(int(qi), int(best[qi]), float(d1[qi]))
        for qi in np.where(emit)[0]
    ]


def alr_attributes(p1, p2, p3) -> AlrAttributes:
    """Angle from segment p1->p2 to segment p1->p3, and |p1p2| / |p1p3|.

    Raises DegenerateTripleError when p2 or p3 coincides with the anchor p1.
    """
    v2x, v2y = p2[0] - p1[0], p2[1] - p1[1]
    v3x, v3y = p3[0] - p1[0], p3[1] - p1[1]
    len2 = math.hypot(v2x, v2y)
    len3 = math.hypot(v3x, v3y)
    if len2 <= _DEGENERATE_EPS or len3 <= _DEGENERATE_EPS:
        raise DegenerateTripleError("triple has coincident points")
    angle = wrap_angle(math.atan2(v3y, v3x) - math.atan2(v2y, v2x))
    return AlrAttributes(angle=angle, length_ratio=len2 / len3)


def triple_consistent(
    q_attrs: AlrAttributes, g_attrs: AlrAttributes, params: MatchParams
) -> bool:
    """True iff angle and relative length-ratio differences are within tolerance."""
    if abs(wrap_angle(q_attrs.angle - g_attrs.angle)) > params.angle_tolerance:
        return False
    rel = abs(q_attrs.length_ratio - g_attrs.length_ratio) / max(
        q_attrs.length_ratio, g_attrs.length_ratio
    )
    return rel <= params.ratio_tolerance


def derive_seed(base_seed: int, tag: str) -> int:
    """Stable per-candidate seed so parallel verification order cannot matter."""
    return (base_seed ^ zlib.crc32(tag.encode("utf-8"))) & 0xFFFFFFFF


def _sample_triples(n: int, count: int, seed: int) -> np.ndarray:
    """`count` distinct index triples (rows sorted asc), seeded-uniform."""
    rng = np.random.default_rng(seed)
    chosen: dict = {}  # insertion-ordered set
    while len(chosen) < count:
        draw = rng.integers(0, n, size=(4 * count, 3))
        distinct = draw[
            (draw[:, 0] != draw[:, 1])
            & (draw[:, 0] != draw[:, 2])
            & (draw[:, 1] != draw[:, 2])
        ]
        distinct = np.sort(distinct, axis=1)
        for row in distinct:
            chosen[(int(row[0]), int(row[1]), int(row[2]))] = None
            if len(chosen) == count:
                break
    return np.array(list(chosen.keys()), dtype=np.intp)


def _triple_attributes(points: np.ndarray, triples: np.ndarray):
    """Vectorized angle/ratio attributes; returns (angle, ratio, degenerate_mask)."""
    p1 = points[triples[:, 0]]
    v2 = points[triples[:, 1]] - p1
    v3 = points[triples[:, 2]] - p1
    len2 = np.hypot(v2[:, 0], v2[:, 1])
    len3 = np.hypot(v3[:, 0], v3[:, 1])
    degenerate = (len2 <= _DEGENERATE_EPS) | (len3 <= _DEGENERATE_EPS)
    safe3 = np.where(len3 > 0.0, len3, 1.0)
    angle = _wrap_angle_array(
        np.arctan2(v3[:, 1], v3[:, 0]) - np.arctan2(v2[:, 1], v2[:, 0])
    )
    return angle, len2 / safe3, degenerate


def verify_matches(pairs, query_kps, gallery_kps, params: MatchParams) -> VerifiedMatches:
    """Filter matches by triple-wise spatial consistency.

    Every evaluated triple of distinct pairs votes on each member pair; a pair
    survives when its consistent-triple fraction reaches the quorum. With
    fewer than 3 pairs no topology exists to check: all pairs pass, flagged
    unverified. Surviving pairs that hit the same gallery keypoint are
    deduplicated, keeping the smallest descriptor distance.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n < 3:
        return VerifiedMatches(
            survivors=tuple(pairs),
            verified_count=n,
            fractions=tuple(1.0 for _ in pairs),
            unverified=True,
        )

    qpts = np.array(
        [(query_kps[p.query_index].x, query_kps[p.query_index].y) for p in pairs]
    )
    gpts = np.array(
        [(gallery_kps[p.gallery_index].x, gallery_kps[p.gallery_index].y) for p in pairs]
    )

    total = math.comb(n, 3)
    if total <= params.max_triples:
        triples = np.array(list(itertools.combinations(range(n), 3)), dtype=np.intp)
    else:
        triples = _sample_triples(n, params.max_triples, params.seed)

    q_ang, q_rat, q_bad = _triple_attributes(qpts, triples)
    g_ang, g_rat, g_bad = _triple_attributes(gpts, triples)
    valid = ~(q_bad | g_bad)

    ang_ok = np.abs(_wrap_angle_array(q_ang - g_ang)) <= params.angle_tolerance
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(q_rat - g_rat) / np.maximum(q_rat, g_rat)
    consistent = valid & ang_ok & (rel <= params.ratio_tolerance)

    evaluated = np.zeros(n, dtype=np.int64)
    good = np.zeros(n, dtype=np.int64)
    flat_valid = triples[valid].ravel()
    flat_good = triples[consistent].ravel()
    np.add.at(evaluated, flat_valid, 1)
    np.add.at(good, flat_good, 1)

    fractions = np.where(evaluated > 0, good / np.maximum(evaluated, 1), 0.0)
    surviving = [pairs[i] for i in range(n) if fractions[i] >= params.consistency_quorum]

    # one hit per gallery keypoint: keep the closest descriptor match
    best_by_gallery: dict = {}
    for p in surviving:
        cur = best_by_gallery.get(p.gallery_index)
        if cur is None or (p.distance, p.query_index) < (cur.distance, cur.query_index):
            best_by_gallery[p.gallery_index] = p
    survivors = tuple(
        sorted(best_by_gallery.values(), key=lambda p: (p.query_index, p.gallery_index))
    )

    return VerifiedMatches(
        survivors=survivors,
        verified_count=len(survivors),
        fractions=tuple(float(f) for f in fractions),
        unverified=False,
    )
