"""Benchmark harness: synthetic image manipulation, identification metrics,
and the keypoint-vs-eigenface comparison report.

Queries are produced by a seeded control-lattice warp (plus optional gamma
and smoothing), so the whole benchmark is reproducible from a single master
seed; severity — the node displacement bound as a fraction of image width —
is the headline difficulty knob.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .gallery import GalleryIndex, enroll, identify_image, preprocess
from .imaging import GrayImage, gaussian_blur, load_image
from .matching import MatchParams
from .sift import SiftParams

REPORT_VERSION = 1


@dataclass(frozen=True)
class ManipulationSpec:
    """Parameters of one synthetic manipulation.

    severity: bound on control-node displacement, as a fraction of image
        width (severity * width may not exceed a quarter of the width).
    grid: control nodes per side; only interior nodes move.
    gamma: photometric exponent applied after warping, in [0.5, 2].
    smooth_sigma: optional Gaussian blur applied last.
    seed: RNG seed for the node offsets.
    """

    severity: float
    grid: int = 6
    gamma: float = 1.0
    smooth_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.severity < 0:
            raise ValueError("severity must be >= 0")
        if self.grid < 2:
            raise ValueError("grid must be >= 2")
        if not 0.5 <= self.gamma <= 2.0:
            raise ValueError("gamma must lie in [0.5, 2]")
        if self.smooth_sigma is not None and self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be positive when given")


def synthesize_manipulation(img: GrayImage, spec: ManipulationSpec) -> GrayImage:
    """Warp an image by seeded random displacement of a control lattice.

    Interior nodes of a grid x grid lattice move uniformly within
    [-d, d]^2, d = severity * width; the dense displacement field is the
    bilinear interpolation of the lattice, applied as a backward warp with
    bilinear sampling and edge clamping. Gamma and optional smoothing follow.
    Deterministic for a fixed (image, spec).
    """
    d = spec.severity * img.width
    if d > img.width / 4.0:
        raise ValueError(
            f"severity {spec.severity} displaces nodes beyond a quarter "
            f"of the image width"
        )

    data = img.data
    if d > 0.0 and spec.grid > 2 and img.width > 1 and img.height > 1:
        rng = np.random.default_rng(spec.seed)
        disp = np.zeros((spec.grid, spec.grid, 2))
        disp[1:-1, 1:-1, :] = rng.uniform(-d, d, size=(spec.grid - 2, spec.grid - 2, 2))

        # lattice coordinates of every pixel
        u = np.arange(img.width) * (spec.grid - 1) / (img.width - 1)
        v = np.arange(img.height) * (spec.grid - 1) / (img.height - 1)
        iu = np.minimum(np.floor(u).astype(np.intp), spec.grid - 2)
        iv = np.minimum(np.floor(v).astype(np.intp), spec.grid - 2)
        fu = (u - iu)[None, :, None]
        fv = (v - iv)[:, None, None]

        field = (
            disp[iv][:, iu] * (1 - fv) * (1 - fu)
            + disp[iv][:, iu + 1] * (1 - fv) * fu
            + disp[iv + 1][:, iu] * fv * (1 - fu)
            + disp[iv + 1][:, iu + 1] * fv * fu
        )
        ys, xs = np.mgrid[0 : img.height, 0 : img.width]
        src_y = ys + field[:, :, 1]
        src_x = xs + field[:, :, 0]
        data = map_coordinates(data, [src_y, src_x], order=1, mode="nearest")

    if spec.gamma != 1.0:
        data = data**spec.gamma
    out = GrayImage.from_array(np.clip(data, 0.0, 1.0))
    if spec.smooth_sigma is not None:
        out = gaussian_blur(out, spec.smooth_sigma)
    return out


def identification_rate(ranks) -> float:
    """Percentage of queries whose true identity was retrieved at rank 1."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("identification rate needs at least one record")
    return 100.0 * sum(1 for r in ranks if r == 1) / len(ranks)


def cmc_curve(ranks, max_rank: int) -> np.ndarray:
    """Cumulative match characteristic: entry k-1 is the percentage of
    queries whose true identity appears at rank <= k."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    ranks = np.asarray(list(ranks))
    if ranks.size == 0:
        raise ValueError("CMC needs at least one record")
    ks = np.arange(1, max_rank + 1)
    hits = np.sum(ranks[None, :] <= ks[:, None], axis=1)
    # same arithmetic as identification_rate so entry 1 matches it exactly
    return 100.0 * hits / ranks.size


@dataclass(frozen=True)
class QueryRecord:
    spec_index: int
    seed_index: int
    query_id: str
    true_id: str
    sift_rank: int
    pca_rank: int
    verified_count: int  # of the top-ranked candidate


@dataclass
class SpecSummary:
    spec: ManipulationSpec
    sift_rates: list  # per-seed rank-1 rates
    pca_rates: list
    sift_cmc: np.ndarray  # pooled over seeds
    pca_cmc: np.ndarray


@dataclass
class BenchmarkReport:
    master_seed: int
    n_seeds: int
    gallery_ids: list
    sift_params: SiftParams
    match_params: MatchParams
    specs: list
    records: list  # QueryRecord, sorted (spec, seed, query_id)
    summaries: list  # SpecSummary per spec

    def records_for(self, spec_index: int, seed_index: int | None = None):
        return [
            r for r in self.records
            if r.spec_index == spec_index
            and (seed_index is None or r.seed_index == seed_index)
        ]

    def recount(self) -> None:
        """Re-derive every reported rate from the raw records; raises on drift."""
        for si, summary in enumerate(self.summaries):
            for seed in range(self.n_seeds):
                recs = self.records_for(si, seed)
                if identification_rate([r.sift_rank for r in recs]) != summary.sift_rates[seed]:
                    raise AssertionError(f"sift rate mismatch at spec {si} seed {seed}")
                if identification_rate([r.pca_rank for r in recs]) != summary.pca_rates[seed]:
                    raise AssertionError(f"pca rate mismatch at spec {si} seed {seed}")


def _query_seed(master_seed: int, spec_index: int, seed_index: int, query_id: str) -> int:
    tag = f"{spec_index}:{seed_index}:{query_id}".encode("utf-8")
    return (master_seed ^ zlib.crc32(tag)) & 0xFFFFFFFF


def run_benchmark(items, specs, sift_params: SiftParams | None = None,
                  match_params: MatchParams | None = None, n_seeds: int = 5,
                  master_seed: int = 0, workers: int = 1,
                  index: GalleryIndex | None = None) -> BenchmarkReport:
    """Enroll the gallery once, then query every manipulated variant.

    For each spec and each of `n_seeds` repetitions, every gallery image is
    manipulated (seed derived from the master seed) and identified with both
    the keypoint pipeline and the eigenface baseline. A fixed master seed
    reproduces the report byte for byte.
    """
    items = list(items)
    if not specs:
        raise ValueError("at least one manipulation spec is required")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    mp = match_params if match_params is not None else MatchParams()
    if index is None:
        index = enroll(items, sift_params=sift_params)

    sources = {
        identity: preprocess(load_image(path), index.target_width, index.target_height)
        for identity, path in items
    }

    tasks = [
        (si, seed, identity)
        for si, _ in enumerate(specs)
        for seed in range(n_seeds)
        for identity in sorted(sources)
    ]

    def evaluate(task):
        si, seed, identity = task
        spec = replace(specs[si], seed=_query_seed(master_seed, si, seed, identity))
        query = synthesize_manipulation(sources[identity], spec)
        result = identify_image(index, query, mp, include_pca=True)
        return QueryRecord(
            spec_index=si,
            seed_index=seed,
            query_id=identity,
            true_id=identity,
            sift_rank=result.rank_of(identity),
            pca_rank=result.pca_rank_of(identity),
            verified_count=result.ranking[0].verified_count,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(evaluate, tasks))
    else:
        records = [evaluate(t) for t in tasks]
    records.sort(key=lambda r: (r.spec_index, r.seed_index, r.query_id))

    max_rank = len(items)
    summaries = []
    for si, spec in enumerate(specs):
        by_seed = [
            [r for r in records if r.spec_index == si and r.seed_index == seed]
            for seed in range(n_seeds)
        ]
        pooled = [r for group in by_seed for r in group]
        summaries.append(SpecSummary(
            spec=spec,
            sift_rates=[identification_rate([r.sift_rank for r in g]) for g in by_seed],
            pca_rates=[identification_rate([r.pca_rank for r in g]) for g in by_seed],
            sift_cmc=cmc_curve([r.sift_rank for r in pooled], max_rank),
            pca_cmc=cmc_curve([r.pca_rank for r in pooled], max_rank),
        ))

    return BenchmarkReport(
        master_seed=master_seed,
        n_seeds=n_seeds,
        gallery_ids=[identity for identity, _ in items],
        sift_params=index.sift_params,
        match_params=mp,
        specs=list(specs),
        records=records,
        summaries=summaries,
    )


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_text(report: BenchmarkReport) -> str:
    """Deterministic key=value serialization of a benchmark report."""
    lines = [f"mugid-benchmark-report v{REPORT_VERSION}"]
    lines.append(f"master_seed={report.master_seed}")
    lines.append(f"seeds={report.n_seeds}")
    lines.append(f"gallery_size={len(report.gallery_ids)}")
    lines.append("gallery_ids=" + ",".join(report.gallery_ids))
    sp = report.sift_params
    lines.append(
        "sift_params="
        + ",".join(_fmt(v) for v in (
            sp.octaves, sp.scales_per_octave, sp.base_sigma, sp.assumed_input_blur,
            sp.contrast_threshold, sp.edge_ratio, sp.orientation_peak_ratio,
            sp.descriptor_clamp, sp.upsample,
        ))
    )
    mp = report.match_params
    lines.append(
        "match_params="
        + ",".join(_fmt(v) for v in (
            mp.ratio_threshold, mp.angle_tolerance, mp.ratio_tolerance,
            mp.max_triples, mp.consistency_quorum, mp.seed,
        ))
    )
    lines.append(f"specs={len(report.specs)}")
    for si, summary in enumerate(report.summaries):
        spec = summary.spec
        lines.append("")
        lines.append(f"[spec {si}]")
        lines.append(f"severity={_fmt(spec.severity)}")
        lines.append(f"grid={spec.grid}")
        lines.append(f"gamma={_fmt(spec.gamma)}")
        lines.append(f"smooth_sigma={_fmt(spec.smooth_sigma)}")
        lines.append("sift_rates=" + ",".join(_fmt(v) for v in summary.sift_rates))
        lines.append("pca_rates=" + ",".join(_fmt(v) for v in summary.pca_rates))
        lines.append("sift_cmc=" + ",".join(_fmt(float(v)) for v in summary.sift_cmc))
        lines.append("pca_cmc=" + ",".join(_fmt(float(v)) for v in summary.pca_cmc))
        lines.append(f"[records {si}]")
        lines.append("query_id\tseed\ttrue_id\tsift_rank\tpca_rank\tverified_count")
        for r in report.records_for(si):
            lines.append(
                f"{r.query_id}\t{r.seed_index}\t{r.true_id}"
                f"\t{r.sift_rank}\t{r.pca_rank}\t{r.verified_count}"
            )
    lines.append("")
    return "\n".join(lines)


def report_summary_table(report: BenchmarkReport) -> str:
    """Small human-readable summary of rank-1 rates per severity."""
    rows = ["severity  keypoint-rate  eigenface-rate"]
    for summary in report.summaries:
        sift = np.mean(summary.sift_rates)
        pca = np.mean(summary.pca_rates)
        rows.append(f"{summary.spec.severity:<9.4g} {sift:>12.1f}% {pca:>14.1f}%")
    return "\n".join(rows)
