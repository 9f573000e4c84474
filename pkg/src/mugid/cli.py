"""Command-line interface: enroll, identify, benchmark, synthesize, visualize.

Exit codes: 0 success, 1 usage error, 2 data/format error. Diagnostics go to
stderr; results go to stdout or the file named by --out.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .evaluation import (ManipulationSpec, report_summary_table, report_to_text,
                         run_benchmark, synthesize_manipulation)
from .gallery import enroll, identify, load_index, save_index
from .imaging import (GrayImage, Overlay, load_image, save_image,
                      save_visualization)
from .matching import MatchParams, ratio_match, verify_matches
from .sift import SiftParams, extract_features

_SIFT_DEFAULTS = SiftParams()
_MATCH_DEFAULTS = MatchParams()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_sift_flags(parser):
    g = parser.add_argument_group("detector parameters")
    g.add_argument("--octaves", type=int, default=None,
                   help="octave count (default: as many as fit)")
    g.add_argument("--scales-per-octave", type=int,
                   default=_SIFT_DEFAULTS.scales_per_octave,
                   help="DoG scales per octave (default: %(default)s)")
    g.add_argument("--base-sigma", type=float, default=_SIFT_DEFAULTS.base_sigma,
                   help="blur of the first pyramid level (default: %(default)s)")
    g.add_argument("--assumed-blur", type=float,
                   default=_SIFT_DEFAULTS.assumed_input_blur,
                   help="blur assumed already present in the input (default: %(default)s)")
    g.add_argument("--contrast-threshold", type=float,
                   default=_SIFT_DEFAULTS.contrast_threshold,
                   help="minimum |DoG| at a keypoint (default: %(default)s)")
    g.add_argument("--edge-ratio", type=float, default=_SIFT_DEFAULTS.edge_ratio,
                   help="principal-curvature ratio bound (default: %(default)s)")
    g.add_argument("--peak-ratio", type=float,
                   default=_SIFT_DEFAULTS.orientation_peak_ratio,
                   help="orientation peak acceptance fraction (default: %(default)s)")
    g.add_argument("--descriptor-clamp", type=float,
                   default=_SIFT_DEFAULTS.descriptor_clamp,
                   help="descriptor component cap (default: %(default)s)")
    g.add_argument("--no-upsample", action="store_true",
                   help="skip the initial x2 upsampling of the input")


def _sift_params(args) -> SiftParams:
    return SiftParams(
        octaves=args.octaves,
        scales_per_octave=args.scales_per_octave,
        base_sigma=args.base_sigma,
        assumed_input_blur=args.assumed_blur,
        contrast_threshold=args.contrast_threshold,
        edge_ratio=args.edge_ratio,
        orientation_peak_ratio=args.peak_ratio,
        descriptor_clamp=args.descriptor_clamp,
        upsample=not args.no_upsample,
    )


def _add_match_flags(parser):
    g = parser.add_argument_group("matching parameters")
    g.add_argument("--ratio-threshold", type=float,
                   default=_MATCH_DEFAULTS.ratio_threshold,
                   help="nearest/second-nearest acceptance ratio (default: %(default)s)")
    g.add_argument("--angle-tolerance", type=float,
                   default=_MATCH_DEFAULTS.angle_tolerance,
                   help="triple angle tolerance, radians (default: %(default)s)")
    g.add_argument("--ratio-tolerance", type=float,
                   default=_MATCH_DEFAULTS.ratio_tolerance,
                   help="triple length-ratio tolerance (default: %(default)s)")
    g.add_argument("--max-triples", type=int, default=_MATCH_DEFAULTS.max_triples,
                   help="triple sampling cap (default: %(default)s)")
    g.add_argument("--quorum", type=float,
                   default=_MATCH_DEFAULTS.consistency_quorum,
                   help="per-pair consistency quorum (default: %(default)s)")
    g.add_argument("--match-seed", type=int, default=_MATCH_DEFAULTS.seed,
                   help="seed for triple sampling (default: %(default)s)")


def _match_params(args) -> MatchParams:
    return MatchParams(
        ratio_threshold=args.ratio_threshold,
        angle_tolerance=args.angle_tolerance,
        ratio_tolerance=args.ratio_tolerance,
        max_triples=args.max_triples,
        consistency_quorum=args.quorum,
        seed=args.match_seed,
    )


def _add_manipulation_flags(parser, require_severity: bool):
    g = parser.add_argument_group("manipulation parameters")
    if require_severity:
        g.add_argument("--severity", type=float, required=True,
                       help="node displacement bound as a fraction of width")
    else:
        g.add_argument("--severity", type=float, action="append", default=None,
                       help="severity value; repeat for a sweep (default: 0.03)")
    g.add_argument("--grid", type=int, default=6,
                   help="control nodes per side (default: %(default)s)")
    g.add_argument("--gamma", type=float, default=1.0,
                   help="photometric exponent (default: %(default)s)")
    g.add_argument("--smooth-sigma", type=float, default=None,
                   help="optional blur applied after warping")


def _collect_items(args) -> list:
    """(identity, path) pairs from a manifest or from filename stems."""
    items = []
    if args.manifest:
        for line_no, line in enumerate(Path(args.manifest).read_text().splitlines(), 1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(
                    f"{args.manifest}:{line_no}: expected 'id<TAB>path'"
                )
            identity, path = line.split("\t", 1)
            items.append((identity.strip(), path.strip()))
    for path in args.images:
        items.append((Path(path).stem, path))
    if not items:
        raise UsageError("no gallery images given (positional paths or --manifest)")
    return items


def _cmd_enroll(args) -> int:
    index = enroll(_collect_items(args), sift_params=_sift_params(args))
    save_index(index, args.out)
    total = sum(len(fs) for _, fs in index.entries)
    print(f"enrolled {len(index.entries)} images ({total} keypoints) -> {args.out}",
          file=sys.stderr)
    return 0


def _cmd_identify(args) -> int:
    index = load_index(args.index)
    result = identify(index, args.query, _match_params(args),
                      include_pca=args.pca, workers=args.workers)
    lines = ["rank\tidentity\tverified\tmean_distance\traw_matches"]
    for i, entry in enumerate(result.ranking[: args.top], 1):
        lines.append(
            f"{i}\t{entry.identity}\t{entry.verified_count}"
            f"\t{entry.mean_distance:.6g}\t{entry.raw_matches}"
        )
    if result.pca_ranking is not None:
        lines.append("")
        lines.append("pca_rank\tidentity\tdistance")
        for i, (identity, dist) in enumerate(result.pca_ranking[: args.top], 1):
            lines.append(f"{i}\t{identity}\t{dist:.6g}")
    for flag in result.flags:
        print(f"warning: {flag}", file=sys.stderr)
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _cmd_benchmark(args) -> int:
    severities = args.severity if args.severity else [0.03]
    specs = [
        ManipulationSpec(severity=s, grid=args.grid, gamma=args.gamma,
                         smooth_sigma=args.smooth_sigma)
        for s in severities
    ]
    report = run_benchmark(
        _collect_items(args), specs, sift_params=_sift_params(args),
        match_params=_match_params(args), n_seeds=args.seeds,
        master_seed=args.master_seed, workers=args.workers,
    )
    # summary table on stdout when the machine report goes to a file;
    # otherwise stdout carries the report and the table moves to stderr
    print(report_summary_table(report), file=sys.stdout if args.out else sys.stderr)
    _emit(report_to_text(report), args.out)
    return 0


def _cmd_synthesize(args) -> int:
    spec = ManipulationSpec(severity=args.severity, grid=args.grid,
                            gamma=args.gamma, smooth_sigma=args.smooth_sigma,
                            seed=args.seed)
    save_image(synthesize_manipulation(load_image(args.input), spec), args.out)
    return 0


def _cmd_visualize(args) -> int:
    params = _sift_params(args)
    img = load_image(args.input)
    features = extract_features(img, params, image_id="input")
    overlays = [Overlay("point", ((kp.x, kp.y),)) for kp in features.keypoints]
    if args.match_against:
        other = load_image(args.match_against)
        other_fs = extract_features(other, params, image_id="other")
        pairs = ratio_match(features, other_fs, _match_params(args))
        verified = verify_matches(pairs, features.keypoints, other_fs.keypoints,
                                  _match_params(args))
        h = max(img.height, other.height)
        canvas = np.zeros((h, img.width + other.width))
        canvas[: img.height, : img.width] = img.data
        canvas[: other.height, img.width :] = other.data
        overlays = []
        for p in verified.survivors:
            a = features.keypoints[p.query_index]
            b = other_fs.keypoints[p.gallery_index]
            overlays.append(Overlay("line", ((a.x, a.y), (b.x + img.width, b.y))))
        img = GrayImage.from_array(canvas)
        print(f"{len(pairs)} ratio matches, {verified.verified_count} verified",
              file=sys.stderr)
    else:
        print(f"{len(features)} keypoints", file=sys.stderr)
    save_visualization(img, overlays, args.out)
    return 0


def _emit(text: str, out_path) -> None:
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mugid",
                     description="Identify manipulated images against an enrolled gallery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enroll", help="build an index from gallery images",
                       parents=[], description="Enroll gallery images into an index file.")
    p.add_argument("images", nargs="*", help="gallery images (id = filename stem)")
    p.add_argument("--manifest", help="file with one 'id<TAB>path' per line")
    p.add_argument("--out", required=True, help="index file to write")
    _add_sift_flags(p)
    p.set_defaults(func=_cmd_enroll)

    p = sub.add_parser("identify", help="rank gallery identities for a query image")
    p.add_argument("query", help="query image (PGM/PPM)")
    p.add_argument("--index", required=True, help="index file from 'enroll'")
    p.add_argument("--pca", action="store_true", help="also report the eigenface ranking")
    p.add_argument("--top", type=int, default=10, help="rows to print (default: %(default)s)")
    p.add_argument("--out", help="write the ranking here instead of stdout")
    p.add_argument("--workers", type=int, default=1, help="matcher threads")
    _add_match_flags(p)
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("benchmark", help="run the manipulation benchmark")
    p.add_argument("images", nargs="*", help="gallery images (id = filename stem)")
    p.add_argument("--manifest", help="file with one 'id<TAB>path' per line")
    p.add_argument("--seeds", type=int, default=5,
                   help="repetitions per severity (default: %(default)s)")
    p.add_argument("--master-seed", type=int, default=0,
                   help="master seed for query synthesis (default: %(default)s)")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--workers", type=int, default=1, help="query evaluation threads")
    _add_manipulation_flags(p, require_severity=False)
    _add_sift_flags(p)
    _add_match_flags(p)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("synthesize", help="write a manipulated copy of an image")
    p.add_argument("input", help="source image")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--seed", type=int, default=0, help="warp seed (default: %(default)s)")
    _add_manipulation_flags(p, require_severity=True)
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("visualize", help="draw keypoints or verified matches")
    p.add_argument("input", help="image to visualize")
    p.add_argument("--match-against", help="second image; draw verified match lines")
    p.add_argument("--out", required=True, help="output PGM path")
    _add_sift_flags(p)
    _add_match_flags(p)
    p.set_defaults(func=_cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
