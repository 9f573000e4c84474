"""Gallery enrollment, persistent index serialization, and query identification.

The index file carries everything a query needs: the preprocessing recipe,
the detector parameters, every enrolled feature set, and the trained
eigenface model, all little-endian with a trailing CRC-32.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import eigenfaces, matching
from .eigenfaces import EigenModel, train_eigenmodel
from .imaging import GrayImage, load_image, resize_bilinear
from .matching import MatchParams, ratio_match, verify_matches
from .sift import FeatureSet, Keypoint, SiftParams, extract_features

MAGIC = b"MGID"
FORMAT_VERSION = 1
GRAYSCALE_RULES = ("bt601",)
DEFAULT_TARGET = (300, 300)


class IndexFormatError(ValueError):
    """Structurally invalid index data; `offset` locates the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IndexCorruptionError(ValueError):
    """Checksum mismatch: the index bytes were altered after writing."""


class EnrollmentError(ValueError):
    """A gallery image could not be enrolled; names the offending identity."""


@dataclass
class GalleryIndex:
    version: int
    target_width: int
    target_height: int
    grayscale_rule: str
    sift_params: SiftParams
    entries: list  # [(identity, FeatureSet), ...]
    eigenmodel: EigenModel

    def __post_init__(self):
        ids = [identity for identity, _ in self.entries]
        if any(not i for i in ids):
            raise ValueError("identity ids must be non-empty")
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"duplicate identity ids: {sorted(dupes)}")

    @property
    def identities(self) -> list:
        return [identity for identity, _ in self.entries]


@dataclass(frozen=True)
class RankedEntry:
    identity: str
    verified_count: int
    mean_distance: float  # mean descriptor distance of surviving matches; inf if none
    raw_matches: int
    unverified: bool


@dataclass
class RankedResult:
    """Gallery identities ordered by verified match count (desc), ties by
    ascending mean survivor distance, then identity."""

    ranking: list  # [RankedEntry, ...]
    flags: tuple
    pca_ranking: list | None = None  # [(identity, distance), ...] when requested

    def rank_of(self, identity: str) -> int:
        for i, entry in enumerate(self.ranking):
            if entry.identity == identity:
                return i + 1
        raise KeyError(identity)

    def pca_rank_of(self, identity: str) -> int:
        if self.pca_ranking is None:
            raise ValueError("result carries no eigenface ranking")
        for i, (ident, _) in enumerate(self.pca_ranking):
            if ident == identity:
                return i + 1
        raise KeyError(identity)


def preprocess(img: GrayImage, target_width: int, target_height: int) -> GrayImage:
    """Shared gallery/query preparation: fixed-size grayscale raster."""
    return resize_bilinear(img, target_width, target_height)


def enroll(items, sift_params: SiftParams | None = None,
           target_size=DEFAULT_TARGET) -> GalleryIndex:
    """Build a GalleryIndex from (identity, path) pairs.

    Every image is loaded, resized to the target, and feature-extracted; the
    eigenface model is trained on the same preprocessed rasters. Needs at
    least 2 images and unique, non-empty ids.
    """
    items = list(items)
    if len(items) < 2:
        raise ValueError(f"enrollment needs at least 2 images, got {len(items)}")
    ids = [identity for identity, _ in items]
    seen = set()
    for identity in ids:
        if not identity:
            raise ValueError("identity ids must be non-empty")
        if identity in seen:
            raise ValueError(f"duplicate identity id: {identity!r}")
        seen.add(identity)

    params = sift_params if sift_params is not None else SiftParams()
    tw, th = target_size
    images = []
    entries = []
    for identity, path in items:
        try:
            img = preprocess(load_image(path), tw, th)
        except (OSError, ValueError) as exc:
            raise EnrollmentError(f"cannot enroll {identity!r} from {path}: {exc}") from exc
        images.append(img)
        entries.append((identity, extract_features(img, params, image_id=identity)))

    model = train_eigenmodel(images, identities=ids)
    return GalleryIndex(
        version=FORMAT_VERSION,
        target_width=tw,
        target_height=th,
        grayscale_rule="bt601",
        sift_params=params,
        entries=entries,
        eigenmodel=model,
    )


# ---------------------------------------------------------------------------
# Binary serialization


def _pack_sift_params(p: SiftParams) -> bytes:
    return struct.pack(
        "<iI6dB",
        -1 if p.octaves is None else p.octaves,
        p.scales_per_octave,
        p.base_sigma, p.assumed_input_blur, p.contrast_threshold,
        p.edge_ratio, p.orientation_peak_ratio, p.descriptor_clamp,
        1 if p.upsample else 0,
    )


def index_to_bytes(index: GalleryIndex) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HB", index.version, 0)
    rule = GRAYSCALE_RULES.index(index.grayscale_rule)
    out += struct.pack("<HHB", index.target_width, index.target_height, rule)
    out += _pack_sift_params(index.sift_params)
    out += struct.pack("<I", len(index.entries))
    for identity, fs in index.entries:
        raw_id = identity.encode("utf-8")
        out += struct.pack("<H", len(raw_id))
        out += raw_id
        out += struct.pack("<I", len(fs.keypoints))
        kp_block = np.array(
            [(k.x, k.y, k.sigma, k.orientation, k.dog_response) for k in fs.keypoints],
            dtype="<f4",
        )
        out += kp_block.tobytes()
        out += np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes()

    m = index.eigenmodel
    out += struct.pack("<HHII", m.width, m.height, m.k, len(m.identities))
    out += np.ascontiguousarray(m.mean, dtype="<f8").tobytes()
    out += np.ascontiguousarray(m.basis.T, dtype="<f8").tobytes()  # component-major
    out += np.ascontiguousarray(m.eigenvalues, dtype="<f8").tobytes()
    out += np.ascontiguousarray(m.projections, dtype="<f8").tobytes()

    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        n_bytes = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(n_bytes, what), dtype=dtype).copy()


def index_from_bytes(buf: bytes) -> GalleryIndex:
    if len(buf) < 8:
        raise IndexFormatError("file too short for an index header", 0)
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise IndexCorruptionError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    r = _Reader(buf[:-4])
    if r.take(4, "magic") != MAGIC:
        raise IndexFormatError(f"bad magic, expected {MAGIC!r}", 0)
    version, _flags = r.unpack("<HB", "version/flags")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported format version {version}", 4)
    tw, th, rule_id = r.unpack("<HHB", "preprocessing record")
    if rule_id >= len(GRAYSCALE_RULES):
        raise IndexFormatError(f"unknown grayscale rule {rule_id}", r.pos - 1)

    octaves, scales, base_sigma, blur, contrast, edge, peak, clamp, upsample = r.unpack(
        "<iI6dB", "detector parameters"
    )
    params = SiftParams(
        octaves=None if octaves < 0 else octaves,
        scales_per_octave=scales,
        base_sigma=base_sigma,
        assumed_input_blur=blur,
        contrast_threshold=contrast,
        edge_ratio=edge,
        orientation_peak_ratio=peak,
        descriptor_clamp=clamp,
        upsample=bool(upsample),
    )

    (n_entries,) = r.unpack("<I", "entry count")
    entries = []
    for _ in range(n_entries):
        (id_len,) = r.unpack("<H", "identity length")
        identity = r.take(id_len, "identity").decode("utf-8")
        (n_kp,) = r.unpack("<I", "keypoint count")
        kp_block = r.array("<f4", n_kp * 5, "keypoints").reshape(n_kp, 5)
        descs = r.array("<f4", n_kp * 128, "descriptors").reshape(n_kp, 128)
        kps = [
            Keypoint(x=float(row[0]), y=float(row[1]), sigma=float(row[2]),
                     orientation=float(row[3]), dog_response=float(row[4]))
            for row in kp_block
        ]
        entries.append((identity, FeatureSet(image_id=identity, keypoints=kps,
                                             descriptors=descs)))

    mw, mh, k, n_proj = r.unpack("<HHII", "eigenmodel header")
    wh = mw * mh
    mean = r.array("<f8", wh, "eigenmodel mean")
    basis = r.array("<f8", wh * k, "eigenmodel basis").reshape(k, wh).T.copy()
    eigenvalues = r.array("<f8", k, "eigenvalues")
    projections = r.array("<f8", n_proj * k, "projections").reshape(n_proj, k)
    if n_proj != n_entries:
        raise IndexFormatError(
            f"eigenmodel has {n_proj} projections for {n_entries} entries", r.pos
        )
    model = EigenModel(
        width=mw, height=mh, mean=mean, basis=basis, eigenvalues=eigenvalues,
        projections=projections,
        identities=tuple(identity for identity, _ in entries),
    )
    if r.pos != len(r.buf):
        raise IndexFormatError("trailing bytes after eigenmodel block", r.pos)
    return GalleryIndex(
        version=version, target_width=tw, target_height=th,
        grayscale_rule=GRAYSCALE_RULES[rule_id], sift_params=params,
        entries=entries, eigenmodel=model,
    )


def save_index(index: GalleryIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path) -> GalleryIndex:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Identification


def _score_entry(identity: str, entry_fs: FeatureSet, query_fs: FeatureSet,
                 params: MatchParams) -> RankedEntry:
    pairs = ratio_match(query_fs, entry_fs, params)
    per_entry = replace(params, seed=matching.derive_seed(params.seed, identity))
    verified = verify_matches(pairs, query_fs.keypoints, entry_fs.keypoints, per_entry)
    if verified.survivors:
        mean_dist = float(np.mean([p.distance for p in verified.survivors]))
    else:
        mean_dist = float("inf")
    return RankedEntry(
        identity=identity,
        verified_count=verified.verified_count,
        mean_distance=mean_dist,
        raw_matches=len(pairs),
        unverified=verified.unverified,
    )


def identify_image(index: GalleryIndex, query: GrayImage,
                   match_params: MatchParams | None = None,
                   include_pca: bool = False, workers: int = 1) -> RankedResult:
    """Rank all gallery identities against an already-loaded query image.

    The query is put through the index's recorded preprocessing first. The
    merged ranking is independent of `workers`.
    """
    params = match_params if match_params is not None else MatchParams()
    query = preprocess(query, index.target_width, index.target_height)
    query_fs = extract_features(query, index.sift_params, image_id="query")

    flags = []
    if len(query_fs) == 0:
        flags.append("no-features")

    def score(item):
        identity, fs = item
        return _score_entry(identity, fs, query_fs, params)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, index.entries))
    else:
        scored = [score(item) for item in index.entries]

    ranking = sorted(
        scored, key=lambda e: (-e.verified_count, e.mean_distance, e.identity)
    )
    pca_ranking = None
    if include_pca:
        pca_ranking = eigenfaces.pca_identify(index.eigenmodel, query)
    return RankedResult(ranking=ranking, flags=tuple(flags), pca_ranking=pca_ranking)


def identify(index: GalleryIndex, query_path,
             match_params: MatchParams | None = None,
             include_pca: bool = False, workers: int = 1) -> RankedResult:
    """Load a query image from disk and rank all gallery identities."""
    return identify_image(
        index, load_image(query_path), match_params,
        include_pca=include_pca, workers=workers,
    )
