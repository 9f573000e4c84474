import math

import numpy as np
import pytest

from mugid.gallery import (EnrollmentError, GalleryIndex, IndexCorruptionError,
                           IndexFormatError, enroll, identify, identify_image,
                           index_from_bytes, index_to_bytes, load_index,
                           save_index)
from mugid.imaging import GrayImage, load_image
from mugid.matching import MatchParams
from mugid.sift import SiftParams

TARGET = (150, 150)  # small raster keeps unit tests quick


@pytest.fixture(scope="module")
def mini_items(corpus_dir):
    names = {"camera_0", "astronaut_0", "gravel_0", "hubble_0"}
    return [(n, p) for n, p in corpus_dir if n in names]


@pytest.fixture(scope="module")
def mini_index(mini_items):
    return enroll(mini_items, target_size=TARGET)


def assert_index_equal(a: GalleryIndex, b: GalleryIndex):
    assert a.version == b.version
    assert (a.target_width, a.target_height) == (b.target_width, b.target_height)
    assert a.grayscale_rule == b.grayscale_rule
    assert a.sift_params == b.sift_params
    assert a.identities == b.identities
    for (ia, fa), (ib, fb) in zip(a.entries, b.entries):
        assert ia == ib
        assert fa.keypoints == fb.keypoints
        assert np.array_equal(fa.descriptors, fb.descriptors)
    ma, mb = a.eigenmodel, b.eigenmodel
    assert (ma.width, ma.height, ma.k) == (mb.width, mb.height, mb.k)
    assert ma.identities == mb.identities
    for field in ("mean", "basis", "eigenvalues", "projections"):
        assert np.array_equal(getattr(ma, field), getattr(mb, field))


# ---------------------------------------------------------------------------
# Enrollment


def test_enroll_builds_features_and_model(mini_index, mini_items):
    assert len(mini_index.entries) == len(mini_items)
    assert all(len(fs) > 0 for _, fs in mini_index.entries)
    assert mini_index.eigenmodel.k <= len(mini_items) - 1
    assert (mini_index.target_width, mini_index.target_height) == TARGET


def test_enroll_two_images_k_at_most_one(mini_items):
    index = enroll(mini_items[:2], target_size=TARGET)
    assert len(index.entries) == 2
    assert index.eigenmodel.k <= 1


def test_enroll_needs_two_images(mini_items):
    with pytest.raises(ValueError):
        enroll(mini_items[:1], target_size=TARGET)


def test_enroll_duplicate_id_named(mini_items):
    items = [("dup", mini_items[0][1]), ("dup", mini_items[1][1])]
    with pytest.raises(ValueError, match="dup"):
        enroll(items, target_size=TARGET)


def test_enroll_unreadable_image_names_identity(mini_items, tmp_path):
    items = [mini_items[0], ("ghost", str(tmp_path / "missing.pgm"))]
    with pytest.raises(EnrollmentError, match="ghost"):
        enroll(items, target_size=TARGET)


# ---------------------------------------------------------------------------
# Serialization


def test_roundtrip_is_identity(mini_index, tmp_path):
    path = tmp_path / "g.mgid"
    save_index(mini_index, path)
    assert_index_equal(load_index(path), mini_index)


def test_save_is_deterministic(mini_index, tmp_path):
    save_index(mini_index, tmp_path / "a.mgid")
    save_index(mini_index, tmp_path / "b.mgid")
    assert (tmp_path / "a.mgid").read_bytes() == (tmp_path / "b.mgid").read_bytes()


def test_bad_magic_rejected(mini_index):
    raw = bytearray(index_to_bytes(mini_index))
    raw[:4] = b"NOPE"
    import zlib, struct
    raw[-4:] = struct.pack("<I", zlib.crc32(bytes(raw[:-4])) & 0xFFFFFFFF)
    with pytest.raises(IndexFormatError) as err:
        index_from_bytes(bytes(raw))
    assert err.value.offset == 0


def test_corruption_detected_by_checksum(mini_index):
    raw = bytearray(index_to_bytes(mini_index))
    raw[100] ^= 0xFF
    with pytest.raises(IndexCorruptionError):
        index_from_bytes(bytes(raw))


def test_truncation_reports_offset(mini_index):
    raw = index_to_bytes(mini_index)
    import struct, zlib
    cut = raw[:200]
    cut = cut[:-4] + struct.pack("<I", zlib.crc32(cut[:-4]) & 0xFFFFFFFF)
    with pytest.raises(IndexFormatError, match="truncated"):
        index_from_bytes(cut)


def test_unsupported_version_rejected(mini_index):
    import struct, zlib
    raw = bytearray(index_to_bytes(mini_index))
    raw[4:6] = struct.pack("<H", 99)
    raw[-4:] = struct.pack("<I", zlib.crc32(bytes(raw[:-4])) & 0xFFFFFFFF)
    with pytest.raises(IndexFormatError, match="version"):
        index_from_bytes(bytes(raw))


# ---------------------------------------------------------------------------
# Identification


def test_identify_self_query_rank1(mini_index, mini_items):
    identity, path = mini_items[0]
    result = identify(mini_index, path, MatchParams())
    assert result.ranking[0].identity == identity
    assert result.ranking[0].verified_count > 0
    assert result.rank_of(identity) == 1


def test_identify_constant_query_flagged(mini_index, tmp_path):
    from conftest import write_pnm
    path = write_pnm(tmp_path / "flat.pgm", np.full((64, 64), 128, dtype=np.uint8))
    result = identify(mini_index, path, MatchParams())
    assert "no-features" in result.flags
    assert all(e.verified_count == 0 for e in result.ranking)
    # tie-break order: all scores equal, identities ascending
    assert [e.identity for e in result.ranking] == sorted(mini_index.identities)


def test_identify_parallel_equals_serial(mini_index, mini_items):
    img_path = mini_items[2][1]
    serial = identify(mini_index, img_path, MatchParams())
    threaded = identify(mini_index, img_path, MatchParams(), workers=4)
    assert serial.ranking == threaded.ranking
    assert serial.flags == threaded.flags


def test_identify_with_pca_ranking(mini_index, mini_items):
    identity, path = mini_items[1]
    result = identify(mini_index, path, MatchParams(), include_pca=True)
    assert result.pca_ranking is not None
    assert result.pca_ranking[0][0] == identity
    assert result.pca_rank_of(identity) == 1


def test_ranking_invariant_to_enrollment_order(mini_items):
    a = enroll(mini_items, target_size=TARGET)
    b = enroll(mini_items[::-1], target_size=TARGET)
    query_path = mini_items[0][1]
    ra = identify(a, query_path, MatchParams())
    rb = identify(b, query_path, MatchParams())
    assert [e.identity for e in ra.ranking] == [e.identity for e in rb.ranking]
    assert [e.verified_count for e in ra.ranking] == [e.verified_count for e in rb.ranking]


def test_self_retrieval_for_every_entry(mini_index, mini_items):
    for identity, path in mini_items:
        result = identify(mini_index, path, MatchParams())
        assert result.ranking[0].identity == identity


def test_loaded_index_identifies_like_fresh(mini_index, mini_items, tmp_path):
    path = tmp_path / "x.mgid"
    save_index(mini_index, path)
    loaded = load_index(path)
    identity, img_path = mini_items[3]
    fresh = identify(mini_index, img_path, MatchParams())
    reloaded = identify(loaded, img_path, MatchParams())
    assert fresh.ranking == reloaded.ranking


def test_identify_is_deterministic(mini_index, mini_items):
    path = mini_items[1][1]
    a = identify(mini_index, path, MatchParams(), include_pca=True)
    b = identify(mini_index, path, MatchParams(), include_pca=True)
    assert a.ranking == b.ranking
    assert a.pca_ranking == b.pca_ranking


def test_hundred_image_enrollment_roundtrips(corpus_dir, tmp_path):
    # 100 entries (paths recycled under fresh ids) at a small raster; two
    # save runs must agree byte for byte and the file must load back equal
    items = [(f"g{i:03d}", corpus_dir[i % len(corpus_dir)][1]) for i in range(100)]
    index = enroll(items, target_size=(120, 120))
    assert len(index.entries) == 100
    raw_a = index_to_bytes(index)
    raw_b = index_to_bytes(index)
    assert raw_a == raw_b
    path = tmp_path / "big.mgid"
    path.write_bytes(raw_a)
    assert_index_equal(load_index(path), index)


def test_rotated_scaled_query_still_rank1(corpus_dir):
    # query = gallery image rotated 5 degrees and scaled x1.1: the ratio test
    # plus angle/length-ratio verification are similarity-invariant, so the
    # source image must stay on top of a 20-entry gallery
    from scipy.ndimage import map_coordinates

    items = corpus_dir[:20]
    index = enroll(items, target_size=(200, 200))
    identity, path = items[5]
    img = load_image(path)
    data = np.asarray(img.data)
    h, w = data.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    angle = math.radians(5.0)
    scale = 1.1
    ys, xs = np.mgrid[0:h, 0:w]
    # backward map of rotate(5 deg) + scale(1.1) about the image center
    dx, dy = xs - cx, ys - cy
    src_x = (np.cos(angle) * dx + np.sin(angle) * dy) / scale + cx
    src_y = (-np.sin(angle) * dx + np.cos(angle) * dy) / scale + cy
    warped = map_coordinates(data, [src_y, src_x], order=1, mode="nearest")
    query = GrayImage.from_array(np.clip(warped, 0.0, 1.0))

    result = identify_image(index, query, MatchParams())
    assert result.ranking[0].identity == identity
    assert result.ranking[0].verified_count > 0


def test_gallery_index_validates_ids(mini_index):
    with pytest.raises(ValueError):
        GalleryIndex(
            version=1, target_width=10, target_height=10, grayscale_rule="bt601",
            sift_params=SiftParams(),
            entries=[("a", mini_index.entries[0][1]), ("a", mini_index.entries[1][1])],
            eigenmodel=mini_index.eigenmodel,
        )
