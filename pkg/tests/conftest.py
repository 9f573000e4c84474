"""Shared fixtures: PGM/PPM writers and a natural-photo crop corpus.

The corpus is built from scikit-image's bundled photographs: each source is
cut into 300x300 grayscale crops, giving 50+ distinct pre-cropped natural
images without any network access. Texture sources (brick/grass/gravel) are
kept: their crops look globally alike, which is exactly the regime where
whole-image matching struggles and local features should not.
"""

from __future__ import annotations

import struct

import numpy as np
import pytest
import skimage.data

from mugid.imaging import GrayImage, resize_bilinear

CROP = 300
_LUMA = np.array([0.299, 0.587, 0.114])


def write_pnm(path, arr, magic=b"P5", maxval=255, comment=None):
    """Write a binary PGM/PPM from a uint array (h, w[, 3])."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    header = magic + b" "
    if comment:
        header += b"# " + comment.encode() + b"\n"
    header += f"{w} {h} {maxval}\n".encode()
    payload = arr.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)
    return path


def to_gray01(arr) -> np.ndarray:
    """uint8/bool/color array -> float64 grayscale in [0, 1]."""
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[:, :, :3] @ _LUMA
    return np.clip(arr, 0.0, 1.0)


def contrast_stretch(arr: np.ndarray) -> np.ndarray:
    """Stretch the 1st..99th percentile range to [0, 1] (photo normalization)."""
    lo, hi = np.percentile(arr, [1.0, 99.0])
    if hi - lo < 1e-6:
        return arr
    return np.clip((arr - lo) / (hi - lo), 0.0, 1.0)


def _detail(arr: np.ndarray) -> float:
    gy, gx = np.gradient(arr)
    return float(np.hypot(gx, gy).mean())


def _best_crops(arr, count, min_separation=150, stride=50):
    """Greedy top-detail 300x300 crops with centers at least min_separation apart."""
    h, w = arr.shape
    scored = []
    for y in range(0, h - CROP + 1, stride):
        for x in range(0, w - CROP + 1, stride):
            scored.append((-_detail(arr[y : y + CROP, x : x + CROP]), y, x))
    scored.sort()
    picked = []
    for _, y, x in scored:
        if all(max(abs(y - py), abs(x - px)) >= min_separation for py, px in picked):
            picked.append((y, x))
            if len(picked) == count:
                break
    return [arr[y : y + CROP, x : x + CROP] for y, x in sorted(picked)]


def _lattice_crops(arr, step=100, side=3):
    """side x side grid of heavily overlapping crops (globally look-alike)."""
    return [
        arr[y : y + CROP, x : x + CROP]
        for y in range(0, side * step, step)
        for x in range(0, side * step, step)
    ]


def build_corpus() -> list:
    """Deterministic list of (name, 300x300 float image) natural crops.

    Sources are contrast-stretched to the full intensity range first and
    crops are chosen by gradient detail so each carries usable structure.
    Two sources are rescaled to vary the optical scale of the content.
    """
    data = skimage.data

    def plain(loader):
        return lambda: contrast_stretch(to_gray01(loader()))

    def scaled(loader, factor):
        def make():
            base = GrayImage.from_array(to_gray01(loader()))
            out = resize_bilinear(base, int(base.width * factor),
                                  int(base.height * factor))
            return contrast_stretch(out.data)
        return make

    # note: skimage's `cat` is an alias of `chelsea`; only one may appear or
    # the gallery stops being distinct
    quotas = [
        ("astronaut", plain(data.astronaut), 4),
        ("brick", plain(data.brick), 4),
        ("camera", plain(data.camera), 4),
        ("chelsea", plain(data.chelsea), 2),
        ("coffee", plain(data.coffee), 3),
        ("coins", plain(data.coins), 1),
        ("hubble", plain(data.hubble_deep_field), 12),
        ("hubblehalf", scaled(data.hubble_deep_field, 0.5), 2),
        ("immuno", plain(data.immunohistochemistry), 4),
        ("moon", plain(data.moon), 1),
        ("pagex2", scaled(data.page, 2.0), 4),
        ("rocket", plain(data.rocket), 3),
        ("textx2", scaled(data.text, 2.0), 4),
    ]
    crops = []
    for name, make, count in quotas:
        arr = make()
        for i, piece in enumerate(_best_crops(arr, count)):
            assert piece.shape == (CROP, CROP)
            crops.append((f"{name}_{i}", piece))
    # dense look-alike blocks: stochastic texture crops with heavy mutual
    # overlap, the regime where whole-image pixel matching gets lost but
    # local keypoints stay unique
    for name, loader in (("grass", data.grass), ("gravel", data.gravel)):
        arr = contrast_stretch(to_gray01(loader()))
        for i, piece in enumerate(_lattice_crops(arr)):
            assert piece.shape == (CROP, CROP)
            crops.append((f"{name}_{i}", piece))
    return crops


@pytest.fixture(scope="session")
def corpus():
    return build_corpus()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, corpus):
    """Corpus written out as PGM files; yields [(identity, path), ...]."""
    root = tmp_path_factory.mktemp("corpus")
    items = []
    for name, arr in corpus:
        path = root / f"{name}.pgm"
        write_pnm(path, np.rint(arr * 255).astype(np.uint8))
        items.append((name, str(path)))
    return items


@pytest.fixture(scope="session")
def natural_image(corpus) -> GrayImage:
    """One fixed 300x300 natural image (camera crop)."""
    by_name = dict(corpus)
    return GrayImage.from_array(by_name["camera_0"])


@pytest.fixture(scope="session")
def equivariance_images(corpus):
    """Ten varied square natural images for rotation tests."""
    names = ["camera_0", "astronaut_0", "coffee_0", "rocket_0", "hubble_0",
             "chelsea_0", "brick_0", "immuno_0", "coins_0", "pagex2_0"]
    by_name = dict(corpus)
    return [(n, GrayImage.from_array(by_name[n])) for n in names]
