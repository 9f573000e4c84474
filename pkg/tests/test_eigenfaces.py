import math

import numpy as np
import pytest

from mugid.eigenfaces import (jacobi_eigh, pca_identify, project,
                              train_eigenmodel)
from mugid.imaging import GrayImage


def images_from_rows(rows, width, height):
    return [GrayImage.from_array(np.asarray(r, dtype=float).reshape(height, width))
            for r in rows]


def random_images(n, w, h, seed):
    rng = np.random.default_rng(seed)
    return [GrayImage.from_array(rng.uniform(size=(h, w))) for _ in range(n)]


# ---------------------------------------------------------------------------
# Jacobi solver


def test_jacobi_hand_computed_2x2():
    # Gram matrix of centered vectors (-1,-1) and (1,1) with divisor 2:
    # [[1,-1],[-1,1]] has eigenvalues 2 and 0, eigenvector (1,-1)/sqrt(2)
    w, v = jacobi_eigh(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert w == pytest.approx([2.0, 0.0], abs=1e-12)
    assert abs(v[0, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert v[0, 0] == pytest.approx(-v[1, 0], abs=1e-12)


@pytest.mark.parametrize("n", [3, 6, 12])
def test_jacobi_against_numpy(n):
    rng = np.random.default_rng(n)
    m = rng.normal(size=(n, n))
    sym = m + m.T
    w, v = jacobi_eigh(sym)
    # residual + orthonormality, and eigenvalues match LAPACK's
    assert np.abs(sym @ v - v * w).max() < 1e-8
    assert np.abs(v.T @ v - np.eye(n)).max() < 1e-10
    assert np.allclose(sorted(w), np.linalg.eigvalsh(sym), atol=1e-8)
    assert np.all(np.diff(w) <= 1e-12)


def test_jacobi_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


# ---------------------------------------------------------------------------
# Training


def test_identical_images_give_rank_zero():
    img = GrayImage.from_array(np.full((2, 2), 0.5))
    model = train_eigenmodel([img, img])
    assert model.k == 0
    assert model.projections.shape == (2, 0)
    assert pca_identify(model, img)[0][1] == 0.0


def test_two_image_worked_example():
    # hand-computed eigenpair for 1x2 images (0,0) and (c,c): mean (c/2,c/2),
    # Gram/N eigenvalues (c^2/2, 0), eigenface (0.7071, 0.7071) after the
    # sign fix, projection of image 2 = c/sqrt(2). Run at c=1 to stay inside
    # the [0,1] intensity container; values scale as stated.
    c = 1.0
    imgs = images_from_rows([[0.0, 0.0], [c, c]], width=2, height=1)
    model = train_eigenmodel(imgs, k=1)
    assert model.mean == pytest.approx([c / 2, c / 2], abs=1e-12)
    assert model.k == 1
    assert model.eigenvalues[0] == pytest.approx(c * c / 2, abs=1e-9)
    assert model.basis[:, 0] == pytest.approx([0.7071, 0.7071], abs=1e-4)
    assert model.basis[:, 0] == pytest.approx([1 / math.sqrt(2)] * 2, abs=1e-9)
    assert model.projections[1, 0] == pytest.approx(c / math.sqrt(2), abs=1e-9)
    assert model.projections[0, 0] == pytest.approx(-c / math.sqrt(2), abs=1e-9)


def test_reconstruction_with_full_rank():
    imgs = random_images(5, 4, 4, seed=1)
    model = train_eigenmodel(imgs, k=4)
    for i, img in enumerate(imgs):
        recon = model.mean + model.basis @ model.projections[i]
        rms = math.sqrt(float(np.mean((recon - img.data.ravel()) ** 2)))
        assert rms < 1e-4


def test_orthonormality_and_descending_eigenvalues():
    model = train_eigenmodel(random_images(6, 5, 3, seed=2), k=5)
    gram = model.basis.T @ model.basis
    assert np.abs(gram - np.eye(model.k)).max() <= 1e-6
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)
    assert np.all(model.eigenvalues >= 0.0)


def test_variance_conservation():
    imgs = random_images(7, 6, 4, seed=3)
    model = train_eigenmodel(imgs, k=6)
    x = np.stack([im.data.ravel() for im in imgs])
    centered = x - x.mean(axis=0)
    total = float(np.sum(centered**2)) / len(imgs)
    assert model.eigenvalues.sum() == pytest.approx(total, rel=1e-6)


def test_variance_fraction_policy():
    imgs = random_images(8, 6, 6, seed=4)
    full = train_eigenmodel(imgs, k=7)
    partial = train_eigenmodel(imgs, variance_fraction=0.95)
    assert 1 <= partial.k <= 7
    covered = partial.eigenvalues.sum() / full.eigenvalues.sum()
    assert covered >= 0.95 or partial.k == 7
    # dropping the last component must fall below the target
    if partial.k > 1:
        assert full.eigenvalues[: partial.k - 1].sum() / full.eigenvalues.sum() < 0.95


def test_training_validation_errors():
    with pytest.raises(ValueError):
        train_eigenmodel([GrayImage.from_array(np.zeros((2, 2)))])
    with pytest.raises(ValueError):
        train_eigenmodel([
            GrayImage.from_array(np.zeros((2, 2))),
            GrayImage.from_array(np.zeros((3, 2))),
        ])


def test_order_invariant_distances():
    imgs = random_images(6, 4, 4, seed=5)
    probe = random_images(1, 4, 4, seed=99)[0]
    a = train_eigenmodel(imgs, k=5)
    b = train_eigenmodel(imgs[::-1], k=5)
    da = np.array([d for _, d in sorted(pca_identify(a, probe))])
    db = np.array([d for _, d in sorted(pca_identify(b, probe))])
    # identities differ (defaults are positional) but the distance spectrum
    # to each underlying image must be preserved
    assert np.allclose(sorted(da), sorted(db), atol=1e-8)


# ---------------------------------------------------------------------------
# Projection and identification


def test_project_mean_is_zero():
    imgs = random_images(4, 3, 3, seed=6)
    model = train_eigenmodel(imgs, k=3)
    mean_img = GrayImage.from_array(model.mean.reshape(3, 3))
    assert np.abs(project(model, mean_img)).max() < 1e-12


def test_project_training_image_matches_stored():
    imgs = random_images(5, 4, 3, seed=7)
    model = train_eigenmodel(imgs, k=4)
    got = project(model, imgs[2])
    assert np.allclose(got, model.projections[2], atol=1e-6)


def test_project_mean_plus_eigenvector():
    imgs = random_images(5, 4, 4, seed=8)
    model = train_eigenmodel(imgs, k=4)
    e0 = model.basis[:, 0]
    # coefficient chosen to keep intensities inside [0, 1]
    room = min(
        float((1.0 - model.mean[e0 > 0] / 1.0).min() / e0[e0 > 0].max()) if np.any(e0 > 0) else 10.0,
        float((model.mean[e0 < 0] / -e0[e0 < 0]).min()) if np.any(e0 < 0) else 10.0,
    )
    c = 0.9 * room
    img = GrayImage.from_array((model.mean + c * e0).reshape(4, 4))
    coeffs = project(model, img)
    want = np.zeros(4)
    want[0] = c
    assert np.allclose(coeffs, want, atol=1e-6)


def test_project_dimension_mismatch():
    model = train_eigenmodel(random_images(3, 4, 4, seed=9))
    with pytest.raises(ValueError):
        project(model, GrayImage.from_array(np.zeros((5, 4))))


def test_identify_self_match():
    imgs = random_images(5, 4, 4, seed=10)
    model = train_eigenmodel(imgs, k=4, identities=list("abcde"))
    ranked = pca_identify(model, imgs[3])
    assert ranked[0][0] == "d"
    assert ranked[0][1] == pytest.approx(0.0, abs=1e-6)


def test_identify_parseval_distances():
    imgs = random_images(6, 5, 5, seed=11)
    model = train_eigenmodel(imgs, k=5)  # full rank: spans all centered data
    coeff_dist = np.linalg.norm(model.projections[0] - model.projections[1])
    pixel_dist = np.linalg.norm(imgs[0].data.ravel() - imgs[1].data.ravel())
    assert coeff_dist == pytest.approx(pixel_dist, abs=1e-4)


def test_identify_tie_break_by_identity():
    img = GrayImage.from_array(np.random.default_rng(12).uniform(size=(3, 3)))
    other = GrayImage.from_array(np.random.default_rng(13).uniform(size=(3, 3)))
    model = train_eigenmodel([img, img, other], identities=["b", "a", "z"])
    ranked = pca_identify(model, img)
    assert [r[0] for r in ranked[:2]] == ["a", "b"]


def test_identify_empty_model_rejected():
    model = train_eigenmodel(random_images(3, 2, 2, seed=14))
    object.__setattr__(model, "identities", ())
    with pytest.raises(ValueError):
        pca_identify(model, GrayImage.from_array(np.zeros((2, 2))))
