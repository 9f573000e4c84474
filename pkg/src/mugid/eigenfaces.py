"""Eigenface baseline: PCA over the gallery, nearest neighbor in coefficient space.

The covariance eigenproblem is solved on the N x N Gram matrix of centered
images (cheap for gallery-sized N) with a cyclic Jacobi iteration, then the
eigenvectors are lifted back to pixel space and orthonormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage

# eigenvalues below max(eigenvalue) * _RANK_RTOL are treated as rank-deficient noise
_RANK_RTOL = 1e-12


@dataclass(frozen=True)
class EigenModel:
    """Mean image, orthonormal eigenface basis and per-identity projections."""

    width: int
    height: int
    mean: np.ndarray  # (wh,)
    basis: np.ndarray  # (wh, k), orthonormal columns
    eigenvalues: np.ndarray  # (k,), descending, >= 0
    projections: np.ndarray  # (n, k), row i = coefficients of training image i
    identities: tuple  # n identity labels, aligned with projections

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def __post_init__(self):
        if self.mean.shape != (self.width * self.height,):
            raise ValueError("mean length must equal width*height")
        if self.basis.shape[0] != self.width * self.height:
            raise ValueError("basis rows must equal width*height")
        if self.eigenvalues.shape != (self.basis.shape[1],):
            raise ValueError("one eigenvalue per basis column expected")
        if self.projections.shape != (len(self.identities), self.basis.shape[1]):
            raise ValueError("projections must be (n_identities, k)")


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    """Eigen-decompose a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate away every off-diagonal element in a fixed (p, q) order
    until the off-diagonal Frobenius norm falls below `tol`. Returns
    (eigenvalues, eigenvectors) sorted descending, eigenvectors as columns.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)

    def offdiag_norm() -> float:
        off = a - np.diag(np.diag(a))
        return float(np.sqrt(np.sum(off * off)))

    sweeps = 0
    while offdiag_norm() >= tol:
        if sweeps >= max_sweeps:
            raise ArithmeticError(
                f"Jacobi iteration did not reach off-diagonal norm {tol} "
                f"in {max_sweeps} sweeps"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                phi = 0.5 * np.arctan2(2.0 * apq, a[q, q] - a[p, p])
                c, s = np.cos(phi), np.sin(phi)
                app, aqq = a[p, p], a[q, q]
                # rotate rows/columns p and q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], v[:, order]


def _flatten_images(images) -> np.ndarray:
    dims = {(im.width, im.height) for im in images}
    if len(dims) != 1:
        raise ValueError(f"all images must share dimensions, got {sorted(dims)}")
    return np.stack([im.data.ravel() for im in images])


def train_eigenmodel(
    images,
    k: int | None = None,
    variance_fraction: float = 0.95,
    identities=None,
) -> EigenModel:
    """Train an eigenface model from same-sized images.

    Component count is `k` when given, otherwise the smallest count covering
    `variance_fraction` of total variance; both are capped at the rank of the
    centered data (at most N-1). Covariance uses divisor N. Each lifted
    eigenvector's sign is fixed so its largest-magnitude entry is positive.
    """
    images = list(images)
    n = len(images)
    if n < 2:
        raise ValueError(f"need at least 2 training images, got {n}")
    if identities is None:
        identities = tuple(str(i) for i in range(n))
    else:
        identities = tuple(identities)
        if len(identities) != n:
            raise ValueError("one identity per image required")

    x = _flatten_images(images)  # (n, wh)
    mean = x.mean(axis=0)
    centered = x - mean  # rows are centered images
    gram = (centered @ centered.T) / n

    eigenvalues, vecs = jacobi_eigh(gram)
    eigenvalues = np.maximum(eigenvalues, 0.0)
    rank_cut = max(float(eigenvalues[0]), 0.0) * _RANK_RTOL
    rank = int(np.sum(eigenvalues > rank_cut))
    rank = min(rank, n - 1)

    if k is None:
        total = float(eigenvalues[:rank].sum())
        if rank == 0 or total == 0.0:
            k_eff = 0
        else:
            cumulative = np.cumsum(eigenvalues[:rank]) / total
            k_eff = int(np.searchsorted(cumulative, variance_fraction) + 1)
            k_eff = min(k_eff, rank)
    else:
        if k < 0:
            raise ValueError("k must be non-negative")
        k_eff = min(k, rank)

    basis = np.zeros((x.shape[1], k_eff))
    for i in range(k_eff):
        lifted = centered.T @ vecs[:, i]
        lifted /= np.linalg.norm(lifted)
        pivot = int(np.argmax(np.abs(lifted)))
        if lifted[pivot] < 0:
            lifted = -lifted
        basis[:, i] = lifted

    projections = centered @ basis  # (n, k)
    return EigenModel(
        width=images[0].width,
        height=images[0].height,
        mean=mean,
        basis=basis,
        eigenvalues=eigenvalues[:k_eff].copy(),
        projections=projections,
        identities=identities,
    )


def project(model: EigenModel, img: GrayImage) -> np.ndarray:
    """Coefficients of an image in the eigenface basis: basis^T (image - mean)."""
    if (img.width, img.height) != (model.width, model.height):
        raise ValueError(
            f"image dims {img.width}x{img.height} do not match model "
            f"{model.width}x{model.height}"
        )
    return model.basis.T @ (img.data.ravel() - model.mean)


def pca_identify(model: EigenModel, query: GrayImage) -> list[tuple[str, float]]:
    """Rank gallery identities by Euclidean distance in coefficient space."""
    if len(model.identities) == 0:
        raise ValueError("model has no gallery projections")
    coeffs = project(model, query)
    dists = np.sqrt(np.sum((model.projections - coeffs) ** 2, axis=1))
    order = sorted(range(len(dists)), key=lambda i: (dists[i], model.identities[i]))
    return [(model.identities[i], float(dists[i])) for i in order]
