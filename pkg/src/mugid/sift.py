"""Scale-invariant keypoint detection and description, built from first principles.

Four stages: a Gaussian scale-space pyramid with difference-of-Gaussian (DoG)
levels, 3-D extremum detection with iterative sub-pixel refinement and
stability rejection, dominant-orientation assignment from local gradient
histograms, and a 128-dimensional 4x4x8 gradient-histogram descriptor.

Keypoint coordinates and scales always refer to the original input frame,
regardless of the internal x2 upsampling of octave 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .imaging import GrayImage, gaussian_blur_array, _resize_bilinear_array

_ORI_BINS = 36
_DESC_CELLS = 4
_DESC_ORI_BINS = 8
_DESC_SAMPLES = 16
_MIN_DIM = 16


@dataclass(frozen=True)
class SiftParams:
    """Detector/descriptor tunables.

    octaves=None builds as many octaves as the image supports (an octave is
    added only while one further halving would still leave at least 16 px in
    the smaller dimension). All defaults follow the standard published
    parameterization of the detector.
    """

    octaves: int | None = None
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    assumed_input_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    orientation_peak_ratio: float = 0.8
    descriptor_clamp: float = 0.2
    upsample: bool = True

    def __post_init__(self):
        if self.scales_per_octave < 1:
            raise ValueError("scales_per_octave must be >= 1")
        if self.base_sigma <= self.assumed_input_blur:
            raise ValueError("base_sigma must exceed assumed_input_blur")
        if min(self.contrast_threshold, self.edge_ratio, self.orientation_peak_ratio,
               self.descriptor_clamp) <= 0:
            raise ValueError("thresholds must be positive")
        if self.octaves is not None and self.octaves < 1:
            raise ValueError("octaves must be >= 1 when given")


@dataclass(frozen=True)
class Keypoint:
    """A localized, scale- and orientation-attributed interest point.

    x, y: sub-pixel position in the input frame. sigma: absolute scale in
    input pixels. orientation: radians in [0, 2pi). dog_response: signed
    interpolated DoG contrast at the refined extremum.
    """

    x: float
    y: float
    sigma: float
    orientation: float
    dog_response: float


@dataclass
class ScaleSpace:
    """Per-octave Gaussian stacks (s+3 levels) and DoG stacks (s+2 levels)."""

    gaussians: list  # [octave][level] -> float32 (h, w)
    dogs: list  # [octave][level] -> float32 (h, w)
    sigmas: np.ndarray  # (octaves, s+3) absolute scale in input pixels
    input_scale: float  # input pixels per octave-0 pixel (0.5 when upsampled)
    params: SiftParams

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)

    def octave_scale(self, octave: int) -> float:
        return self.input_scale * (2.0 ** octave)


@dataclass
class FeatureSet:
    """All keypoints of one image with their descriptors (parallel, n x 128)."""

    image_id: str
    keypoints: list
    descriptors: np.ndarray

    def __post_init__(self):
        if len(self.keypoints) != self.descriptors.shape[0]:
            raise ValueError("keypoints and descriptors must be parallel")

    def __len__(self) -> int:
        return len(self.keypoints)


def _auto_octaves(min_dim: int) -> int:
    """Octave count: keep adding octaves while another halving stays >= 16 px."""
    count = 0
    d = min_dim
    while d >= 2 * _MIN_DIM:
        count += 1
        d //= 2
    return max(count, 1)


def build_scale_space(img: GrayImage, params: SiftParams) -> ScaleSpace:
    """Build the Gaussian/DoG pyramid.

    Octave 0 starts from the input upsampled x2 (bilinear) and blurred up to
    base_sigma; each following octave takes every 2nd pixel of the Gaussian
    level whose blur is exactly twice the octave's base.
    """
    if min(img.width, img.height) < _MIN_DIM:
        raise ValueError(
            f"image min dimension must be >= {_MIN_DIM}, got {img.width}x{img.height}"
        )
    s = params.scales_per_octave
    n_levels = s + 3

    if params.upsample:
        base = _resize_bilinear_array(img.data, img.width * 2, img.height * 2)
        input_scale = 0.5
        start_blur = 2.0 * params.assumed_input_blur
    else:
        base = img.data
        input_scale = 1.0
        start_blur = params.assumed_input_blur
    base = base.astype(np.float32)

    max_octaves = _auto_octaves(min(base.shape))
    n_octaves = max_octaves if params.octaves is None else min(params.octaves, max_octaves)

    k = 2.0 ** (1.0 / s)
    level_sigma = params.base_sigma * k ** np.arange(n_levels)  # octave-local
    increments = np.sqrt(level_sigma[1:] ** 2 - level_sigma[:-1] ** 2)

    current = gaussian_blur_array(
        base, math.sqrt(max(params.base_sigma**2 - start_blur**2, 1e-4))
    )
    gaussians = []
    dogs = []
    sigmas = np.empty((n_octaves, n_levels))
    for octave in range(n_octaves):
        stack = [current]
        for inc in increments:
            stack.append(gaussian_blur_array(stack[-1], float(inc)))
        gaussians.append(stack)
        dogs.append([stack[i + 1] - stack[i] for i in range(n_levels - 1)])
        sigmas[octave] = level_sigma * input_scale * (2.0 ** octave)
        if octave + 1 < n_octaves:
            current = stack[s][::2, ::2]  # blur there is exactly 2 * base_sigma

    return ScaleSpace(
        gaussians=gaussians, dogs=dogs, sigmas=sigmas,
        input_scale=input_scale, params=params,
    )


def _strict_extrema_mask(vol: np.ndarray) -> np.ndarray:
    """Strict 26-neighbor extrema of a (levels, h, w) volume, border excluded."""
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    nmax = maximum_filter(vol, footprint=footprint, mode="constant", cval=-np.inf)
    nmin = minimum_filter(vol, footprint=footprint, mode="constant", cval=np.inf)
    mask = (vol > nmax) | (vol < nmin)
    mask[0, :, :] = mask[-1, :, :] = False
    mask[:, 0, :] = mask[:, -1, :] = False
    mask[:, :, 0] = mask[:, :, -1] = False
    return mask


def _stencil_derivatives(vol: np.ndarray, l, y, x):
    """Central-difference gradient and Hessian entries at integer positions."""
    v = vol
    dx = 0.5 * (v[l, y, x + 1] - v[l, y, x - 1])
    dy = 0.5 * (v[l, y + 1, x] - v[l, y - 1, x])
    ds = 0.5 * (v[l + 1, y, x] - v[l - 1, y, x])
    c = v[l, y, x]
    dxx = v[l, y, x + 1] - 2.0 * c + v[l, y, x - 1]
    dyy = v[l, y + 1, x] - 2.0 * c + v[l, y - 1, x]
    dss = v[l + 1, y, x] - 2.0 * c + v[l - 1, y, x]
    dxy = 0.25 * (v[l, y + 1, x + 1] - v[l, y + 1, x - 1]
                  - v[l, y - 1, x + 1] + v[l, y - 1, x - 1])
    dxs = 0.25 * (v[l + 1, y, x + 1] - v[l + 1, y, x - 1]
                  - v[l - 1, y, x + 1] + v[l - 1, y, x - 1])
    dys = 0.25 * (v[l + 1, y + 1, x] - v[l + 1, y - 1, x]
                  - v[l - 1, y + 1, x] + v[l - 1, y - 1, x])
    return dx, dy, ds, dxx, dyy, dss, dxy, dxs, dys


def _solve_newton_step(dx, dy, ds, dxx, dyy, dss, dxy, dxs, dys):
    """Batched solve of H * delta = -g for 3x3 symmetric H via cofactors.

    Returns (delta (m,3) in (x, y, s) order, singular mask).
    """
    det = (dxx * (dyy * dss - dys * dys)
           - dxy * (dxy * dss - dys * dxs)
           + dxs * (dxy * dys - dyy * dxs))
    scale = np.maximum(np.abs(dxx) + np.abs(dyy) + np.abs(dss), 1e-30) ** 3
    singular = np.abs(det) < 1e-12 * scale
    safe_det = np.where(singular, 1.0, det)

    i00 = dyy * dss - dys * dys
    i01 = dxs * dys - dxy * dss
    i02 = dxy * dys - dxs * dyy
    i11 = dxx * dss - dxs * dxs
    i12 = dxy * dxs - dxx * dys
    i22 = dxx * dyy - dxy * dxy
    ddx = -(i00 * dx + i01 * dy + i02 * ds) / safe_det
    ddy = -(i01 * dx + i11 * dy + i12 * ds) / safe_det
    dds = -(i02 * dx + i12 * dy + i22 * ds) / safe_det
    delta = np.stack([ddx, ddy, dds], axis=1)
    singular |= ~np.all(np.isfinite(delta), axis=1)
    return delta, singular


def _detect_in_octave(vol: np.ndarray, octave: int, params: SiftParams,
                      input_scale: float, img_w: int, img_h: int):
    """Refine candidate extrema of one octave; yields raw keypoint records."""
    n_levels, h, w = vol.shape
    cand = np.argwhere(_strict_extrema_mask(vol))
    if cand.shape[0] == 0:
        return []

    vol64 = vol.astype(np.float64)
    l, y, x = cand[:, 0], cand[:, 1], cand[:, 2]
    records = []
    edge_bound = (params.edge_ratio + 1.0) ** 2 / params.edge_ratio
    oct_scale = input_scale * (2.0 ** octave)
    s = params.scales_per_octave

    for _ in range(5):
        if l.size == 0:
            break
        derivs = _stencil_derivatives(vol64, l, y, x)
        delta, singular = _solve_newton_step(*derivs[:3], *derivs[3:])
        converged = np.all(np.abs(delta) < 0.5, axis=1) & ~singular

        if np.any(converged):
            ci = np.where(converged)[0]
            dxv, dyv, dsv = derivs[0][ci], derivs[1][ci], derivs[2][ci]
            dd = delta[ci]
            value = (vol64[l[ci], y[ci], x[ci]]
                     + 0.5 * (dxv * dd[:, 0] + dyv * dd[:, 1] + dsv * dd[:, 2]))
            dxx, dyy = derivs[3][ci], derivs[4][ci]
            dxy = derivs[6][ci]
            tr = dxx + dyy
            det2 = dxx * dyy - dxy * dxy
            keep = (np.abs(value) >= params.contrast_threshold) & (det2 > 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                keep &= np.where(det2 > 0.0, tr * tr / np.where(det2 > 0, det2, 1.0)
                                 < edge_bound, False)
            for j in np.where(keep)[0]:
                i = ci[j]
                kx = (x[i] + delta[i, 0]) * oct_scale
                ky = (y[i] + delta[i, 1]) * oct_scale
                if not (0.0 <= kx <= img_w - 1 and 0.0 <= ky <= img_h - 1):
                    continue
                sigma = (params.base_sigma
                         * 2.0 ** ((l[i] + delta[i, 2]) / s)
                         * oct_scale)
                records.append((octave, int(l[i]), ky, kx, sigma, float(value[j])))

        # re-center the rest and keep the ones still inside the volume
        active = ~converged & ~singular
        if not np.any(active):
            break
        step = np.rint(np.clip(delta[active], -4, 4)).astype(np.int64)
        l = l[active] + step[:, 2]
        y = y[active] + step[:, 1]
        x = x[active] + step[:, 0]
        inside = ((l >= 1) & (l <= n_levels - 2)
                  & (y >= 1) & (y <= h - 2)
                  & (x >= 1) & (x <= w - 2))
        l, y, x = l[inside], y[inside], x[inside]

    return records


def detect_keypoints(ss: ScaleSpace, params: SiftParams) -> list[Keypoint]:
    """Find stable DoG extrema as keypoints (orientation still unassigned).

    A candidate is a strict extremum among its 26 scale-space neighbors;
    refinement runs Newton steps on the local quadratic fit, re-centering on
    offsets above half a pixel. Candidates are dropped for low interpolated
    contrast, edge-like curvature, or refinement leaving the volume.
    """
    records = []
    h_img = ss.gaussians[0][0].shape[0] * ss.input_scale
    w_img = ss.gaussians[0][0].shape[1] * ss.input_scale
    for octave, dog_stack in enumerate(ss.dogs):
        vol = np.stack(dog_stack)
        records.extend(
            _detect_in_octave(vol, octave, params, ss.input_scale,
                              int(round(w_img)), int(round(h_img)))
        )
    records.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    # re-centered candidates can converge onto an already-found extremum
    records = [r for i, r in enumerate(records) if i == 0 or r != records[i - 1]]
    return [
        Keypoint(
            x=float(np.float32(r[3])),
            y=float(np.float32(r[2])),
            sigma=float(np.float32(r[4])),
            orientation=0.0,
            dog_response=float(np.float32(r[5])),
        )
        for r in records
    ]


@dataclass
class GradientPyramid:
    """Per-level gradient magnitude/orientation of the Gaussian pyramid."""

    magnitudes: list  # [octave][level] -> float32 (h, w)
    orientations: list  # [octave][level] -> float32 (h, w), atan2(dy, dx)
    sigmas: np.ndarray  # same table as the ScaleSpace it came from
    input_scale: float
    scales_per_octave: int


def compute_gradients(ss: ScaleSpace) -> GradientPyramid:
    """Central-difference gradients for every Gaussian level."""
    mags, angs = [], []
    for stack in ss.gaussians:
        m_oct, a_oct = [], []
        for level in stack:
            gy, gx = np.gradient(level.astype(np.float64))
            m_oct.append(np.hypot(gx, gy))
            a_oct.append(np.arctan2(gy, gx))
        mags.append(m_oct)
        angs.append(a_oct)
    return GradientPyramid(
        magnitudes=mags, orientations=angs, sigmas=ss.sigmas,
        input_scale=ss.input_scale, scales_per_octave=ss.params.scales_per_octave,
    )


def _nearest_level(grads: GradientPyramid, sigma: float):
    """(octave, level) whose absolute blur is log-nearest to sigma."""
    diffs = np.abs(np.log(grads.sigmas) - math.log(sigma))
    flat = int(np.argmin(diffs))  # octave-major: ties resolve to finer octave
    n_levels = grads.sigmas.shape[1]
    return flat // n_levels, flat % n_levels


def _orientation_histogram(mag, ang, cx, cy, sigma_w):
    radius = max(int(round(3.0 * sigma_w)), 1)
    h, w = mag.shape
    y0, y1 = max(cy - radius, 0), min(cy + radius, h - 1)
    x0, x1 = max(cx - radius, 0), min(cx + radius, w - 1)
    if y0 > y1 or x0 > x1:
        return np.zeros(_ORI_BINS)
    dy = np.arange(y0, y1 + 1) - cy
    dx = np.arange(x0, x1 + 1) - cx
    weight = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma_w**2))
    bins = np.rint(ang[y0:y1 + 1, x0:x1 + 1] * (_ORI_BINS / (2.0 * math.pi)))
    bins = bins.astype(np.int64) % _ORI_BINS
    hist = np.bincount(
        bins.ravel(), weights=(weight * mag[y0:y1 + 1, x0:x1 + 1]).ravel(),
        minlength=_ORI_BINS,
    )
    # circular [1, 4, 6, 4, 1] / 16 smoothing
    return (6.0 * hist
            + 4.0 * (np.roll(hist, 1) + np.roll(hist, -1))
            + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0


def _dominant_orientations(hist: np.ndarray, peak_ratio: float) -> list[float]:
    peak_floor = peak_ratio * hist.max()
    if peak_floor <= 0.0:
        return []
    left = np.roll(hist, 1)
    right = np.roll(hist, -1)
    out = []
    for b in np.where((hist > left) & (hist > right) & (hist >= peak_floor))[0]:
        denom = left[b] - 2.0 * hist[b] + right[b]
        offset = 0.5 * (left[b] - right[b]) / denom if denom != 0.0 else 0.0
        theta = ((b + offset) % _ORI_BINS) * (2.0 * math.pi / _ORI_BINS)
        out.append(theta % (2.0 * math.pi))
    return sorted(out)


def _descriptor_vector(mag, ang, px, py, sigma_local, theta, clamp):
    """4x4x8 trilinearly-binned gradient histogram around one oriented keypoint."""
    cell_w = 3.0 * sigma_local
    spacing = cell_w / (_DESC_SAMPLES / _DESC_CELLS)
    idx = np.arange(_DESC_SAMPLES) - (_DESC_SAMPLES - 1) / 2.0
    u = (idx * spacing)[None, :].repeat(_DESC_SAMPLES, axis=0)
    v = (idx * spacing)[:, None].repeat(_DESC_SAMPLES, axis=1)

    cos_t, sin_t = math.cos(theta), math.sin(theta)
    sx = np.rint(px + u * cos_t - v * sin_t).astype(np.int64)
    sy = np.rint(py + u * sin_t + v * cos_t).astype(np.int64)
    h, w = mag.shape
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    if not np.any(ok):
        return None

    u, v, sx, sy = u[ok], v[ok], sx[ok], sy[ok]
    win_sigma = 2.0 * cell_w  # half the 4-cell window width
    weight = np.exp(-(u * u + v * v) / (2.0 * win_sigma**2))
    m = mag[sy, sx] * weight
    rel = np.mod(ang[sy, sx] - theta, 2.0 * math.pi)

    row_bin = v / cell_w + (_DESC_CELLS - 1) / 2.0
    col_bin = u / cell_w + (_DESC_CELLS - 1) / 2.0
    ori_bin = rel * (_DESC_ORI_BINS / (2.0 * math.pi))

    r0 = np.floor(row_bin).astype(np.int64)
    c0 = np.floor(col_bin).astype(np.int64)
    o0 = np.floor(ori_bin).astype(np.int64)
    fr, fc, fo = row_bin - r0, col_bin - c0, ori_bin - o0
    o0 %= _DESC_ORI_BINS

    hist = np.zeros((_DESC_CELLS + 2, _DESC_CELLS + 2, _DESC_ORI_BINS))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            for do, wo in ((0, 1.0 - fo), (1, fo)):
                np.add.at(
                    hist,
                    (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % _DESC_ORI_BINS),
                    m * wr * wc * wo,
                )
    vec = hist[1:-1, 1:-1, :].ravel()

    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None
    return _clamp_renormalize(vec / norm, clamp).astype(np.float32)


def _clamp_renormalize(unit_vec: np.ndarray, clamp: float) -> np.ndarray:
    """Fixed point of clamp-at-`clamp` followed by renormalization.

    Capped components sit exactly at `clamp`, the rest keep their mutual
    ratios, and the result is unit length, so both the norm and the cap hold
    simultaneously (the naive clamp->renormalize leaves components above the
    cap again).
    """
    if unit_vec.max() <= clamp:
        return unit_vec
    order = np.argsort(-unit_vec, kind="stable")
    ws = unit_vec[order]
    suffix = np.concatenate([np.cumsum((ws * ws)[::-1])[::-1], [0.0]])
    m_max = min(int(1.0 / clamp**2), ws.size)
    for m in range(1, m_max + 1):
        remaining = 1.0 - m * clamp * clamp
        if remaining <= 0.0 or suffix[m] <= 0.0:
            break
        c = math.sqrt(remaining / suffix[m])
        if c * ws[m - 1] >= clamp and (m == ws.size or c * ws[m] < clamp):
            out = unit_vec * c
            out[order[:m]] = clamp
            return out
    # not enough components to reach unit norm under the cap; best effort
    out = np.minimum(unit_vec, clamp)
    return out / np.linalg.norm(out)


def compute_descriptors(grads: GradientPyramid, keypoints,
                        params: SiftParams, image_id: str = "") -> FeatureSet:
    """Assign dominant orientations and build descriptors.

    Gradients are taken on the Gaussian level log-nearest each keypoint's
    scale. A 36-bin weighted orientation histogram is smoothed and its
    parabola-refined peaks at or above `orientation_peak_ratio` of the
    maximum each spawn an oriented copy of the keypoint. Descriptors are
    normalized, clamped at `descriptor_clamp`, and renormalized.
    """
    out_kps = []
    out_descs = []
    for kp in keypoints:
        octave, level = _nearest_level(grads, kp.sigma)
        oct_scale = grads.input_scale * (2.0 ** octave)
        mag = grads.magnitudes[octave][level]
        ang = grads.orientations[octave][level]
        px, py = kp.x / oct_scale, kp.y / oct_scale
        sigma_local = kp.sigma / oct_scale
        cx, cy = int(round(px)), int(round(py))
        if not (0 <= cx < mag.shape[1] and 0 <= cy < mag.shape[0]):
            continue

        hist = _orientation_histogram(mag, ang, cx, cy, 1.5 * sigma_local)
        for theta in _dominant_orientations(hist, params.orientation_peak_ratio):
            vec = _descriptor_vector(
                mag, ang, px, py, sigma_local, theta, params.descriptor_clamp
            )
            if vec is None:
                continue
            out_kps.append(replace(kp, orientation=float(np.float32(theta))))
            out_descs.append(vec)

    descriptors = (np.stack(out_descs) if out_descs
                   else np.zeros((0, _DESC_CELLS**2 * _DESC_ORI_BINS), dtype=np.float32))
    return FeatureSet(image_id=image_id, keypoints=out_kps, descriptors=descriptors)


def extract_features(img: GrayImage, params: SiftParams, image_id: str = "") -> FeatureSet:
    """Full pipeline: scale space -> keypoints -> oriented descriptors.

    Deterministic: identical input yields an identical FeatureSet, with
    keypoints in (octave, level, y, x, orientation) order.
    """
    ss = build_scale_space(img, params)
    kps = detect_keypoints(ss, params)
    grads = compute_gradients(ss)
    return compute_descriptors(grads, kps, params, image_id=image_id)
