"""Image-quality and bin-assignment metrics.

All image metrics work on magnitudes of complex stacks shaped
``(n_resp, n_cardiac, *spatial)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from emore.errors import MetricError

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MAX_STEEPNESS = 8.0  # sigmoid steepness bound, per voxel


def _pair(estimate, truth):
    est = np.abs(np.asarray(estimate))
    ref = np.abs(np.asarray(truth))
    if est.shape != ref.shape:
        raise MetricError(f"shape mismatch {est.shape} vs {ref.shape}")
    return est, ref


def psnr(estimate, truth) -> float:
    """20 log10(max|truth| / RMSE) over every voxel of every bin.

    Identical magnitudes give ``math.inf``.
    """
    est, ref = _pair(estimate, truth)
    peak = float(ref.max())
    if peak <= 0:
        raise MetricError("truth is identically zero")
    mse = float(np.mean((est - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(mse))


def format_psnr(value: float) -> str:
    return "exact" if math.isinf(value) else repr(float(value))


def _gaussian(image):
    return ndimage.gaussian_filter(
        image, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA
    )


def ssim_map(a, b, data_range: float):
    """Local SSIM of two 2D images with an 11x11 Gaussian window."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _gaussian(a)
    mu_b = _gaussian(b)
    saa = _gaussian(a * a) - mu_a ** 2
    sbb = _gaussian(b * b) - mu_b ** 2
    sab = _gaussian(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def _slices(stack):
    """2D slices of a magnitude stack; 3D volumes are cut along the last axis."""
    flat = stack.reshape((-1,) + stack.shape[-3:]) if stack.ndim == 5 else stack.reshape(
        (-1,) + stack.shape[-2:])
    if stack.ndim == 5:
        for vol in flat:
            for z in range(vol.shape[-1]):
                yield vol[..., z]
    else:
        yield from flat


def ssim(estimate, truth, data_range: float | None = None) -> float:
    """Mean SSIM over every 2D slice of every bin, on magnitudes."""
    est, ref = _pair(estimate, truth)
    if data_range is None:
        data_range = float(ref.max())
    if not data_range > 0:
        raise MetricError("SSIM needs a truth with a positive dynamic range")
    if est.ndim == 2:
        return float(np.mean(ssim_map(est, ref, data_range)))
    values = [np.mean(ssim_map(e, r, data_range)) for e, r in zip(_slices(est), _slices(ref))]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# edge sharpness


@dataclass
class EdgeProfileSpec:
    """Line profiles across an intensity boundary, per respiratory bin.

    ``segments[r]`` lists ``(start, end)`` in-plane voxel coordinates used on
    the image of respiratory bin ``r`` at cardiac bin ``cardiac_bin``. In 3D
    the in-plane coordinates apply to slice ``slice_index``.
    """

    segments: list
    cardiac_bin: int = 0
    samples: int = 16
    slice_index: int | None = None

    def __post_init__(self):
        if self.samples < 8:
            raise MetricError("edge profiles need at least 8 samples")


def _sigmoid(p, a, b, c, p0):
    return a + b / (1.0 + np.exp(-c * (p - p0)))


def fit_sigmoid(profile, positions=None):
    """Least-squares sigmoid fit; returns (a, b, c, p0, success).

    The steepness is bounded by ``MAX_STEEPNESS`` because an ideal step has
    no finite maximum-likelihood slope.
    """
    y = np.asarray(profile, dtype=np.float64)
    p = np.arange(len(y), dtype=np.float64) if positions is None else np.asarray(positions, float)
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi)):
        return lo, 0.0, 0.0, float(p.mean()), False
    # fit on the normalized profile so solver tolerances do not depend on scale
    u = (y - lo) / span
    rising = np.mean(u[len(u) // 2:]) >= np.mean(u[: len(u) // 2])
    a0, b0 = (0.0, 1.0) if rising else (1.0, -1.0)
    p0 = float(p[np.argmin(np.abs(u - 0.5))])
    step = float(np.median(np.diff(p)))
    c0 = 1.0 / step

    def resid(theta):
        return _sigmoid(p, *theta) - u

    lower = [-np.inf, -np.inf, 0.0, p.min()]
    upper = [np.inf, np.inf, MAX_STEEPNESS / step, p.max()]
    x0 = [a0, b0, min(c0, upper[2]), p0]
    sol = least_squares(resid, x0, bounds=(lower, upper), method="trf", x_scale="jac")
    a, b, c, p0 = sol.x
    ok = bool(sol.success) and abs(b) > 1e-3
    a, b = lo + span * a, span * b
    return float(a), float(b), float(c), float(p0), ok


def profile_values(image, start, end, samples: int):
    """Magnitude sampled along a segment with linear interpolation."""
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    t = np.linspace(0.0, 1.0, samples)
    coords = start[:, None] + (end - start)[:, None] * t[None, :]
    vals = ndimage.map_coordinates(np.abs(image), coords, order=1, mode="nearest")
    spacing = float(np.linalg.norm(end - start)) / (samples - 1)
    return vals, t * (samples - 1) * spacing


def edge_sharpness(stack, spec: EdgeProfileSpec) -> float:
    """Mean contrast-normalized maximum slope c/4 (1/voxel) over all profiles.

    Profiles with no transition are skipped; if more than half of the
    profiles fail to fit, a :class:`MetricError` is raised.
    """
    stack = np.asarray(stack)
    slopes, failures, total = [], 0, 0
    for r, segs in enumerate(spec.segments):
        image = stack[r, spec.cardiac_bin]
        if spec.slice_index is not None:
            image = image[..., spec.slice_index]
        for start, end in segs:
            total += 1
            vals, pos = profile_values(image, start, end, spec.samples)
            _, b, c, _, ok = fit_sigmoid(vals, pos)
            if b == 0.0:
                continue  # flat profile, excluded by policy
            if not ok:
                failures += 1
                continue
            slopes.append(c / 4.0)
    if total == 0:
        raise MetricError("edge profile spec has no segments")
    if failures > total / 2 or not slopes:
        raise MetricError(f"sigmoid fit failed on {failures} of {total} profiles")
    return float(np.mean(slopes))


def edge_spec_from_scene(scene, grid, prim_index: int = -1, n_profiles: int = 8,
                         inner: float = 0.4, outer: float = 1.3, samples: int = 16,
                         cardiac_bin: int | None = None) -> EdgeProfileSpec:
    """Radial profiles across the boundary of one primitive (the blood pool).

    The cardiac bin defaults to the least contracted frame. Profiles run
    from ``inner`` to ``outer`` times the boundary radius along each ray.
    """
    from emore.phantom import LR, _rot

    prim = scene.primitives[prim_index]
    if cardiac_bin is None:
        cardiac_bin = int(np.argmin(scene.contraction))
    voxel = np.asarray(grid.voxel_mm[:2])
    offset = (np.asarray(grid.shape[:2]) - 1) / 2.0
    segments = []
    for r in range(grid.n_resp):
        center, semi, angle = scene.placed(prim, r, cardiac_bin)
        rot = _rot(LR, angle)
        segs = []
        for j in range(n_profiles):
            phi = 2 * np.pi * (j + 0.5) / n_profiles
            local = np.array([semi[0] * np.cos(phi), semi[1] * np.sin(phi), 0.0])
            edge = rot @ local
            to_vox = lambda f: (center[:2] + f * edge[:2]) / voxel + offset  # noqa: E731
            segs.append((to_vox(inner), to_vox(outer)))
        segments.append(segs)
    slice_index = grid.shape[2] // 2 if grid.ndim == 3 else None
    return EdgeProfileSpec(segments, cardiac_bin=cardiac_bin, samples=samples,
                           slice_index=slice_index)


# ---------------------------------------------------------------------------
# bin assignment quality


def true_weights(schedule, n_bins: int | None = None) -> np.ndarray:
    """One-hot truth participation (N, K+1); corrupted readouts sit in column K."""
    k = schedule.n_resp * schedule.n_cardiac if n_bins is None else n_bins
    target = np.where(schedule.is_outlier, k, schedule.true_bin)
    w = np.zeros((len(target), k + 1))
    w[np.arange(len(target)), target] = 1.0
    return w


def brier(w, truth) -> float:
    """Mean over readouts of the squared distance between weight rows."""
    w = np.asarray(w, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if w.shape != truth.shape:
        raise MetricError(f"weight shapes differ: {w.shape} vs {truth.shape}")
    return float(np.mean(np.sum((truth - w) ** 2, axis=1)))


@dataclass
class DetectionScores:
    precision: float
    recall: float
    flagged: int = 0
    true_outliers: int = 0
    true_positives: int = 0
    extra: dict = field(default_factory=dict)


def outlier_detection_scores(w, is_outlier, threshold: float = 0.5) -> DetectionScores:
    """Precision and recall of ``w[:, K] > threshold`` against truth labels.

    A ratio with an empty denominator is defined as 1.
    """
    w = np.asarray(w)
    truth = np.asarray(is_outlier, dtype=bool)
    if w.shape[0] != truth.shape[0]:
        raise MetricError("weights and outlier labels differ in length")
    flagged = w[:, -1] > threshold
    tp = int(np.count_nonzero(flagged & truth))
    n_flag = int(np.count_nonzero(flagged))
    n_true = int(np.count_nonzero(truth))
    precision = tp / n_flag if n_flag else 1.0
    recall = tp / n_true if n_true else 1.0
    return DetectionScores(precision, recall, n_flag, n_true, tp)
