"""Self-gating surrogates and initial hard bin assignment.

SG readouts are stacked into a Casorati matrix (time x samples), band-pass
filtered along time in a respiratory and a cardiac band, and the first
principal component of each filtered matrix is the surrogate. Respiratory
bins are amplitude quantiles with equal readout counts; cardiac bins split
each detected R-R interval into equal-duration phases.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from threadpoolctl import threadpool_limits

from emore.config import ImageGrid
from emore.errors import GatingError

RESP_BAND_HZ = (0.1, 0.5)
CARDIAC_BAND_HZ = (0.5, 3.0)
FILTER_ORDER = 4
DEFAULT_HR_MAX_BPM = 120.0


@dataclass
class SurrogateSignals:
    """Surrogates on the SG time grid plus their per-readout interpolation."""

    sg_time_ms: np.ndarray
    respiratory: np.ndarray
    cardiac: np.ndarray
    triggers_ms: np.ndarray
    time_ms: np.ndarray
    resp_amplitude: np.ndarray
    cardiac_phase: np.ndarray

    @property
    def n_readouts(self) -> int:
        return len(self.time_ms)


@dataclass
class HardAssignment:
    """g_n per readout as a 0-based flat bin k = resp * n_cardiac + cardiac."""

    resp_bin: np.ndarray
    cardiac_bin: np.ndarray
    n_resp: int
    n_cardiac: int

    @property
    def g(self) -> np.ndarray:
        return self.resp_bin * self.n_cardiac + self.cardiac_bin

    @property
    def n_bins(self) -> int:
        return self.n_resp * self.n_cardiac

    def __len__(self):
        return len(self.resp_bin)

    def one_hot(self, outlier_column: bool = True) -> np.ndarray:
        """w^(0): one-hot rows, with an empty outlier column by default."""
        n = len(self)
        w = np.zeros((n, self.n_bins + int(outlier_column)))
        w[np.arange(n), self.g] = 1.0
        return w

    @classmethod
    def from_flat(cls, g, grid: ImageGrid) -> "HardAssignment":
        g = np.asarray(g, dtype=np.int64)
        if g.size and (g.min() < 0 or g.max() >= grid.n_bins):
            raise GatingError("bin index outside 0..K-1")
        r, c = grid.split_bin(g)
        return cls(r, c, grid.n_resp, grid.n_cardiac)


def bandpass(x, band_hz, fs_hz, order: int = FILTER_ORDER):
    """Zero-phase Butterworth band-pass along axis 0."""
    nyq = fs_hz / 2.0
    lo, hi = band_hz
    if hi >= nyq:
        raise GatingError(f"SG sampling rate {fs_hz:.3g} Hz is too low for a {hi} Hz band edge")
    sos = sps.butter(order, (lo, hi), btype="bandpass", fs=fs_hz, output="sos")
    return sps.sosfiltfilt(sos, x, axis=0)


def first_component(matrix) -> np.ndarray:
    """Temporal course of the leading principal component (time on axis 0)."""
    centred = matrix - matrix.mean(axis=0)
    # threaded LAPACK changes the last bits with the thread count
    with threadpool_limits(limits=1, user_api="blas"):
        u, s, _ = np.linalg.svd(centred, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, float(np.abs(matrix).max())):
        raise GatingError("SG signal has zero temporal variance")
    pc = u[:, 0] * s[0]
    # the SVD sign is arbitrary; callers fix it, this only makes it repeatable
    return pc if pc[np.argmax(np.abs(pc))] > 0 else -pc


def _orient_respiratory(resp):
    """End-expiration is the more populated extreme and is put at the minimum.

    Population is compared between the two halves of the 5-95 percentile
    range, which keeps brief bulk-motion excursions from deciding the sign.
    """
    lo, hi = np.percentile(resp, [5.0, 95.0])
    mid = 0.5 * (lo + hi)
    near_lo = np.count_nonzero(resp < mid)
    near_hi = np.count_nonzero(resp > mid)
    return -resp if near_hi > near_lo else resp


def _orient_cardiac(card):
    """Sign with positive skewness, so the short contraction pulse is a peak."""
    c = card - card.mean()
    return card if np.mean(c ** 3) >= 0 else -card


def detect_triggers(cardiac, sg_time_ms, hr_max_bpm):
    """Peak times with a refractory gap of one beat at ``hr_max_bpm``."""
    dt = float(np.median(np.diff(sg_time_ms)))
    distance = max(1, int(np.floor(60000.0 / hr_max_bpm / dt)))
    peaks, _ = sps.find_peaks(cardiac, distance=distance)
    times = sg_time_ms[peaks].astype(float)
    # parabolic refinement between neighbouring samples
    inner = (peaks > 0) & (peaks < len(cardiac) - 1)
    p = peaks[inner]
    y0, y1, y2 = cardiac[p - 1], cardiac[p], cardiac[p + 1]
    denom = y0 - 2 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom < 0, 0.5 * (y0 - y2) / denom, 0.0)
    times[inner] += np.clip(offset, -0.5, 0.5) * dt
    return times


def cardiac_phase_from_triggers(time_ms, triggers_ms):
    """Phase in [0, 1) within each R-R interval, extrapolated at both ends."""
    trig = np.asarray(triggers_ms, float)
    if len(trig) < 2:
        raise GatingError("fewer than two cardiac triggers detected")
    if np.any(np.diff(trig) <= 0):
        raise GatingError("cardiac triggers must be strictly increasing")
    t = np.asarray(time_ms, float)
    beat = np.clip(np.searchsorted(trig, t, side="right") - 1, 0, len(trig) - 2)
    rr = trig[beat + 1] - trig[beat]
    phase = np.mod((t - trig[beat]) / rr, 1.0)
    return np.where(phase >= 1.0, 0.0, phase)


def surrogates_from_casorati(casorati, sg_time_ms, time_ms, hr_max_bpm=DEFAULT_HR_MAX_BPM):
    """Surrogates from an SG Casorati matrix of shape (n_sg, features).

    Complex matrices are split into real and imaginary feature columns.
    """
    casorati = np.asarray(casorati)
    sg_time_ms = np.asarray(sg_time_ms, float)
    if casorati.ndim != 2 or casorati.shape[0] != len(sg_time_ms):
        raise GatingError("Casorati matrix must be (n_sg, features) matching the SG times")
    if np.iscomplexobj(casorati):
        casorati = np.concatenate([casorati.real, casorati.imag], axis=1)
    casorati = casorati.astype(np.float64)
    if not np.all(np.isfinite(casorati)):
        raise GatingError("SG data contains non-finite values")
    duration_s = (sg_time_ms[-1] - sg_time_ms[0]) / 1000.0 if len(sg_time_ms) > 1 else 0.0
    if duration_s < 2.0 / RESP_BAND_HZ[0]:
        raise GatingError(
            f"scan of {duration_s:.1f} s is too short for two slow respiratory cycles"
        )
    fs = 1000.0 / float(np.median(np.diff(sg_time_ms)))

    resp = _orient_respiratory(first_component(bandpass(casorati, RESP_BAND_HZ, fs)))
    card = _orient_cardiac(first_component(bandpass(casorati, CARDIAC_BAND_HZ, fs)))
    triggers = detect_triggers(card, sg_time_ms, hr_max_bpm)
    time_ms = np.asarray(time_ms, float)
    return SurrogateSignals(
        sg_time_ms=sg_time_ms,
        respiratory=resp,
        cardiac=card,
        triggers_ms=triggers,
        time_ms=time_ms,
        resp_amplitude=np.interp(time_ms, sg_time_ms, resp),
        cardiac_phase=cardiac_phase_from_triggers(time_ms, triggers),
    )


def extract_surrogates(dataset, hr_max_bpm: float | None = None) -> SurrogateSignals:
    """Respiratory and cardiac surrogates from the SG readouts of ``dataset``."""
    if hr_max_bpm is None:
        cfg = dataset.meta.get("config", {})
        hr_max_bpm = float(cfg.get("hr_range_bpm", (0.0, DEFAULT_HR_MAX_BPM))[1])
    sg = np.flatnonzero(dataset.is_sg)
    if len(sg) < 8:
        raise GatingError("too few SG readouts")
    casorati = dataset.readouts[sg].reshape(len(sg), -1)
    return surrogates_from_casorati(casorati, dataset.time_ms[sg], dataset.time_ms, hr_max_bpm)


def quantile_bins(values, n_bins: int) -> np.ndarray:
    """Rank-based bins of equal size (differing by at most one)."""
    n = len(values)
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(values, kind="stable")] = np.arange(n)
    return (rank * n_bins) // n


def assign_bins(signals: SurrogateSignals, grid: ImageGrid) -> HardAssignment:
    if len(signals.triggers_ms) < 2:
        raise GatingError("fewer than two cardiac triggers detected")
    resp = quantile_bins(signals.resp_amplitude, grid.n_resp)
    card = np.minimum(
        np.floor(signals.cardiac_phase * grid.n_cardiac).astype(np.int64), grid.n_cardiac - 1
    )
    return HardAssignment(resp, card, grid.n_resp, grid.n_cardiac)


def gate(dataset) -> HardAssignment:
    return assign_bins(extract_surrogates(dataset), dataset.grid)


def write_gating_csv(path, signals: SurrogateSignals, assignment: HardAssignment) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "time_ms", "resp_amplitude", "cardiac_phase", "g"])
        rows = zip(signals.time_ms.tolist(), signals.resp_amplitude.tolist(),
                   signals.cardiac_phase.tolist(), assignment.g.tolist())
        for i, (t, a, p, g) in enumerate(rows):
            w.writerow([i, repr(t), repr(a), repr(p), g])
    return path


def read_assignment_csv(path, grid: ImageGrid) -> HardAssignment:
    with open(path, newline="") as fh:
        g = [int(r["g"]) for r in csv.DictReader(fh)]
    return HardAssignment.from_flat(g, grid)
