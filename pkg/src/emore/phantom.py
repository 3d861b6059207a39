"""Geometric dynamic phantom and self-gated Cartesian acquisition simulator.

World coordinates are millimetres, centred on the grid, with axis 0
superior-inferior (SI), axis 1 anterior-posterior (AP) and axis 2
left-right (LR). A 2D grid is the sagittal plane LR = 0 of the same 3D
world. Each readout is one full frequency-encode line along SI at a
phase-encode position; every ``sg_every``-th readout repeats the central
line for self-gating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from emore.config import ExperimentConfig, ImageGrid, check_fraction
from emore.dataset import AcquiredDataset
from emore.errors import ConfigError, GenerationError
from emore.operators import fft

SI, AP, LR = 0, 1, 2


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Ellipsoid:
    """One primitive. Later primitives paint over earlier ones.

    ``resp_coupling`` scales the scene's respiratory displacement,
    ``contraction`` is the fractional shrink of the semi-axes at peak
    cardiac contraction, and ``twist`` applies the scene's cardiac twist
    (in-plane rotation about the primitive centre).
    """

    center_mm: tuple[float, float, float]
    semi_mm: tuple[float, float, float]
    contrast: complex
    resp_coupling: float = 0.0
    contraction: float = 0.0
    twist: bool = False


@dataclass
class PhantomScene:
    primitives: list[Ellipsoid]
    contraction: np.ndarray  # (n_cardiac,) in [0, 1]
    twist_deg: np.ndarray  # (n_cardiac,)
    resp_shift_mm: np.ndarray  # (n_resp, 3)

    @property
    def n_cardiac(self) -> int:
        return len(self.contraction)

    @property
    def n_resp(self) -> int:
        return len(self.resp_shift_mm)

    def placed(self, prim: Ellipsoid, resp: int, cardiac: int):
        """Centre, semi-axes and twist angle of ``prim`` in a motion state."""
        center = np.asarray(prim.center_mm, float) + prim.resp_coupling * self.resp_shift_mm[resp]
        semi = np.asarray(prim.semi_mm, float) * (1.0 - prim.contraction * self.contraction[cardiac])
        angle = float(self.twist_deg[cardiac]) if prim.twist else 0.0
        return center, semi, angle


def cardiac_waveform(n_cardiac: int, width: float = 0.7, twist_deg: float = 6.0):
    """Contraction and twist per cardiac bin, sampled at bin centres.

    Contraction is a raised-cosine pulse centred on the trigger (phase 0),
    so the pulse is symmetric about the cycle wrap; the twist is odd about
    the trigger and makes mirror-phase frames distinct.
    """
    phase = (np.arange(n_cardiac) + 0.5) / n_cardiac
    d = (phase + 0.5) % 1.0 - 0.5
    pulse = np.where(np.abs(d) < width / 2, np.cos(np.pi * d / width) ** 2, 0.0)
    if n_cardiac == 1:
        pulse = np.zeros(1)
    return pulse, twist_deg * np.sin(2 * np.pi * phase)


def breathing_waveform(psi):
    """Normalized diaphragm position over one cycle; dwells at end-expiration."""
    return np.sin(np.pi * np.asarray(psi)) ** 4


def breathing_levels(n_resp: int, samples: int = 4096) -> np.ndarray:
    """Displacement of each respiratory bin, relative to the deepest bin.

    Bins are equal-count amplitude quantiles of :func:`breathing_waveform`,
    and each bin is drawn at the mean waveform value of its quantile, so the
    shallow bins near end-expiration sit closer together than the deep ones.
    """
    if n_resp == 1:
        return np.zeros(1)
    a = np.sort(breathing_waveform((np.arange(samples) + 0.5) / samples))
    levels = np.array([g.mean() for g in np.array_split(a, n_resp)])
    return (levels - levels[0]) / (levels[-1] - levels[0])


def default_scene(grid: ImageGrid, resp_shift_mm: float = 12.0) -> PhantomScene:
    """Torso with a beating, breathing heart, scaled to the grid's FOV."""
    fov = np.array(grid.shape[:2], float) * np.array(grid.voxel_mm[:2])
    s = min(fov) / 256.0
    depth = 130.0 * s if grid.ndim == 2 else grid.shape[2] * grid.voxel_mm[2] * 0.42

    def e(c, r, contrast, **kw):
        return Ellipsoid(
            (c[0] * s, c[1] * s, 0.0), (r[0] * s, r[1] * s, r[2]), contrast, **kw
        )

    prims = [
        e((0, 0), (100, 92, depth), 0.20 + 0j),
        e((-38, 8), (52, 66, depth * 0.8), 0.04 + 0j, resp_coupling=0.3),
        e((72, 8), (34, 72, depth * 0.8), 0.45 * np.exp(0.2j), resp_coupling=1.25),
        e((0, -74), (88, 12, min(depth, 16 * s)), 0.50 + 0j),
        e((-6, 22), (42, 35, 40 * s), 0.30 * np.exp(-0.1j), resp_coupling=1.0, contraction=0.12, twist=True),
        e((-6, 22), (29, 22, 27 * s), 1.00 + 0j, resp_coupling=1.0, contraction=0.38, twist=True),
    ]
    pulse, twist = cardiac_waveform(grid.n_cardiac)
    frac = breathing_levels(grid.n_resp)
    shift = np.zeros((grid.n_resp, 3))
    shift[:, SI] = resp_shift_mm * frac
    shift[:, AP] = 0.2 * resp_shift_mm * frac
    return PhantomScene(prims, pulse, twist, shift)


def voxel_coords(shape, voxel_mm, supersample=1):
    """Sample coordinates (mm), shape ``(*shape, prod(supersample), 3)``.

    ``supersample`` is an int or one count per axis.
    """
    ndim = len(shape)
    ss = np.broadcast_to(np.asarray(supersample, dtype=int), (ndim,))
    axes = []
    for n, v, s in zip(shape, voxel_mm, ss):
        centers = (np.arange(n) - (n - 1) / 2.0) * v
        offs = ((np.arange(s) + 0.5) / s - 0.5) * v
        axes.append((centers[:, None] + offs[None, :]))
    grids = np.meshgrid(*[a.ravel() for a in axes], indexing="ij")
    pts = np.zeros(grids[0].shape + (3,))
    for d in range(ndim):
        pts[..., d] = grids[d]
    # regroup supersamples next to their voxel
    new_shape = []
    for n, s in zip(shape, ss):
        new_shape += [n, s]
    pts = pts.reshape(tuple(new_shape) + (3,))
    order = list(range(0, 2 * ndim, 2)) + list(range(1, 2 * ndim, 2)) + [2 * ndim]
    pts = pts.transpose(order)
    return pts.reshape(tuple(shape) + (int(np.prod(ss)), 3))


def _rot(axis: int, deg: float) -> np.ndarray:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def _paint(scene: PhantomScene, pts, resp, cardiac):
    values = np.zeros(pts.shape[:-1], dtype=np.complex128)
    for prim in scene.primitives:
        center, semi, angle = scene.placed(prim, resp, cardiac)
        rel = pts - center
        if angle:
            rel = rel @ _rot(LR, angle)  # rotate samples by -angle
        q = np.sum((rel / semi) ** 2, axis=-1)
        values[q <= 1.0] = prim.contrast
    return values


def _check_fov(scene: PhantomScene, grid: ImageGrid):
    half = np.array(grid.shape) * np.array(grid.voxel_mm) / 2.0
    for prim in scene.primitives:
        for r in range(scene.n_resp):
            for c in range(scene.n_cardiac):
                center, semi, angle = scene.placed(prim, r, c)
                extent = semi.copy()
                if angle:
                    extent[:2] = semi[:2].max()
                for d in range(grid.ndim):
                    if abs(center[d]) + extent[d] > half[d] + 1e-9:
                        raise GenerationError(
                            f"primitive at {prim.center_mm} leaves the field of view "
                            f"in motion state (resp={r}, cardiac={c})"
                        )


def render_truth(scene: PhantomScene, grid: ImageGrid, supersample: int = 4):
    """Ground-truth stack, shape ``(n_resp, n_cardiac, *grid.shape)``.

    ``supersample`` sub-samples per axis are averaged for partial-volume
    edges; ``supersample=1`` gives hard masks.
    """
    if scene.n_cardiac != grid.n_cardiac or scene.n_resp != grid.n_resp:
        raise ConfigError("scene motion states do not match the grid bin counts")
    _check_fov(scene, grid)
    pts = voxel_coords(grid.shape, grid.voxel_mm, supersample)
    stack = np.zeros(grid.stack_shape, dtype=np.complex128)
    for r in range(grid.n_resp):
        for c in range(grid.n_cardiac):
            stack[r, c] = _paint(scene, pts, r, c).mean(axis=-1)
    return stack


# ---------------------------------------------------------------------------
# rigid bulk-motion states


@dataclass(frozen=True)
class OutlierState:
    state_id: int
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_deg: float = 0.0
    rotation_axis: int = LR

    def rotation(self) -> np.ndarray:
        return _rot(self.rotation_axis, self.rotation_deg)


OUTLIER_STATES = {
    0: OutlierState(0),
    1: OutlierState(1, translation_mm=(20.0, 0.0, 0.0)),
    2: OutlierState(2, translation_mm=(-20.0, 0.0, 0.0)),
    3: OutlierState(3, rotation_deg=10.0, rotation_axis=AP),
    4: OutlierState(4, rotation_deg=-10.0, rotation_axis=AP),
    5: OutlierState(5, rotation_deg=10.0, rotation_axis=SI),
    6: OutlierState(6, rotation_deg=-10.0, rotation_axis=SI),
    7: OutlierState(7, rotation_deg=-10.0, rotation_axis=LR),
}


def apply_outlier_state(volume, state, voxel_mm):
    """Rigidly move ``volume`` about the grid centre, linear interpolation.

    ``state`` is an :class:`OutlierState` or its id. For a 2D (sagittal)
    volume only the in-plane part of the motion can be represented: the
    in-plane translation and the 2x2 in-plane block of the rotation.
    """
    if not isinstance(state, OutlierState):
        if int(state) not in OUTLIER_STATES:
            raise ConfigError(f"unknown outlier state {state}")
        state = OUTLIER_STATES[int(state)]
    if state.state_id == 0:
        return volume
    volume = np.asarray(volume)
    ndim = volume.ndim
    vox = np.asarray(voxel_mm, float)[:ndim]
    rot = state.rotation()[:ndim, :ndim]
    t = np.asarray(state.translation_mm, float)[:ndim]
    center = (np.array(volume.shape) - 1) / 2.0
    # output voxel o -> input voxel i = center + V^-1 R^T (V (o - center) - t)
    matrix = np.diag(1.0 / vox) @ rot.T @ np.diag(vox)
    offset = center - matrix @ center - np.diag(1.0 / vox) @ rot.T @ t

    def warp(a):
        return ndimage.affine_transform(a, matrix, offset=offset, order=1, mode="constant", cval=0.0)

    if np.iscomplexobj(volume):
        return warp(volume.real) + 1j * warp(volume.imag)
    return warp(volume)


class _SlabSources:
    """2D outlier sources: move a rendered 3D slab, keep its centre slice.

    A sagittal image cannot represent rotations about in-plane axes, so the
    slab around the imaging plane is rendered from the scene, moved in 3D
    and resliced. The most recent slab is cached.
    """

    def __init__(self, scene, grid, supersample):
        self.scene, self.grid = scene, grid
        self.vz = min(grid.voxel_mm)
        reach = max(n * v for n, v in zip(grid.shape, grid.voxel_mm)) / 2.0
        max_deg = max(abs(s.rotation_deg) for s in OUTLIER_STATES.values())
        self.half = int(math.ceil(reach * math.sin(math.radians(max_deg)) / self.vz)) + 2
        shape = grid.shape + (2 * self.half + 1,)
        self.vox = grid.voxel_mm + (self.vz,)
        ss = min(supersample, 2)
        self.pts = voxel_coords(shape, self.vox, (ss, ss, 1))
        self._key, self._slab = None, None

    def __call__(self, resp, cardiac, state):
        if self._key != (resp, cardiac):
            self._key = (resp, cardiac)
            self._slab = _paint(self.scene, self.pts, resp, cardiac).mean(axis=-1)
        moved = apply_outlier_state(self._slab, state, self.vox)
        return moved[..., self.half]


# ---------------------------------------------------------------------------
# motion schedule


@dataclass
class MotionSchedule:
    """Per-readout ground truth of the simulated scan."""

    time_ms: np.ndarray
    resp_amplitude: np.ndarray
    resp_phase: np.ndarray
    cardiac_phase: np.ndarray
    cardiac_bin: np.ndarray
    outlier_state: np.ndarray
    n_cardiac: int
    n_resp: int
    resp_periods_s: list = field(default_factory=list)
    rr_ms: list = field(default_factory=list)
    r_wave_ms: list = field(default_factory=list)
    episodes: list = field(default_factory=list)  # (start_ms, duration_ms, state)
    heart_rate_bpm: float = 0.0
    resp_period_s: float = 0.0

    def __len__(self):
        return len(self.time_ms)

    @property
    def true_bin(self) -> np.ndarray:
        return self.resp_phase * self.n_cardiac + self.cardiac_bin

    @property
    def is_outlier(self) -> np.ndarray:
        return self.outlier_state != 0

    def summary(self) -> dict:
        return {
            "heart_rate_bpm": self.heart_rate_bpm,
            "resp_period_s": self.resp_period_s,
            "resp_periods_s": list(self.resp_periods_s),
            "rr_ms": list(self.rr_ms),
            "r_wave_ms": list(self.r_wave_ms),
            "episodes": [list(e) for e in self.episodes],
            "n_cardiac": self.n_cardiac,
            "n_resp": self.n_resp,
            "corrupted_readouts": int(np.count_nonzero(self.outlier_state)),
        }


def rng_streams(seed: int):
    """Independent generators: physiology, bulk motion, sampling, noise.

    Physiology does not depend on the corruption fraction, so one seed
    gives one digital subject across all corruption levels.
    """
    seqs = np.random.SeedSequence(int(seed)).spawn(4)
    return [np.random.default_rng(s) for s in seqs]


def _episodes(n, fraction, n_episodes, rng):
    n_bad = int(round(fraction * n))
    if n_bad == 0:
        return []
    n_ep = min(n_episodes, n_bad)
    lengths = np.full(n_ep, n_bad // n_ep)
    lengths[: n_bad % n_ep] += 1
    free = n - n_bad
    cuts = np.sort(rng.integers(0, free + 1, size=n_ep))
    gaps = np.diff(np.concatenate(([0], cuts)))
    states = rng.integers(1, 8, size=n_ep)
    out, pos = [], 0
    for gap, length, state in zip(gaps, lengths, states):
        pos += int(gap)
        out.append((pos, int(length), int(state)))
        pos += int(length)
    return out


def build_schedule(config: ExperimentConfig, seed: int, fraction: float = 0.0) -> MotionSchedule:
    """Breathing, heartbeat and bulk-motion truth for every readout."""
    check_fraction(fraction)
    grid = config.grid
    phys, motion, _, _ = rng_streams(seed)
    n = config.n_readouts
    tr = config.tr_ms
    t = np.arange(n) * tr
    scan_ms = n * tr

    # respiration: sin^4 cycles dwell at end-expiration
    base_period = phys.uniform(*config.resp_period_range_s)
    periods, depths, starts = [], [], []
    start = -phys.uniform(0.0, base_period) * 1000.0
    while start < scan_ms:
        p = base_period + phys.uniform(0.0, config.resp_period_jitter_s)
        periods.append(p)
        depths.append(phys.uniform(0.85, 1.0))
        starts.append(start)
        start += p * 1000.0
    starts = np.array(starts)
    cyc = np.searchsorted(starts, t, side="right") - 1
    psi = (t - starts[cyc]) / (np.array(periods)[cyc] * 1000.0)
    amplitude = np.array(depths)[cyc] * breathing_waveform(psi)
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(amplitude, kind="stable")] = np.arange(n)
    resp_phase = (rank * grid.n_resp) // n

    # heartbeat
    hr = phys.uniform(*config.hr_range_bpm)
    base_rr = 60000.0 / hr
    rr, r_wave = [], []
    r = -phys.uniform(0.0, base_rr)
    while r < scan_ms:
        interval = base_rr + phys.uniform(0.0, config.rr_jitter_ms)
        r_wave.append(r)
        rr.append(interval)
        r += interval
    r_wave_a = np.array(r_wave)
    beat = np.searchsorted(r_wave_a, t, side="right") - 1
    phase = (t - r_wave_a[beat]) / np.array(rr)[beat]
    cardiac_bin = np.minimum((phase * grid.n_cardiac).astype(np.int64), grid.n_cardiac - 1)

    states = np.zeros(n, dtype=np.int64)
    episodes = []
    for first, length, state in _episodes(n, fraction, config.n_episodes, motion):
        states[first:first + length] = state
        episodes.append((first * tr, length * tr, state))

    return MotionSchedule(
        time_ms=t,
        resp_amplitude=amplitude,
        resp_phase=resp_phase.astype(np.int64),
        cardiac_phase=phase,
        cardiac_bin=cardiac_bin,
        outlier_state=states,
        n_cardiac=grid.n_cardiac,
        n_resp=grid.n_resp,
        resp_periods_s=periods,
        rr_ms=rr,
        r_wave_ms=r_wave,
        episodes=episodes,
        heart_rate_bpm=hr,
        resp_period_s=base_period,
    )


# ---------------------------------------------------------------------------
# coil maps


def _loop_field(points, center, radius, n_seg=72):
    """Biot-Savart field of a unit-current loop whose normal is along AP."""
    phi = np.linspace(0.0, 2 * np.pi, n_seg + 1)
    ring = np.zeros((n_seg + 1, 3))
    ring[:, SI] = radius * np.cos(phi)
    ring[:, LR] = radius * np.sin(phi)
    ring += center
    dl = np.diff(ring, axis=0)
    mid = 0.5 * (ring[1:] + ring[:-1])
    b = np.zeros(points.shape)
    for seg, m in zip(dl, mid):
        rel = points - m
        dist3 = np.sum(rel**2, axis=-1, keepdims=True) ** 1.5
        b += np.cross(seg, rel) / dist3
    return b


def make_coil_maps(grid: ImageGrid, n_coils: int, layout: str = "biot-savart"):
    """Coil sensitivities, shape ``(n_coils, *grid.shape)``.

    ``"uniform"`` gives all-ones maps. ``"biot-savart"`` places loops
    evenly on an anterior and a posterior plane just outside the FOV and
    normalises so the root-sum-of-squares peaks at 1.
    """
    if n_coils < 1:
        raise ConfigError("need at least one coil")
    if layout == "uniform":
        return np.ones((n_coils,) + grid.shape, dtype=np.complex128)
    if layout != "biot-savart":
        raise ConfigError(f"unknown coil layout {layout!r}")
    half = np.array(grid.shape) * np.array(grid.voxel_mm) / 2.0
    depth = half[LR] if grid.ndim == 3 else half[AP]
    plane = half[AP] + 10.0
    radius = 0.3 * half[SI]
    pts = voxel_coords(grid.shape, grid.voxel_mm)[..., 0, :]
    n_ant = (n_coils + 1) // 2
    maps = []
    for i in range(n_coils):
        anterior = i < n_ant
        idx = i if anterior else i - n_ant
        count = n_ant if anterior else n_coils - n_ant
        x = 0.0 if count == 1 else (-0.7 + 1.4 * idx / (count - 1)) * half[SI]
        z = (0.35 if idx % 2 == 0 else -0.35) * depth if count > 1 else 0.0
        center = np.array([x, plane if anterior else -plane, z])
        b = _loop_field(pts, center, radius)
        maps.append(b[..., AP] - 1j * b[..., LR])
    maps = np.array(maps)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps / rss.max()


# ---------------------------------------------------------------------------
# sampling and acquisition


def pe_positions(grid: ImageGrid) -> np.ndarray:
    """All phase-encode positions as signed frequencies, shape (P, ndim-1)."""
    freqs = [np.fft.fftfreq(n, 1.0 / n).astype(np.int64) for n in grid.shape[1:]]
    mesh = np.meshgrid(*freqs, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def line_indices(grid: ImageGrid, pe) -> np.ndarray:
    """Flat k-space indices of the full SI readout at phase-encode ``pe``."""
    pe = np.atleast_1d(pe)
    sub = [np.arange(grid.shape[0])]
    for n, k in zip(grid.shape[1:], pe):
        sub.append(np.full(grid.shape[0], int(k) % n))
    return np.ravel_multi_index(tuple(sub), grid.shape)


def sampling_density(grid: ImageGrid, floor: float = 0.05) -> np.ndarray:
    """Centre-weighted probability over phase-encode positions."""
    pos = pe_positions(grid).astype(float)
    kmax = np.array([n / 2.0 for n in grid.shape[1:]])
    radius = np.sqrt(np.sum((pos / kmax) ** 2, axis=1))
    p = (1.0 - np.minimum(radius, 1.0)) ** 2 + floor
    return p / p.sum()


def make_sampling(grid: ImageGrid, n_readouts: int, sg_every: int, rng):
    """Phase-encode choice per readout; SG readouts repeat the centre line.

    Returns ``(indices (N, n_si), is_sg (N,), pe_index (N,))`` where
    ``pe_index`` points into :func:`pe_positions`.
    """
    positions = pe_positions(grid)
    density = sampling_density(grid)
    is_sg = (np.arange(n_readouts) % sg_every) == 0
    pe_index = rng.choice(len(positions), size=n_readouts, p=density)
    pe_index[is_sg] = 0  # position 0 is DC in the fftfreq layout
    table = np.stack([line_indices(grid, p) for p in positions])
    return table[pe_index], is_sg, pe_index


def simulate_acquisition(truth, schedule: MotionSchedule, config: ExperimentConfig,
                         seed: int, scene: PhantomScene | None = None,
                         maps=None, meta: dict | None = None) -> AcquiredDataset:
    """Sample the scheduled motion state of every readout and add noise.

    Readouts inside a bulk-motion episode see the truth moved by that
    episode's rigid state. Noise is complex circular Gaussian with
    ``E|n|^2 = sigma^2`` set so the acquisition reaches ``config.snr_db``.
    """
    grid = config.grid
    if truth.shape != grid.stack_shape:
        raise ConfigError(f"truth shape {truth.shape} does not match grid {grid.stack_shape}")
    n = len(schedule)
    _, _, samp_rng, noise_rng = rng_streams(seed)
    if maps is None:
        maps = make_coil_maps(grid, config.n_coils)
    if scene is None and grid.ndim == 2:
        scene = default_scene(grid, config.resp_shift_mm)
    indices, is_sg, pe_index = make_sampling(grid, n, config.sg_every, samp_rng)

    n_coils = maps.shape[0]
    signal = np.empty((n, n_coils, indices.shape[1]), dtype=np.complex128)
    keys = np.stack([schedule.resp_phase, schedule.cardiac_bin, schedule.outlier_state], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    slabs = _SlabSources(scene, grid, config.supersample) if grid.ndim == 2 else None
    for u, (r, c, s) in enumerate(uniq):
        sel = np.flatnonzero(inverse == u)
        if s == 0:
            src = truth[r, c]
        elif grid.ndim == 2:
            src = slabs(r, c, OUTLIER_STATES[int(s)])
        else:
            src = apply_outlier_state(truth[r, c], int(s), grid.voxel_mm)
        k = fft(maps * src, axes=tuple(range(1, maps.ndim))).reshape(n_coils, -1)
        signal[sel] = np.moveaxis(k[:, indices[sel]], 0, 1)

    power = float(np.mean(np.abs(signal) ** 2))
    if math.isinf(config.snr_db):
        sigma = 0.0
        data = signal
    else:
        sigma = math.sqrt(power / 10.0 ** (config.snr_db / 10.0))
        noise = noise_rng.standard_normal(signal.shape + (2,))
        data = signal + (sigma / math.sqrt(2.0)) * (noise[..., 0] + 1j * noise[..., 1])

    return AcquiredDataset(
        grid=grid,
        readouts=data.astype(np.complex64),
        indices=indices.astype(np.int64),
        is_sg=is_sg,
        time_ms=schedule.time_ms.astype(np.float64),
        coil_maps=maps.astype(np.complex64),
        sigma=sigma,
        tr_ms=config.tr_ms,
        schedule=schedule,
        truth=truth.astype(np.complex64),
        meta=dict(meta or {}),
    )


def generate_dataset(config: ExperimentConfig, seed: int, fraction: float) -> AcquiredDataset:
    """Scene, truth, schedule and acquisition for one (seed, fraction) pair."""
    check_fraction(fraction)
    scene = default_scene(config.grid, config.resp_shift_mm)
    truth = render_truth(scene, config.grid, supersample=config.supersample)
    schedule = build_schedule(config, seed, fraction)
    meta = {
        "dataset_id": dataset_id(seed, fraction),
        "seed": int(seed),
        "fraction": float(fraction),
        "snr_db": config.snr_db,
        "config": config.to_dict(),
    }
    return simulate_acquisition(truth, schedule, config, seed, scene=scene, meta=meta)


def dataset_id(seed: int, fraction: float) -> str:
    return f"seed{int(seed):03d}_frac{int(round(fraction * 100)):02d}"
