"""EM-guided soft bin correction with an outlier bin, and the CS baseline.

Weights are an ``(N, K+1)`` array whose last column is the outlier bin.
Bins use the flat 0-based order ``k = resp * n_cardiac + cardiac``; the
image stack has shape ``(n_resp, n_cardiac, *spatial)``.

The data term of bin k is ``sum_n w[n, k] / (L sigma^2) * ||A_n x_k - y_n||^2``.
Because every readout is a Cartesian line, its normal operator collapses to
``S^H F^H diag(D_k) F S`` with ``D_k`` the summed weights per k-space
location, and the right-hand side is the weighted data gridded per bin.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from emore.config import SolverParams
from emore.errors import ConfigError, SolverError
from emore.operators import (
    BinnedNormalOperator,
    coil_kspace,
    conjugate_gradient,
    diff,
    diff_adjoint,
    fft,
    ifft,
    real_inner,
    sq_norm,
    tv_axes,
)

TRACE_FIELDS = ("iteration", "objective", "image_change", "outlier_mass", "cg_iterations")


# ---------------------------------------------------------------------------
# prior and E-step


def make_prior(g, n_bins: int, alpha_g: float, alpha_o: float) -> np.ndarray:
    """Informative prior theta of shape (N, K+1) built from hard bins ``g``.

    With a single valid bin there is no "elsewhere" mass, so the two entries
    are rescaled to sum to one.
    """
    g = np.asarray(g, dtype=np.int64)
    if not (0 <= alpha_g and 0 <= alpha_o and alpha_g + alpha_o <= 1 + 1e-12):
        raise ConfigError("need alpha_g, alpha_o >= 0 and alpha_g + alpha_o <= 1")
    if g.size and (g.min() < 0 or g.max() >= n_bins):
        raise ConfigError("hard assignment outside 0..K-1")
    n = g.size
    if n_bins == 1:
        total = alpha_g + alpha_o
        if total <= 0:
            raise ConfigError("alpha_g + alpha_o must be positive when K = 1")
        theta = np.empty((n, 2))
        theta[:, 0] = alpha_g / total
        theta[:, 1] = alpha_o / total
        return theta
    rest = (1.0 - alpha_g - alpha_o) / (n_bins - 1)
    theta = np.full((n, n_bins + 1), max(rest, 0.0))
    theta[np.arange(n), g] = alpha_g
    theta[:, n_bins] = alpha_o
    return theta


def posterior_weights(residuals, prior, readout_length: int, sigma: float, tau: float):
    """Row-normalized posterior from residual energies ``(N, K)``.

    ``log w[n, k] = log theta[n, k] - r[n, k] / (L sigma^2)`` for valid bins and
    ``log theta[n, K] - tau^2`` for the outlier bin (``tau`` in units of sigma),
    normalized per row after subtracting the row maximum.
    """
    if not sigma > 0:
        raise ConfigError("noise sigma must be positive for the E-step likelihood")
    residuals = np.asarray(residuals, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    n, k = residuals.shape
    if prior.shape != (n, k + 1):
        raise ConfigError(f"prior shape {prior.shape} does not match residuals {residuals.shape}")
    loglik = np.empty((n, k + 1))
    loglik[:, :k] = -residuals / (readout_length * sigma ** 2)
    loglik[:, k] = -float(tau) ** 2
    with np.errstate(divide="ignore"):
        logw = np.log(prior) + loglik
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    return w


# ---------------------------------------------------------------------------
# readout groups


@dataclass
class _Group:
    pattern: np.ndarray  # (S,) flat k-space indices shared by the rows
    rows: np.ndarray  # readout indices
    centred: np.ndarray  # (n_rows, C*S) complex128, data minus group mean
    mean: np.ndarray  # (C*S,) group mean of the data
    centred_energy: np.ndarray  # (n_rows,)


class ReadoutBank:
    """Readouts grouped by identical sampling pattern.

    Data are centred per group so the residual expansion
    ``||y - p||^2 = ||y'||^2 - 2 Re <y', p'> + ||p'||^2`` cancels only
    motion-scale differences, not the full signal energy.
    """

    def __init__(self, dataset):
        self.grid = dataset.grid
        self.maps = np.asarray(dataset.coil_maps, dtype=np.complex128)
        self.sigma = float(dataset.sigma)
        self.n_readouts, self.n_coils, self.n_samples = dataset.readouts.shape
        self.readout_length = self.n_coils * self.n_samples
        patterns, inverse = np.unique(dataset.indices, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(patterns) + 1))
        self.groups = []
        for p in range(len(patterns)):
            rows = order[bounds[p]:bounds[p + 1]]
            y = dataset.readouts[rows].reshape(len(rows), -1).astype(np.complex128)
            mean = y.mean(axis=0)
            centred = y - mean
            energy = np.sum(centred.real ** 2 + centred.imag ** 2, axis=1)
            self.groups.append(_Group(patterns[p], rows, centred, mean, energy))

    @property
    def n_voxels(self) -> int:
        return self.grid.n_voxels

    def predictions(self, stack):
        """Coil k-space of every bin, shape (K, C, n_kspace)."""
        spatial = self.grid.shape
        flat = np.asarray(stack).reshape((-1,) + spatial)
        k = fft(self.maps[None] * flat[:, None], axes=tuple(range(2, 2 + len(spatial))))
        return k.reshape(flat.shape[0], self.n_coils, -1)

    def residual_matrix(self, stack):
        """r[n, k] = ||A_n x_k - y_n||^2 for every readout and valid bin."""
        pred = self.predictions(stack)
        n_bins = pred.shape[0]
        out = np.empty((self.n_readouts, n_bins))
        with threadpool_limits(limits=1, user_api="blas"):
            for grp in self.groups:
                p = pred[:, :, grp.pattern].reshape(n_bins, -1) - grp.mean
                p_energy = np.sum(p.real ** 2 + p.imag ** 2, axis=1)
                cross = (grp.centred.conj() @ p.T).real
                r = grp.centred_energy[:, None] - 2.0 * cross + p_energy[None, :]
                out[grp.rows] = np.maximum(r, 0.0)
        return out

    def gridded(self, w_valid):
        """Weighted density (K, n_kspace) and gridded data (K, C, n_kspace)."""
        n_bins = w_valid.shape[1]
        size = self.grid.n_voxels
        density = np.zeros((n_bins, size))
        data = np.zeros((n_bins, self.n_coils, size), dtype=np.complex128)
        with threadpool_limits(limits=1, user_api="blas"):
            for grp in self.groups:
                wg = w_valid[grp.rows]
                mass = wg.sum(axis=0)
                summed = wg.T @ grp.centred + mass[:, None] * grp.mean[None, :]
                summed = summed.reshape(n_bins, self.n_coils, -1)
                np.add.at(density, (slice(None), grp.pattern), mass[:, None])
                np.add.at(data, (slice(None), slice(None), grp.pattern), summed)
        return density, data


def residual_energy(x, dataset, n: int, k: int) -> float:
    """||A_{n,k} x_k - y_n||^2 for one readout and one valid bin (no scaling)."""
    grid = dataset.grid
    if not 0 <= k < grid.n_bins:
        raise ConfigError(f"bin index {k} outside 0..{grid.n_bins - 1}")
    r, c = grid.split_bin(k)
    image = np.asarray(x)[r, c]
    pred = coil_kspace(image, np.asarray(dataset.coil_maps, np.complex128))
    pred = pred.reshape(dataset.n_coils, -1)[:, dataset.indices[n]].reshape(-1)
    diff_ = pred - dataset.readout(n).astype(np.complex128)
    return sq_norm(diff_)


def e_step(x, dataset, prior, params: SolverParams, bank: ReadoutBank | None = None):
    """Posterior participation weights (N, K+1) for the current images."""
    if not dataset.sigma > 0:
        raise ConfigError("dataset sigma is zero; the E-step likelihood is undefined")
    bank = bank or ReadoutBank(dataset)
    res = bank.residual_matrix(x)
    return posterior_weights(res, prior, bank.readout_length, bank.sigma, params.tau)


# ---------------------------------------------------------------------------
# M-step


def soft_threshold(z, threshold: float):
    """Complex soft-thresholding: shrink magnitudes, keep phases."""
    mag = np.abs(z)
    scale = np.maximum(mag - threshold, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        phase = np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0.0)
    return phase * scale


def _axis_weights(params: SolverParams, spatial_ndim: int) -> dict:
    lam = {"cardiac": params.lambda_c, "respiratory": params.lambda_r}
    for a in tv_axes(spatial_ndim)[:spatial_ndim]:
        lam[a] = params.lambda_s
    return lam


def _gram_diagonal(stack_shape, axis: str, spatial_ndim: int):
    """Diagonal of D^H D for one difference axis, broadcastable to the stack."""
    from emore.operators import PERIODIC_AXES, STACK_AXES

    ax = STACK_AXES[axis]
    n = stack_shape[ax]
    if n == 1:
        d = np.zeros(1)
    elif axis in PERIODIC_AXES:
        d = np.full(n, 2.0)
    else:
        d = np.full(n, 2.0)
        d[0] = d[-1] = 1.0
    shape = [1] * len(stack_shape)
    shape[ax] = n
    return d.reshape(shape)


def tv_terms(x, params: SolverParams, spatial_ndim: int) -> float:
    lam = _axis_weights(params, spatial_ndim)
    total = 0.0
    for axis in tv_axes(spatial_ndim):
        if lam[axis] > 0:
            total += lam[axis] * float(np.sum(np.abs(diff(x, axis))))
    return total


def m_step_objective(x, dataset, w, params: SolverParams, bank: ReadoutBank | None = None):
    """Weighted data misfit over valid bins plus anisotropic TV."""
    if not dataset.sigma > 0:
        raise ConfigError("dataset sigma is zero; the data term is undefined")
    bank = bank or ReadoutBank(dataset)
    n_bins = dataset.grid.n_bins
    res = bank.residual_matrix(x)
    data = float(np.sum(np.asarray(w)[:, :n_bins] * res)) / (bank.readout_length * bank.sigma ** 2)
    return data + tv_terms(x, params, dataset.grid.ndim)


class WeightedTVProblem:
    """ADMM for the weighted least-squares + anisotropic TV M-step.

    One split variable ``z_a = D_a x`` per TV axis with scaled dual ``u_a``.
    The x-update solves ``(2 N + rho sum D^H D) x = 2 b + rho sum D^H (z - u)``
    with Jacobi-preconditioned CG, warm-started from the current x. ``rho``
    is ``rho_scale`` times the median data curvature ``2 diag(N)`` of the
    weights passed at construction, and stays fixed afterwards.
    """

    def __init__(self, dataset, params: SolverParams, w_init, bank: ReadoutBank | None = None):
        if not dataset.sigma > 0:
            raise ConfigError("dataset sigma is zero; the data term is undefined")
        self.params = params
        self.grid = dataset.grid
        self.bank = bank or ReadoutBank(dataset)
        self.stack_shape = self.grid.stack_shape
        self.spatial_ndim = self.grid.ndim
        self.lam = _axis_weights(params, self.spatial_ndim)
        # axes without a TV weight need no splitting
        self.axes = [a for a in tv_axes(self.spatial_ndim) if self.lam[a] > 0]
        self.gram = {a: _gram_diagonal(self.stack_shape, a, self.spatial_ndim) for a in self.axes}
        self.z = None
        self.u = None
        self.set_weights(w_init)
        # median, not mean: near-coil hot spots outside the body would
        # otherwise set rho and over-damp the interior
        curvature = 2.0 * self.normal.diagonal()
        self.rho = params.rho_scale * float(np.median(curvature))
        if not self.rho > 0:
            raise SolverError("initial weights put no data in any bin", diagnostics={"rho": self.rho})

    def set_weights(self, w):
        w = np.asarray(w, dtype=np.float64)
        n_bins = self.grid.n_bins
        scale = self.bank.readout_length * self.bank.sigma ** 2
        density, data = self.bank.gridded(w[:, :n_bins])
        spatial = self.grid.shape
        density = density.reshape((n_bins,) + spatial) / scale
        data = data.reshape((n_bins, self.bank.n_coils) + spatial) / scale
        self.normal = BinnedNormalOperator(self.bank.maps, density, self.stack_shape)
        axes = tuple(range(2, 2 + len(spatial)))
        rhs = np.sum(np.conj(self.bank.maps)[None] * ifft(data, axes=axes), axis=1)
        self.b = rhs.reshape(self.stack_shape)
        # sum_n sum_k w ||y_n||^2 / (L sigma^2), the constant of the data term
        const = 0.0
        for grp in self.bank.groups:
            y = grp.centred + grp.mean
            energy = np.sum(y.real ** 2 + y.imag ** 2, axis=1)
            const += float(np.sum(w[grp.rows, :n_bins].sum(axis=1) * energy))
        self.const = const / scale

    def data_term(self, x) -> float:
        """Weighted misfit evaluated through the normal equations."""
        return real_inner(x, self.normal.apply(x)) - 2.0 * real_inner(x, self.b) + self.const

    def objective(self, x) -> float:
        return self.data_term(x) + tv_terms(x, self.params, self.spatial_ndim)

    def _system(self, x):
        out = 2.0 * self.normal.apply(x)
        for a in self.axes:
            out += self.rho * diff_adjoint(diff(x, a), a)
        return out

    def reset_splitting(self, x):
        self.z = {a: diff(x, a) for a in self.axes}
        self.u = {a: np.zeros(self.stack_shape, dtype=np.complex128) for a in self.axes}

    def iterate(self, x, iterations: int):
        """Run ADMM iterations from ``x``; returns (x, total CG iterations)."""
        if iterations < 1:
            raise ConfigError("ADMM needs at least one iteration")
        x = np.asarray(x, dtype=np.complex128).reshape(self.stack_shape)
        if self.z is None:
            self.reset_splitting(x)
        diag = 2.0 * self.normal.diagonal() + self.rho * sum(
            (self.gram[a] for a in self.axes), np.zeros(1))
        precond = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
        precond = np.broadcast_to(precond, self.stack_shape)
        cg_total = 0
        for _ in range(iterations):
            rhs = 2.0 * self.b
            for a in self.axes:
                rhs = rhs + self.rho * diff_adjoint(self.z[a] - self.u[a], a)
            x, info = conjugate_gradient(
                self._system, rhs, x, self.params.cg_maxiter, self.params.cg_tol, precond
            )
            cg_total += info["iterations"]
            for a in self.axes:
                dx = diff(x, a)
                self.z[a] = soft_threshold(dx + self.u[a], self.lam[a] / self.rho)
                self.u[a] = self.u[a] + dx - self.z[a]
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite image after the M-step")
        return x, cg_total


def m_step(x_init, dataset, w, params: SolverParams, iterations: int,
           bank: ReadoutBank | None = None):
    """``iterations`` ADMM iterations of the M-step from ``x_init``."""
    problem = WeightedTVProblem(dataset, params, w, bank=bank)
    x, _ = problem.iterate(np.asarray(x_init, dtype=np.complex128), iterations)
    return x


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class ReconResult:
    image: np.ndarray
    weights: np.ndarray | None
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def image_change(x, x_prev) -> float:
    """||x - x_prev||^2 / ||x_prev||^2 (inf when the previous image is zero)."""
    den = sq_norm(x_prev)
    num = sq_norm(x - x_prev)
    if den == 0:
        return 0.0 if num == 0 else math.inf
    return num / den


def _check_inputs(dataset, assignment):
    if len(assignment) != dataset.n_readouts:
        raise ConfigError("assignment length does not match the dataset")
    if (assignment.n_resp, assignment.n_cardiac) != (dataset.grid.n_resp, dataset.grid.n_cardiac):
        raise ConfigError("assignment bin layout does not match the grid")
    if not dataset.sigma > 0:
        raise ConfigError("dataset sigma is zero; the likelihood is undefined")


def write_checkpoint(directory, iteration: int, w, trace) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = f"weights_{iteration:03d}.f32"
    np.ascontiguousarray(w, dtype="<f4").tofile(directory / name)
    manifest = {
        "iteration": iteration,
        "weights_file": name,
        "shape": list(np.shape(w)),
        "dtype": "float32 little-endian",
        "outlier_column": int(np.shape(w)[1] - 1),
        "last_trace": trace[-1] if trace else None,
    }
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory / name


def _run(dataset, assignment, params: SolverParams, soft: bool,
         checkpoint_dir=None, checkpoint_every: int = 0, x_init=None) -> ReconResult:
    _check_inputs(dataset, assignment)
    grid = dataset.grid
    n_bins = grid.n_bins
    bank = ReadoutBank(dataset)
    w = assignment.one_hot(outlier_column=True)
    prior = make_prior(assignment.g, n_bins, params.alpha_g, params.alpha_o) if soft else None
    problem = WeightedTVProblem(dataset, params, w, bank=bank)

    x = np.zeros(grid.stack_shape, dtype=np.complex128) if x_init is None else np.array(
        x_init, dtype=np.complex128)
    x, cg = problem.iterate(x, params.init_iters)
    trace = [{
        "iteration": 0,
        "objective": problem.objective(x),
        "image_change": math.nan,
        "outlier_mass": float(np.mean(w[:, n_bins])),
        "cg_iterations": cg,
    }]
    converged = False
    t = 0
    while t < params.max_outer:
        t += 1
        x_prev = x
        if soft:
            res = bank.residual_matrix(x)
            w = posterior_weights(res, prior, bank.readout_length, bank.sigma, params.tau)
            problem.set_weights(w)
        x, cg = problem.iterate(x, params.inner_iters)
        change = image_change(x, x_prev)
        if not math.isfinite(change):
            raise SolverError("image change is not finite", diagnostics={"iteration": t})
        trace.append({
            "iteration": t,
            "objective": problem.objective(x),
            "image_change": change,
            "outlier_mass": float(np.mean(w[:, n_bins])),
            "cg_iterations": cg,
        })
        if soft and checkpoint_dir is not None and checkpoint_every > 0 and t % checkpoint_every == 0:
            write_checkpoint(checkpoint_dir, t, w, trace)
        if change < params.eta:
            converged = True
            break
    return ReconResult(x, w if soft else None, trace, converged, t)


def emore(dataset, assignment, params: SolverParams, checkpoint_dir=None,
          checkpoint_every: int = 0, return_result: bool = False):
    """Alternate E-steps and truncated ADMM M-steps from the SG initialization.

    Stops when the relative squared image change drops below ``eta`` or after
    ``max_outer`` outer iterations, whichever comes first. Returns
    ``(image_stack, weights, trace)``.
    """
    res = _run(dataset, assignment, params, soft=True,
               checkpoint_dir=checkpoint_dir, checkpoint_every=checkpoint_every)
    if return_result:
        return res
    return res.image, res.weights, res.trace


def cs_baseline(dataset, assignment, params: SolverParams, return_result: bool = False):
    """Same solver and stopping rule with the one-hot SG weights frozen."""
    res = _run(dataset, assignment, params, soft=False)
    if return_result:
        return res
    return res.image


def write_trace_csv(path, trace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:-1]]
                       + [row["cg_iterations"]])
    return path


def timed(fn, *args, **kwargs):
    """(result, wall seconds) of one call."""
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
