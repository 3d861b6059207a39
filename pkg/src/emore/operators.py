"""Multi-coil Cartesian operators and finite differences.

K-space uses the unshifted FFT layout with orthonormal scaling, so index 0
along every axis is DC and ``||F x|| == ||x||``. A readout is described by a
1D array of flat k-space indices; every coil samples the same indices and
the data vector is ordered coil-major, ``y = [y_coil0, y_coil1, ...]``.

Motion image stacks have shape ``(n_resp, n_cardiac, *spatial)``.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from emore.errors import ConfigError, SolverError

_FFT_WORKERS = 1

STACK_AXES = {"respiratory": 0, "cardiac": 1, "x": 2, "y": 3, "z": 4}
PERIODIC_AXES = frozenset({"cardiac"})


def set_fft_workers(n: int) -> None:
    """Worker count for batched FFTs; transforms are identical for any value."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


def fft(x, axes):
    return scipy.fft.fftn(x, axes=axes, norm="ortho", workers=_FFT_WORKERS)


def ifft(x, axes):
    return scipy.fft.ifftn(x, axes=axes, norm="ortho", workers=_FFT_WORKERS)


def inner(a, b) -> complex:
    """<a, b> = sum(conj(a) * b) with numpy's fixed-order pairwise summation."""
    return complex(np.sum(np.conj(a) * b))


def real_inner(a, b) -> float:
    """Re<a, b>; avoids BLAS so the reduction order never depends on threads."""
    return float(np.sum(a.real * b.real) + np.sum(a.imag * b.imag))


def sq_norm(a) -> float:
    return real_inner(a, a)


def _check_maps(image, maps):
    if maps.shape[1:] != image.shape:
        raise ConfigError(
            f"image shape {image.shape} does not match coil maps {maps.shape[1:]}"
        )


def _check_indices(indices, shape):
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ConfigError("readout sample indices must be one-dimensional")
    size = int(np.prod(shape))
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise ConfigError("readout sample index outside the k-space grid")
    return indices


def coil_kspace(image, maps):
    """Full k-space of every coil image, shape (C, *spatial)."""
    _check_maps(image, maps)
    spatial = tuple(range(1, maps.ndim))
    return fft(maps * image, axes=spatial)


def forward(image, maps, indices):
    """A x: coil weighting, orthonormal FFT, selection of the readout samples.

    Returns a vector of length ``L = C * len(indices)``.
    """
    image = np.asarray(image)
    maps = np.asarray(maps)
    indices = _check_indices(indices, image.shape)
    k = coil_kspace(image, maps).reshape(maps.shape[0], -1)
    return k[:, indices].reshape(-1)


def adjoint(data, maps, indices):
    """A^H y, the exact conjugate transpose of :func:`forward`."""
    maps = np.asarray(maps)
    shape = maps.shape[1:]
    indices = _check_indices(indices, shape)
    n_coils = maps.shape[0]
    data = np.asarray(data)
    if data.size != n_coils * indices.size:
        raise ConfigError(
            f"data length {data.size} != coils x samples = {n_coils * indices.size}"
        )
    grid = np.zeros((n_coils, int(np.prod(shape))), dtype=np.result_type(data, maps, np.complex64))
    coil_data = data.reshape(n_coils, indices.size)
    for c in range(n_coils):
        np.add.at(grid[c], indices, coil_data[c])
    grid = grid.reshape((n_coils,) + shape)
    spatial = tuple(range(1, maps.ndim))
    return np.sum(np.conj(maps) * ifft(grid, axes=spatial), axis=0)


# ---------------------------------------------------------------------------
# finite differences


def tv_axes(spatial_ndim: int) -> list[str]:
    """TV axes for a stack with the given number of spatial dimensions."""
    return ["x", "y", "z"][:spatial_ndim] + ["cardiac", "respiratory"]


def _axis_index(stack, axis):
    if axis not in STACK_AXES:
        raise ConfigError(f"unknown difference axis {axis!r}")
    idx = STACK_AXES[axis]
    if idx >= stack.ndim:
        raise ConfigError(f"axis {axis!r} does not exist for a {stack.ndim - 2}D grid")
    return idx


def diff(stack, axis):
    """Forward differences; periodic along cardiac, zero at the far edge otherwise."""
    stack = np.asarray(stack)
    ax = _axis_index(stack, axis)
    if axis in PERIODIC_AXES:
        return np.roll(stack, -1, axis=ax) - stack
    out = np.zeros_like(stack)
    n = stack.shape[ax]
    hi = [slice(None)] * stack.ndim
    lo = [slice(None)] * stack.ndim
    hi[ax] = slice(1, n)
    lo[ax] = slice(0, n - 1)
    out[tuple(lo)] = stack[tuple(hi)] - stack[tuple(lo)]
    return out


def diff_adjoint(d, axis):
    """Adjoint of :func:`diff` for the same axis."""
    d = np.asarray(d)
    ax = _axis_index(d, axis)
    if axis in PERIODIC_AXES:
        return np.roll(d, 1, axis=ax) - d
    n = d.shape[ax]
    out = np.zeros_like(d)

    def sl(s):
        idx = [slice(None)] * d.ndim
        idx[ax] = s
        return tuple(idx)

    # rows 0..n-2 of d are live, row n-1 is structurally zero
    out[sl(slice(0, n - 1))] -= d[sl(slice(0, n - 1))]
    out[sl(slice(1, n))] += d[sl(slice(0, n - 1))]
    return out


# ---------------------------------------------------------------------------
# gridded normal operator


class BinnedNormalOperator:
    """x_k -> S^H F^H diag(D_k) F S x_k for every bin of a stack.

    ``density`` has shape ``(K, *spatial)`` and holds the summed readout
    weights landing on each k-space location of each bin. Because the
    readouts are Cartesian, sum_n w_nk A_n^H A_n collapses to this form.
    FFTs are skipped along axes where the density is constant, since the
    transform pair cancels there.
    """

    def __init__(self, maps, density, stack_shape):
        self.maps = np.asarray(maps)
        self.stack_shape = tuple(stack_shape)
        spatial = self.maps.shape[1:]
        n_bins = self.stack_shape[0] * self.stack_shape[1]
        density = np.asarray(density, dtype=np.float64)
        if density.shape != (n_bins,) + spatial:
            raise ConfigError("density shape does not match stack and coil maps")
        ndim = len(spatial)
        varying = [
            a for a in range(ndim)
            if not np.all(density == np.take(density, [0], axis=1 + a))
        ]
        # FFT axes inside the (K, C, *spatial) working array
        self.fft_axes = tuple(2 + a for a in varying)
        if varying:
            reduced = density
        else:
            reduced = density[(slice(None),) + (slice(0, 1),) * ndim]
        index = [slice(None)]
        for a in range(ndim):
            index.append(slice(None) if a in varying else slice(0, 1))
        self.density = reduced[tuple(index)][:, None]
        self.mean_density = density.reshape(n_bins, -1).mean(axis=1)

    def apply(self, stack):
        spatial = self.maps.shape[1:]
        flat = stack.reshape((-1,) + spatial)
        coil = self.maps[None] * flat[:, None]
        if self.fft_axes:
            coil = ifft(self.density * fft(coil, axes=self.fft_axes), axes=self.fft_axes)
        else:
            coil = self.density * coil
        out = np.sum(np.conj(self.maps)[None] * coil, axis=1)
        return out.reshape(stack.shape)

    def diagonal(self):
        """Exact diagonal of the operator, shape of the stack."""
        rss = np.sum(np.abs(self.maps) ** 2, axis=0)
        d = self.mean_density.reshape(self.stack_shape[:2] + (1,) * rss.ndim)
        return d * rss


def conjugate_gradient(apply, rhs, x0, maxiter, tol, precond=None):
    """Preconditioned CG for a Hermitian positive semi-definite ``apply``.

    Returns ``(x, info)``. Raises :class:`SolverError` if the residual grows
    more than tenfold above its starting value.
    """
    x = np.array(x0, dtype=np.complex128, copy=True)
    r = rhs - apply(x)
    r0 = np.sqrt(sq_norm(r))
    b_norm = np.sqrt(sq_norm(rhs))
    scale = b_norm if b_norm > 0 else 1.0
    info = {"iterations": 0, "residual": r0 / scale, "initial_residual": r0 / scale}
    if r0 / scale <= tol or r0 == 0.0:
        return x, info
    z = r if precond is None else precond * r
    p = z.copy()
    rz = real_inner(r, z)
    for it in range(1, maxiter + 1):
        ap = apply(p)
        pap = real_inner(p, ap)
        if pap <= 0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.sqrt(sq_norm(r))
        info["iterations"] = it
        info["residual"] = res / scale
        if not np.isfinite(res) or res > 10.0 * r0:
            raise SolverError(
                "conjugate gradient diverged",
                diagnostics={"iteration": it, "residual": res, "initial": r0},
            )
        if res / scale <= tol:
            break
        z = r if precond is None else precond * r
        rz_new = real_inner(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, info
