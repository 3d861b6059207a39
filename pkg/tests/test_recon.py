import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from emore.config import SolverParams
from emore.dataset import load_dataset
from emore.errors import ConfigError
from emore.gating import HardAssignment, gate
from emore.operators import forward, set_fft_workers
from emore.phantom import generate_dataset
from emore.recon import (
    ReadoutBank,
    WeightedTVProblem,
    cs_baseline,
    e_step,
    emore,
    image_change,
    m_step,
    m_step_objective,
    make_prior,
    posterior_weights,
    residual_energy,
    soft_threshold,
    write_trace_csv,
)

from conftest import crandn, small_config, tiny_dataset

LAYOUTS = [(1, 1), (1, 2), (1, 3), (3, 1)]  # (n_resp, n_cardiac) with K <= 3


def dft_residual(x_k, maps, idx, y):
    """||A x - y||^2 by explicit summation of the DFT, one sample at a time."""
    shape = x_k.shape
    m = x_k.size
    pos = np.unravel_index(np.arange(m), shape)
    total = 0.0
    for c in range(maps.shape[0]):
        weighted = (maps[c] * x_k).reshape(-1)
        for s, flat in enumerate(idx):
            k = np.unravel_index(flat, shape)
            phase = sum(k[d] * pos[d] / shape[d] for d in range(len(shape)))
            pred = complex(np.sum(weighted * np.exp(-2j * np.pi * phase))) / math.sqrt(m)
            total += abs(pred - complex(y[c, s])) ** 2
    return total


def scalar_posterior(res, theta, length, sigma, tau):
    """Posterior of one readout written out term by term."""
    k = len(res)
    logs = [math.log(theta[j]) - res[j] / (length * sigma ** 2) if theta[j] > 0 else -math.inf
            for j in range(k)]
    logs.append(math.log(theta[k]) - tau ** 2 if theta[k] > 0 else -math.inf)
    top = max(logs)
    terms = [math.exp(v - top) for v in logs]
    total = math.fsum(terms)
    return [t / total for t in terms]


def smooth_two_bin_dataset(seed, n_readouts=10):
    truth = np.zeros((1, 2, 8, 8), complex)
    truth[:, :, 2:6, 2:6] = 1.0
    truth[0, 1, 3:7, 3:7] += 0.5
    rng = np.random.default_rng(seed)
    ds, bins = tiny_dataset(rng, shape=(8, 8), n_resp=1, n_cardiac=2, n_readouts=n_readouts,
                            n_coils=2, sigma=0.05, truth=truth)
    w = np.zeros((n_readouts, 3))
    w[np.arange(n_readouts), bins] = 1.0
    return ds, bins, w


# ---------------------------------------------------------------------------
# prior


def test_prior_rows():
    theta = make_prior([0, 2, 1], 4, 0.85, 0.05)
    np.testing.assert_allclose(theta.sum(axis=1), 1.0, atol=1e-15)
    assert theta[1, 2] == 0.85 and theta[1, 4] == 0.05
    np.testing.assert_allclose(theta[1, [0, 1, 3]], 0.1 / 3)


def test_prior_with_a_single_bin_is_renormalized():
    theta = make_prior([0, 0], 1, 0.85, 0.05)
    np.testing.assert_allclose(theta, [[0.85 / 0.9, 0.05 / 0.9]] * 2)


def test_prior_rejects_bad_input():
    with pytest.raises(ConfigError):
        make_prior([0], 2, 0.9, 0.2)
    with pytest.raises(ConfigError):
        make_prior([2], 2, 0.85, 0.05)


# ---------------------------------------------------------------------------
# E-step


def test_e_step_matches_scalar_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    checked = 0
    for trial in range(120):
        n_resp, n_card = LAYOUTS[trial % len(LAYOUTS)]
        n = int(rng.integers(1, 21))
        ds, _ = tiny_dataset(rng, shape=(4, 4), n_resp=n_resp, n_cardiac=n_card,
                             n_readouts=n, n_coils=int(rng.integers(1, 3)), sigma=1.0)
        x = crandn(rng, *ds.grid.stack_shape) * rng.uniform(0.5, 1.5)
        maps = ds.coil_maps.astype(complex)
        n_bins = ds.grid.n_bins
        res = np.array([[dft_residual(x[ds.grid.split_bin(k)], maps, ds.indices[i],
                                      ds.readouts[i].astype(complex))
                         for k in range(n_bins)] for i in range(n)])
        # pick sigma so normalized residuals straddle tau^2
        sigma = math.sqrt(float(np.median(res)) / (ds.readout_length * rng.uniform(2, 20)))
        ds = dataclasses.replace(ds, sigma=sigma)
        params = SolverParams(tau=float(rng.uniform(1, 4)),
                              alpha_g=float(rng.uniform(0.3, 0.95)), alpha_o=0.04)
        g = rng.integers(0, n_bins, size=n)
        prior = make_prior(g, n_bins, params.alpha_g, params.alpha_o)
        w = e_step(x, ds, prior, params)
        for i in range(n):
            ref = scalar_posterior(res[i], prior[i], ds.readout_length, sigma, params.tau)
            np.testing.assert_allclose(w[i], ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
        checked += 1
    assert checked >= 100


def test_residual_energy_matches_dense_evaluation():
    rng = np.random.default_rng(7)
    ds, _ = tiny_dataset(rng, shape=(4, 6), n_resp=2, n_cardiac=1, n_readouts=5, n_coils=2)
    x = crandn(rng, *ds.grid.stack_shape)
    bank = ReadoutBank(ds)
    mat = bank.residual_matrix(x)
    for n in range(5):
        for k in range(2):
            ref = dft_residual(x[ds.grid.split_bin(k)], ds.coil_maps.astype(complex),
                               ds.indices[n], ds.readouts[n].astype(complex))
            assert residual_energy(x, ds, n, k) == pytest.approx(ref, rel=1e-12)
            assert mat[n, k] == pytest.approx(ref, rel=1e-10)


def test_residual_energy_edge_cases():
    rng = np.random.default_rng(8)
    ds, bins = tiny_dataset(rng, n_readouts=6, noise=False)
    truth = ds.truth.astype(complex)
    zero = np.zeros_like(truth)
    for n in range(6):
        y2 = float(np.sum(np.abs(ds.readouts[n].astype(complex)) ** 2))
        assert residual_energy(zero, ds, n, 0) == pytest.approx(y2, rel=1e-12)
        assert residual_energy(truth, ds, n, bins[n]) <= 1e-12 * y2
    with pytest.raises(ConfigError):
        residual_energy(truth, ds, 0, 5)


def test_equal_likelihoods_return_the_prior():
    tau, sigma, length = 3.0, 0.7, 48
    prior = make_prior([0, 1, 2], 3, 0.85, 0.05)
    res = np.full((3, 3), tau ** 2 * length * sigma ** 2)
    w = posterior_weights(res, prior, length, sigma, tau)
    np.testing.assert_allclose(w, prior, rtol=1e-14)


def test_dominant_bin_takes_the_weight():
    tau, sigma, length = 3.0, 1.0, 16
    g = np.array([0, 2, 1])
    prior = make_prior(g, 3, 0.85, 0.05)
    res = np.full((3, 3), (50 + tau ** 2) * length * sigma ** 2)
    res[np.arange(3), g] = 0.0
    w = posterior_weights(res, prior, length, sigma, tau)
    assert np.all(w[np.arange(3), g] >= 0.999)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30), k=st.integers(1, 8),
       tau=st.floats(0.5, 5.0), alpha_o=st.floats(0.01, 0.5))
def test_posterior_rows_and_outlier_saturation(seed, n, k, tau, alpha_o):
    rng = np.random.default_rng(seed)
    length, sigma = 32, 0.3
    g = rng.integers(0, k, size=n)
    prior = make_prior(g, k, 1.0 - alpha_o, alpha_o)
    scaled = rng.exponential(tau ** 2, size=(n, k))
    far = rng.random(n) < 0.5
    scaled[far] += tau ** 2 + 10.0 + rng.exponential(5.0, size=(far.sum(), 1))
    w = posterior_weights(scaled * length * sigma ** 2, prior, length, sigma, tau)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(w >= 0)
    sat = scaled.min(axis=1) > tau ** 2 + 10
    assert np.all(w[sat, -1] > 0.99)


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_weights_are_invariant_to_a_common_scale(seed, scale):
    rng = np.random.default_rng(seed)
    ds, bins = tiny_dataset(rng, n_readouts=8, sigma=0.8)
    x = ds.truth.astype(complex) + 0.3 * crandn(rng, *ds.grid.stack_shape)
    params = SolverParams()
    prior = make_prior(bins, ds.grid.n_bins, params.alpha_g, params.alpha_o)
    w = e_step(x, ds, prior, params)
    scaled = dataclasses.replace(ds, readouts=(ds.readouts.astype(complex) * scale),
                                 sigma=ds.sigma * scale)
    w2 = e_step(x * scale, scaled, prior, params)
    np.testing.assert_allclose(w2, w, rtol=0, atol=1e-9)


def test_e_step_needs_positive_sigma():
    rng = np.random.default_rng(9)
    ds, bins = tiny_dataset(rng)
    ds = dataclasses.replace(ds, sigma=0.0)
    with pytest.raises(ConfigError):
        e_step(ds.truth, ds, make_prior(bins, 2, 0.85, 0.05), SolverParams())


# ---------------------------------------------------------------------------
# M-step objective


def straight_objective(x, ds, w, params):
    maps = ds.coil_maps.astype(complex)
    data = 0.0
    for n in range(ds.n_readouts):
        y = ds.readouts[n].astype(complex).reshape(-1)
        for k in range(ds.grid.n_bins):
            pred = forward(x[ds.grid.split_bin(k)], maps, ds.indices[n])
            data += w[n, k] * np.sum(np.abs(pred - y) ** 2)
    data /= ds.readout_length * ds.sigma ** 2
    tv = params.lambda_r * np.sum(np.abs(np.diff(x, axis=0)))
    tv += params.lambda_c * np.sum(np.abs(np.roll(x, -1, axis=1) - x))
    for ax in range(2, x.ndim):
        tv += params.lambda_s * np.sum(np.abs(np.diff(x, axis=ax)))
    return data + tv


def test_objective_of_zero_image_without_tv():
    rng = np.random.default_rng(10)
    ds, _ = tiny_dataset(rng, n_readouts=7)
    w = rng.dirichlet(np.ones(3), size=7)
    params = SolverParams(lambda_s=0, lambda_c=0, lambda_r=0)
    y2 = np.sum(np.abs(ds.readouts.astype(complex)) ** 2, axis=(1, 2))
    ref = np.sum(w[:, :2].sum(axis=1) * y2) / (ds.readout_length * ds.sigma ** 2)
    assert m_step_objective(np.zeros(ds.grid.stack_shape), ds, w, params) == pytest.approx(ref, rel=1e-12)


def test_objective_of_consistent_constant_image_is_zero():
    rng = np.random.default_rng(11)
    truth = np.full((2, 3, 4, 4), 0.6 - 0.2j)
    ds, bins = tiny_dataset(rng, n_resp=2, n_cardiac=3, n_readouts=9, truth=truth, noise=False)
    w = np.zeros((9, 7))
    w[np.arange(9), bins] = 1.0
    obj = m_step_objective(truth, ds, w, SolverParams())
    assert obj <= 1e-10


@pytest.mark.parametrize("layout", [(1, 2), (2, 3), (3, 1)])
def test_objective_matches_straight_line_evaluation(layout):
    rng = np.random.default_rng(12)
    ds, _ = tiny_dataset(rng, shape=(4, 6), n_resp=layout[0], n_cardiac=layout[1], n_readouts=11)
    x = crandn(rng, *ds.grid.stack_shape)
    w = rng.dirichlet(np.ones(ds.grid.n_bins + 1), size=11)
    params = SolverParams()
    ref = straight_objective(x, ds, w, params)
    assert m_step_objective(x, ds, w, params) == pytest.approx(ref, rel=1e-10)
    # the gridded normal-equation form used inside ADMM agrees as well
    problem = WeightedTVProblem(ds, params, w)
    assert problem.objective(x) == pytest.approx(ref, rel=1e-10)


# ---------------------------------------------------------------------------
# M-step solver


def test_soft_threshold_prox():
    assert soft_threshold(np.array([0.5 + 0j]), 0.2)[0] == 0.5 - 0.2
    assert soft_threshold(np.array([0.1 + 0j]), 0.2)[0] == 0
    assert soft_threshold(np.array([-0.5]), 0.2)[0] == -(0.5 - 0.2)
    assert soft_threshold(np.array([0j]), 0.2)[0] == 0


@given(values=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), thr=st.floats(0, 1e3))
def test_soft_threshold_is_exact_on_reals(values, thr):
    v = np.array(values)
    expected = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)
    np.testing.assert_array_equal(soft_threshold(v, thr), expected)


@given(seed=st.integers(0, 2**32 - 1), thr=st.floats(0, 3))
def test_soft_threshold_shrinks_magnitude_and_keeps_phase(seed, thr):
    z = crandn(np.random.default_rng(seed), 40)
    out = soft_threshold(z, thr)
    np.testing.assert_allclose(np.abs(out), np.maximum(np.abs(z) - thr, 0), atol=1e-14)
    live = np.abs(out) > 0
    np.testing.assert_allclose(out[live] / np.abs(out[live]), z[live] / np.abs(z[live]), atol=1e-14)


def full_sampling_dataset(sigma=1e-3):
    """Single bin, unit coil, every k-space line exactly once, no noise."""
    rng = np.random.default_rng(13)
    truth = crandn(rng, 1, 1, 8, 8)
    ds, _ = tiny_dataset(rng, shape=(8, 8), n_resp=1, n_cardiac=1, n_readouts=8,
                         n_coils=1, sigma=sigma, truth=truth, noise=False)
    lines = np.stack([np.ravel_multi_index((np.arange(8), np.full(8, p)), (8, 8)) for p in range(8)])
    k = np.fft.fft2(truth[0, 0], norm="ortho").reshape(-1)
    return dataclasses.replace(
        ds, indices=lines, readouts=k[lines][:, None, :].astype(np.complex64),
        coil_maps=np.ones((1, 8, 8), np.complex64)), truth


def test_unregularized_single_bin_step_is_the_inverse_transform():
    ds, truth = full_sampling_dataset()
    params = SolverParams(lambda_s=0, lambda_c=0, lambda_r=0)
    w = np.zeros((8, 2))
    w[:, 0] = 1.0
    x = m_step(np.zeros((1, 1, 8, 8), complex), ds, w, params, iterations=1)
    grid = np.zeros(64, complex)
    grid[ds.indices.reshape(-1)] = ds.readouts[:, 0].reshape(-1)
    expected = np.fft.ifft2(grid.reshape(8, 8), norm="ortho")
    assert np.linalg.norm(x[0, 0] - expected) <= 1e-6 * np.linalg.norm(expected)


def test_cs_recovers_noiseless_fully_sampled_truth():
    ds, truth = full_sampling_dataset()
    params = SolverParams(lambda_s=0, lambda_c=0, lambda_r=0)
    a = HardAssignment.from_flat(np.zeros(8, int), ds.grid)
    x = cs_baseline(ds, a, params)
    assert np.linalg.norm(x - truth) <= 1e-6 * np.linalg.norm(truth)


@pytest.mark.parametrize("seed", range(4))
def test_admm_reaches_long_run_reference(seed):
    ds, bins, w = smooth_two_bin_dataset(seed)
    params = SolverParams()
    ref_problem = WeightedTVProblem(ds, params, w)
    x_ref, _ = ref_problem.iterate(np.zeros(ds.grid.stack_shape, complex), 500)
    ref = m_step_objective(x_ref, ds, w, params)
    x30 = m_step(np.zeros(ds.grid.stack_shape, complex), ds, w, params, iterations=30)
    assert m_step_objective(x30, ds, w, params) <= ref * 1.01
    # I2-sized blocks chained with warm starts, as in the outer loop
    res = cs_baseline(ds, HardAssignment.from_flat(bins, ds.grid), params, return_result=True)
    assert res.converged
    assert m_step_objective(res.image, ds, w, params) <= ref * 1.01


@pytest.mark.parametrize("seed", range(4))
def test_warm_started_inner_iterations_do_not_increase_the_objective(seed):
    ds, bins, w = smooth_two_bin_dataset(seed)
    params = SolverParams()
    problem = WeightedTVProblem(ds, params, w)
    x, _ = problem.iterate(np.zeros(ds.grid.stack_shape, complex), params.init_iters)
    prev = problem.objective(x)
    for _ in range(params.inner_iters):
        x, _ = problem.iterate(x, 1)
        obj = problem.objective(x)
        assert obj <= prev * (1 + 1e-6)
        prev = obj


# ---------------------------------------------------------------------------
# outer loop


@pytest.mark.parametrize("layout", [(1, 1), (2, 3)])
def test_degenerate_prior_reproduces_cs(layout):
    rng = np.random.default_rng(14)
    ds, bins = tiny_dataset(rng, shape=(8, 8), n_resp=layout[0], n_cardiac=layout[1],
                            n_readouts=24, n_coils=2, sigma=0.3)
    a = HardAssignment.from_flat(bins, ds.grid)
    params = SolverParams(alpha_g=1.0, alpha_o=0.0, max_outer=8)
    x_em, w, trace = emore(ds, a, params)
    x_cs = cs_baseline(ds, a, params)
    np.testing.assert_array_equal(x_em, x_cs)
    np.testing.assert_array_equal(w, a.one_hot())


def test_image_change():
    a = np.ones(4)
    assert image_change(a, a) == 0.0
    assert image_change(2 * a, a) == 1.0
    assert image_change(a, np.zeros(4)) == math.inf


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(small_config(), 1, 0.2)


def test_results_do_not_depend_on_thread_count(small_dataset):
    a = gate(small_dataset)
    params = SolverParams(max_outer=6)
    outs = []
    for threads in (1, 4):
        set_fft_workers(threads)
        try:
            with threadpool_limits(limits=threads):
                outs.append(emore(small_dataset, a, params))
        finally:
            set_fft_workers(1)
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])
    assert outs[0][2] == outs[1][2]


def test_checkpoints_and_trace_files(small_dataset, tmp_path):
    a = gate(small_dataset)
    params = SolverParams(max_outer=4, eta=0.0)
    x, w, trace = emore(small_dataset, a, params, checkpoint_dir=tmp_path, checkpoint_every=2)
    assert len(trace) == 5 and [t["iteration"] for t in trace] == list(range(5))
    meta = json.loads((tmp_path / "checkpoint.json").read_text())
    assert meta["iteration"] == 4
    saved = np.fromfile(tmp_path / meta["weights_file"], dtype="<f4").reshape(meta["shape"])
    np.testing.assert_allclose(saved, w, atol=1e-7)
    assert (tmp_path / "weights_002.f32").exists()
    write_trace_csv(tmp_path / "trace.csv", trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,image_change,outlier_mass,cg_iterations"
    assert len(lines) == 6


def test_assignment_must_match_dataset(small_dataset):
    a = gate(small_dataset)
    short = HardAssignment(a.resp_bin[:10], a.cardiac_bin[:10], a.n_resp, a.n_cardiac)
    with pytest.raises(ConfigError):
        emore(small_dataset, short, SolverParams())


# ---------------------------------------------------------------------------
# desk-scale phantom


def test_corrupted_readouts_move_to_the_outlier_bin(desk):
    run = desk.load(1, 0.2, "emore")
    ds = load_dataset(desk.dataset_dir(1, 0.2))
    w = run["weights"]
    bad = ds.schedule.is_outlier
    assert w[bad, -1].mean() > w[~bad, -1].mean()
    assert run["manifest"]["iterations"] <= 60


def test_trace_is_finite_and_loop_terminates(desk):
    import csv

    for frac in (0.0, 0.2):
        run_dir = desk.run_dir(1, frac, "emore")
        rows = list(csv.DictReader(open(run_dir / "trace.csv")))
        changes = [float(r["image_change"]) for r in rows[1:]]
        assert 1 <= len(changes) <= 60
        assert all(math.isfinite(c) for c in changes)


def test_with_true_bins_and_no_outliers_emore_matches_cs(desk):
    from emore.metrics import psnr

    ds = load_dataset(desk.dataset_dir(1, 0.0))
    params = SolverParams()
    a = HardAssignment.from_flat(ds.schedule.true_bin, ds.grid)
    x_cs = cs_baseline(ds, a, params)
    x_em, w, _ = emore(ds, a, params)
    assert abs(psnr(x_em, ds.truth) - psnr(x_cs, ds.truth)) <= 0.3
    assert w[:, -1].max() < 0.5
