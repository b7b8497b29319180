"""Synthetic generators: toy dynamics, clustered sources, seasonal series."""

import numpy as np
import pytest

from stfact.data import VoxelGrid
from stfact.errors import DataError
from stfact.synth import (
    SourceTruth,
    ToyTruth,
    gen_clustered_sources,
    gen_seasonal,
    gen_toy,
    hrf_kernel,
    toy_transition_mean,
)

# ---------------------------------------------------------------------------
# toy system


def test_toy_shapes_and_defaults():
    data, truth = gen_toy(seed=3)
    assert data.values.shape == (100, 15, 1000)
    assert data.mask.all()
    assert (truth.rho, truth.alpha, truth.beta) == (0.2, 0.5, -0.1)
    np.testing.assert_array_equal(truth.centers, [[7.5, 7.5, 7.5], [-7.5, -7.5, -7.5]])
    np.testing.assert_allclose(truth.log_widths, 2.0 * np.log([3.0, 4.5]))
    assert truth.z.shape == (100, 16, 2)
    assert truth.w.shape == (100, 15, 2)
    assert truth.factors.shape == (2, 1000)
    # factor images peak at the grid points nearest the true centers
    peak = truth.grid.positions[truth.factors.argmax(axis=1)]
    assert np.linalg.norm(peak - truth.centers, axis=1).max() <= truth.grid.nn_spacing()


def test_toy_reproducible():
    data_a, truth_a = gen_toy(n_instances=5, t_steps=4, seed=11)
    data_b, truth_b = gen_toy(n_instances=5, t_steps=4, seed=11)
    assert data_a.values.tobytes() == data_b.values.tobytes()
    assert truth_a.z.tobytes() == truth_b.z.tobytes()
    data_c, _ = gen_toy(n_instances=5, t_steps=4, seed=12)
    assert data_a.values.tobytes() != data_c.values.tobytes()


def test_toy_transition_residuals_are_unit_normal():
    _, truth = gen_toy(seed=0)
    mean = toy_transition_mean(truth.z[:, :-1], truth.rho, truth.alpha, truth.beta)
    resid = truth.z[:, 1:] - mean
    std = resid.std(ddof=1)
    assert abs(std - 1.0) < 3.0 / np.sqrt(2.0 * resid.size)


def test_toy_weights_track_half_the_state():
    _, truth = gen_toy(seed=4)
    resid = truth.w - 0.5 * truth.z[:, 1:]
    std = resid.std(ddof=1)
    assert abs(std - 0.1) < 3.0 * 0.1 / np.sqrt(2.0 * resid.size)


def test_toy_degenerate_parameters_give_random_walk():
    _, truth = gen_toy(
        n_instances=2000, t_steps=20, seed=9, rho=1.0, alpha=0.0, beta=0.0, grid_points=2
    )
    # tanh(0) = sin(0) = 0, so increments are exactly unit Gaussian steps
    steps = truth.z[:, 1:] - truth.z[:, :-1]
    assert abs(steps.std(ddof=1) - 1.0) < 3.0 / np.sqrt(2.0 * steps.size)
    var_t = truth.z.var(axis=0).mean(axis=1)  # variance profile over time
    slope = np.polyfit(np.arange(var_t.size), var_t, 1)[0]
    assert 0.85 < slope < 1.15


def test_toy_observation_noise_level():
    data, truth = gen_toy(seed=6, sigma_y=0.05)
    resid = data.values - truth.w @ truth.factors
    assert abs(resid.std(ddof=1) - 0.05) < 0.002


# ---------------------------------------------------------------------------
# response kernel


def test_hrf_kernel_shape_onset_peak():
    for dt in (1.0, 2.0):
        k = hrf_kernel(dt, length=int(32 / dt))
        assert k.shape == (int(32 / dt),)
        assert k[0] == 0.0  # gamma density with shape > 1 vanishes at the origin
        assert k.argmax() == int(round(6.0 / dt))
        assert k.max() == 1.0
        assert k.sum() > 0.0


def test_hrf_kernel_has_undershoot():
    k = hrf_kernel(1.0, length=32)
    assert k[16] < 0.0  # 16 s trough
    assert k.min() > -0.5


def test_hrf_kernel_rejects_bad_window():
    with pytest.raises(DataError, match="positive"):
        hrf_kernel(0.0, 16)
    with pytest.raises(DataError, match="taps"):
        hrf_kernel(2.0, 1)


# ---------------------------------------------------------------------------
# clustered sources


def small_sources(**kw):
    kw.setdefault("grid", VoxelGrid.lattice(10, 0.0, 19.0))
    return gen_clustered_sources(**kw)


def test_sources_default_shapes_and_partition():
    data, truth = small_sources(seed=1)
    assert data.values.shape == (30, 5, 1000)
    assert data.mask.all()
    assert isinstance(truth, SourceTruth)
    counts = np.bincount(truth.source_labels, minlength=3)
    np.testing.assert_array_equal(counts, [10, 10, 10])
    np.testing.assert_array_equal(truth.sequence_labels, np.arange(30) % 3)
    assert truth.schedule.shape == (150, 30)
    # a source emits weight exactly when its group's block is active
    active = truth.schedule > 0
    expected = truth.source_labels[None, :] == np.repeat(truth.sequence_labels, 5)[:, None]
    np.testing.assert_array_equal(active, expected)
    assert truth.centers.min() >= 1.0 and truth.centers.max() <= 18.0


def test_sources_separation_and_widths():
    _, truth = small_sources(seed=2)
    diff = truth.centers[:, None, :] - truth.centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(dist, np.inf)
    assert dist.min() >= 2.0
    widths = np.exp(truth.log_widths / 2.0)
    assert widths.min() >= 1.5 and widths.max() <= 3.0


def test_sources_reproducible():
    data_a, _ = small_sources(seed=5)
    data_b, _ = small_sources(seed=5)
    assert data_a.values.tobytes() == data_b.values.tobytes()


def test_sources_convolution_oracle():
    """Noise off, two alternating unit-weight sources: each voxel trace is
    the response kernel convolved with that source's activation boxes."""
    data, truth = gen_clustered_sources(
        n_sources=2,
        n_clusters=2,
        grid=VoxelGrid.lattice(6, 0.0, 19.0),
        t_total=40,
        block_len=5,
        snr_db=np.inf,
        weight_range=(1.0, 1.0),
        seed=7,
    )
    series, _ = data.flatten_time()
    rbf = np.exp(
        -np.sum((truth.centers[:, None, :] - truth.grid.positions[None, :, :]) ** 2, axis=2)
        / np.exp(truth.log_widths)[:, None]
    )
    blurred = np.stack(
        [np.convolve(truth.schedule[:, k], truth.kernel)[:40] for k in range(2)], axis=1
    )
    np.testing.assert_allclose(series, blurred @ rbf, rtol=1e-9, atol=1e-12)


def test_sources_identity_kernel_is_low_rank():
    data, truth = small_sources(seed=3, snr_db=np.inf, kernel=np.array([1.0]))
    series, _ = data.flatten_time()
    sv = np.linalg.svd(series, compute_uv=False)
    assert sv[30:].max() < 1e-10 * sv[0]
    np.testing.assert_array_equal(truth.kernel, [1.0])


def test_sources_snr_sets_noise_level():
    data0, truth = small_sources(seed=4, snr_db=np.inf)
    data5, _ = small_sources(seed=4, snr_db=5.0)
    noise = data5.values - data0.values
    clean_std = data0.values.std()
    target = clean_std * 10.0 ** (-5.0 / 20.0)
    assert abs(noise.std() - target) / target < 0.02


def test_sources_grid_too_small():
    with pytest.raises(DataError, match="too small"):
        gen_clustered_sources(grid=VoxelGrid.lattice(2, 0.0, 1.0), seed=0)
    with pytest.raises(DataError, match="too small"):
        gen_clustered_sources(
            n_sources=300, n_clusters=3, grid=VoxelGrid.lattice(4, 0.0, 19.0), seed=0
        )


def test_sources_validates_partitions():
    with pytest.raises(DataError, match="split evenly"):
        gen_clustered_sources(n_sources=31, n_clusters=3, seed=0)
    with pytest.raises(DataError, match="multiple"):
        gen_clustered_sources(t_total=151, block_len=5, seed=0)


# ---------------------------------------------------------------------------
# seasonal series


def test_seasonal_shapes_and_full_mask():
    data = gen_seasonal(14, 24, 5, missing_frac=0.0, seed=0)
    assert data.values.shape == (14, 24, 5)
    assert data.mask.all()
    assert data.instance_ids[0] == "day0000"


def test_seasonal_daily_period_dominates():
    data = gen_seasonal(28, 48, 6, seed=1)
    series = data.values.reshape(-1, 6)
    spectrum = np.abs(np.fft.rfft(series - series.mean(axis=0), axis=0))
    # strongest nonzero frequency is one cycle per day = 28 cycles overall
    assert (spectrum[1:].argmax(axis=0) + 1 == 28).all()


def test_seasonal_missing_rate():
    data = gen_seasonal(50, 48, 30, missing_frac=0.1, seed=2)
    assert abs((1.0 - data.coverage) - 0.1) < 0.01


def test_seasonal_blackout_days():
    data = gen_seasonal(10, 12, 4, missing_frac=0.0, blackout_days=3, seed=3)
    dark = ~data.mask.any(axis=(1, 2))
    assert dark.sum() == 3
    assert data.mask[~dark].all()


def test_seasonal_rejects_degenerate_missingness():
    with pytest.raises(DataError, match="missing_frac"):
        gen_seasonal(5, 12, 3, missing_frac=1.0, seed=0)
    with pytest.raises(DataError, match="missing_frac"):
        gen_seasonal(5, 12, 3, missing_frac=-0.1, seed=0)
    with pytest.raises(DataError, match="blackout"):
        gen_seasonal(5, 12, 3, blackout_days=6, seed=0)


def test_seasonal_reproducible():
    a = gen_seasonal(7, 24, 3, missing_frac=0.2, seed=9)
    b = gen_seasonal(7, 24, 3, missing_frac=0.2, seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()


def test_truth_sidecars_are_json_ready():
    import json

    _, toy = gen_toy(n_instances=2, t_steps=3, seed=0, grid_points=3)
    _, src = small_sources(seed=0)
    for truth in (toy, src):
        payload = json.loads(json.dumps(truth.to_json_dict()))
        assert payload["seed"] == 0
    assert isinstance(toy, ToyTruth)
