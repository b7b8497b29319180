"""Ground-truth synthetic data generators.

Three families: a two-factor nonlinear dynamical system with RBF spatial
maps, a clustered-activation-source volume with hemodynamic blurring, and
a seasonal interval series with configurable missingness.  Every generator
is a pure function of its arguments plus a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sp_signal
from scipy import stats

from .data import MaskedTensor, VoxelGrid, split_sequences
from .errors import DataError
from .generative import rbf_factors
from .rng import stream

Array = np.ndarray

# Nonlinear toy system, pinned so recovery tests have fixed targets.
TOY_RHO = 0.2
TOY_ALPHA = 0.5
TOY_BETA = -0.1
TOY_W_STD = 0.1
TOY_CENTERS = np.array([[7.5, 7.5, 7.5], [-7.5, -7.5, -7.5]])
TOY_WIDTHS = np.array([3.0, 4.5])


@dataclass
class ToyTruth:
    """Generating parameters and latent paths of the toy system."""

    rho: float
    alpha: float
    beta: float
    centers: Array  # (2, 3)
    log_widths: Array  # (2,)
    seed: int
    grid: VoxelGrid
    z: Array  # (N, T+1, 2) latent paths including the initial state
    w: Array  # (N, T, 2) emitted weights
    factors: Array  # (2, D)

    def to_json_dict(self) -> dict:
        return {
            "kind": "toy",
            "rho": self.rho,
            "alpha": self.alpha,
            "beta": self.beta,
            "centers": self.centers.tolist(),
            "log_widths": self.log_widths.tolist(),
            "seed": self.seed,
        }


def toy_transition_mean(z_prev: Array, rho: float, alpha: float, beta: float) -> Array:
    """[rho*z0 + tanh(alpha*z1), rho*z1 + sin(beta*z0)] on trailing pairs."""
    z0, z1 = z_prev[..., 0], z_prev[..., 1]
    return np.stack([rho * z0 + np.tanh(alpha * z1), rho * z1 + np.sin(beta * z0)], axis=-1)


def gen_toy(
    n_instances: int = 100,
    t_steps: int = 15,
    seed: int = 0,
    rho: float = TOY_RHO,
    alpha: float = TOY_ALPHA,
    beta: float = TOY_BETA,
    sigma_y: float = 0.1,
    grid_points: int = 10,
) -> tuple[MaskedTensor, ToyTruth]:
    """Two-dimensional nonlinear latent walk emitting two RBF factor maps.

    z_t ~ N(toy_transition_mean(z_{t-1}), 1), w_t ~ N(0.5 z_t, 0.1), and
    Y = W F + observation noise over a cubic grid spanning [-15, 15]^3.
    The mask is full.
    """
    rng = stream(seed, "synth.toy")
    z = np.empty((n_instances, t_steps + 1, 2))
    z[:, 0] = rng.normal(size=(n_instances, 2))
    for t in range(1, t_steps + 1):
        z[:, t] = toy_transition_mean(z[:, t - 1], rho, alpha, beta) + rng.normal(
            size=(n_instances, 2)
        )
    w = rng.normal(loc=0.5 * z[:, 1:], scale=TOY_W_STD)

    grid = VoxelGrid.lattice(grid_points, -15.0, 15.0)
    log_widths = 2.0 * np.log(TOY_WIDTHS)
    h = np.column_stack([TOY_CENTERS, log_widths]).ravel()
    factors = rbf_factors(h, grid).value
    y = w @ factors + sigma_y * rng.normal(size=(n_instances, t_steps, grid.d))

    truth = ToyTruth(
        rho=rho,
        alpha=alpha,
        beta=beta,
        centers=TOY_CENTERS.copy(),
        log_widths=log_widths,
        seed=seed,
        grid=grid,
        z=z,
        w=w,
        factors=factors,
    )
    return MaskedTensor(y, np.ones_like(y, dtype=bool)), truth


def hrf_kernel(dt: float, length: int = 16) -> Array:
    """Canonical double-gamma hemodynamic response sampled every dt seconds.

    Response peak at 6 s minus undershoot peaking at 16 s with 1/6 the
    amplitude, normalized so the sampled kernel peaks at exactly 1.
    """
    if dt <= 0:
        raise DataError(f"sampling interval must be positive, got {dt}")
    if length < 2:
        raise DataError("kernel needs at least 2 taps to resolve the peak")
    t = np.arange(length) * dt
    peak = stats.gamma.pdf(t, a=7.0, scale=1.0)  # mode at (a-1)*scale = 6 s
    undershoot = stats.gamma.pdf(t, a=17.0, scale=1.0)  # mode at 16 s
    h = peak - undershoot / 6.0
    top = h.max()
    if top <= 0:
        raise DataError("kernel window misses the response peak entirely")
    return h / top


@dataclass
class SourceTruth:
    """Generating layout and schedule of the clustered-source volume."""

    centers: Array  # (K_true, 3)
    log_widths: Array  # (K_true,)
    source_labels: Array  # (K_true,) group of each source
    schedule: Array  # (T_total, K_true) pre-blur activation weights
    kernel: Array  # (L,) temporal blur applied along trials
    sequence_labels: Array  # (N,) active group of each extracted sequence
    grid: VoxelGrid
    snr_db: float
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "kind": "clustered",
            "centers": self.centers.tolist(),
            "log_widths": self.log_widths.tolist(),
            "source_labels": self.source_labels.tolist(),
            "sequence_labels": self.sequence_labels.tolist(),
            "schedule": self.schedule.tolist(),
            "kernel": self.kernel.tolist(),
            "snr_db": self.snr_db,
            "seed": self.seed,
        }


def gen_clustered_sources(
    n_sources: int = 30,
    n_clusters: int = 3,
    grid: VoxelGrid | None = None,
    t_total: int = 150,
    block_len: int = 5,
    snr_db: float = 5.0,
    seed: int = 0,
    min_sep: float = 2.0,
    width_range: tuple[float, float] = (1.5, 3.0),
    weight_range: tuple[float, float] = (0.5, 1.5),
    dt: float = 2.0,
    kernel_len: int = 16,
    kernel: Array | None = None,
) -> tuple[MaskedTensor, SourceTruth]:
    """RBF sources activated in rotating group blocks, blurred along time.

    Sources are placed uniformly inside the grid box (one lattice spacing
    of margin) with pairwise separation >= min_sep and split randomly into
    equal groups.  Group g is active with fresh uniform weights during
    blocks b where b % n_clusters == g; the weight series is convolved
    with the response kernel, mapped through the RBF factor images, and
    corrupted at the requested SNR.  The long series is chopped into
    non-overlapping sequences of block_len trials, one per block.
    """
    if n_sources % n_clusters != 0:
        raise DataError(f"{n_sources} sources do not split evenly into {n_clusters} groups")
    if t_total % block_len != 0:
        raise DataError(f"t_total {t_total} is not a multiple of block_len {block_len}")
    if grid is None:
        grid = VoxelGrid.lattice(20, 0.0, 19.0)
    rng = stream(seed, "synth.sources")

    lo, hi = grid.bbox()
    margin = grid.nn_spacing()
    lo_m, hi_m = lo + margin, hi - margin
    if np.any(lo_m >= hi_m):
        raise DataError("grid too small to place sources away from the boundary")
    centers: list[Array] = []
    tries = 0
    while len(centers) < n_sources:
        tries += 1
        if tries > 1000 * n_sources:
            raise DataError(
                f"grid too small to place {n_sources} sources {min_sep} apart"
            )
        cand = rng.uniform(lo_m, hi_m)
        if all(np.linalg.norm(cand - c) >= min_sep for c in centers):
            centers.append(cand)
    centers_arr = np.array(centers)
    widths = rng.uniform(*width_range, size=n_sources)
    log_widths = 2.0 * np.log(widths)

    per_group = n_sources // n_clusters
    source_labels = np.empty(n_sources, dtype=np.int64)
    source_labels[rng.permutation(n_sources)] = np.repeat(np.arange(n_clusters), per_group)

    n_blocks = t_total // block_len
    block_group = np.arange(n_blocks, dtype=np.int64) % n_clusters
    active = source_labels[None, :] == np.repeat(block_group, block_len)[:, None]
    schedule = rng.uniform(*weight_range, size=(t_total, n_sources)) * active

    if kernel is None:
        kernel = hrf_kernel(dt, kernel_len)
    kernel = np.asarray(kernel, dtype=np.float64)
    blurred = sp_signal.fftconvolve(schedule, kernel[:, None], axes=0)[:t_total]

    h = np.column_stack([centers_arr, log_widths]).ravel()
    factors = rbf_factors(h, grid).value
    clean = blurred @ factors
    noise_std = float(clean.std()) * 10.0 ** (-snr_db / 20.0)
    noisy = clean + noise_std * rng.normal(size=clean.shape)

    data = split_sequences(noisy, block_len)
    truth = SourceTruth(
        centers=centers_arr,
        log_widths=log_widths,
        source_labels=source_labels,
        schedule=schedule,
        kernel=kernel,
        sequence_labels=block_group,
        grid=grid,
        snr_db=snr_db,
        seed=seed,
    )
    return data, truth


def gen_seasonal(
    n_days: int,
    intervals_per_day: int,
    n_locations: int,
    missing_frac: float = 0.0,
    seed: int = 0,
    blackout_days: int = 0,
) -> MaskedTensor:
    """Daily sinusoid with weekly modulation plus AR(1) noise, per location.

    Cells go missing independently at rate missing_frac; blackout_days
    additionally wipes that many whole days (all intervals, all locations).
    Instances are days, time steps are intervals within a day.
    """
    if not 0.0 <= missing_frac < 1.0:
        raise DataError(f"missing_frac must be in [0, 1), got {missing_frac}")
    if not 0 <= blackout_days <= n_days:
        raise DataError(f"blackout_days must be in [0, {n_days}], got {blackout_days}")
    rng = stream(seed, "synth.seasonal")

    base = rng.uniform(4.0, 8.0, size=n_locations)
    amp = rng.uniform(1.0, 3.0, size=n_locations)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_locations)
    weekly_amp = rng.uniform(0.1, 0.2, size=n_locations)
    weekly_phase = rng.uniform(0.0, 2.0 * np.pi, size=n_locations)

    total = n_days * intervals_per_day
    tt = np.arange(total)
    day = tt // intervals_per_day
    frac = (tt % intervals_per_day) / intervals_per_day
    daily = np.sin(2.0 * np.pi * frac[:, None] + phase[None, :])
    weekly = 1.0 + weekly_amp[None, :] * np.sin(
        2.0 * np.pi * day[:, None] / 7.0 + weekly_phase[None, :]
    )
    # mild persistence: strong AR noise is exactly what a last-value
    # carry-forward tracks, which would leave nothing for a factor model
    innovations = rng.normal(scale=0.2, size=(total, n_locations))
    ar = sp_signal.lfilter([1.0], [1.0, -0.3], innovations, axis=0)
    series = base[None, :] + amp[None, :] * weekly * daily + ar

    values = series.reshape(n_days, intervals_per_day, n_locations)
    mask = rng.random(size=values.shape) >= missing_frac
    if blackout_days:
        dark = rng.choice(n_days, size=blackout_days, replace=False)
        mask[dark] = False
    ids = [f"day{k:04d}" for k in range(n_days)]
    return MaskedTensor(values, mask, ids)
