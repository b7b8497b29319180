"""Non-amortized variational family and structured posterior.

Every instance owns mean-field Gaussian parameters for its weights w_t,
initial latent z_0, factor driver z^f, and spatial parameters H (the last
two collapse to a single shared row in the shared-factor variant).  The
Markovian latents z_{1:T} instead use a structured posterior: sampled
weights run through a bidirectional RNN and a combiner MLP turns
(z_{t-1}, h_t) into q(z_t).  The cluster variable has the closed-form
posterior softmax_s[log pi_s + log N(z_0; mu_s, Sigma_s)] and is never
sampled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import generative as gen
from . import nn
from .autodiff import Var
from .data import MaskedTensor, VoxelGrid, mean_square_field
from .errors import DataError
from .generative import ModelConfig
from .nn import GaussianParams, ParamVector

Array = np.ndarray

INIT_MEAN_STD = 0.1  # lambda means start near zero
INIT_LOG_SCALE = -1.0  # all variational log-scales start at -1


@dataclass
class VariationalStore:
    """Per-instance lambda arrays plus shared posterior nets phi."""

    lam: ParamVector
    phi: ParamVector
    n: int
    t: int
    config: ModelConfig
    instance_ids: list[str]

    @property
    def n_factor_rows(self) -> int:
        return 1 if self.config.shared_factors else self.n

    def param_count(self) -> tuple[int, int]:
        """(per-datapoint count, shared net count)."""
        return self.lam.n_params, self.phi.n_params

    def param_count_formula(self) -> int:
        """Closed-form per-datapoint count: 2(NTK + 2N D_z + N dim_h).

        The factor rows collapse to one shared row in variant a, and the
        zf/H block disappears entirely with fixed factors.
        """
        c = self.config
        if not c.dim_h:
            return 2 * (self.n * self.t * c.k + self.n * c.d_z)
        rows = self.n_factor_rows
        return 2 * (self.n * self.t * c.k + self.n * c.d_z + rows * c.d_z + rows * c.dim_h)

    def copy(self) -> "VariationalStore":
        return VariationalStore(
            self.lam.copy(), self.phi.copy(), self.n, self.t, self.config, list(self.instance_ids)
        )


@dataclass
class LatentSample:
    """One reparameterized draw for a batch of instances.

    z holds z_1..z_T; z_q the structured posterior parameters used for
    each step.  Factor-level draws (zf, h, factors) have a leading axis of
    1 when shared across the corpus.  noise records the standard-normal
    draws so a sample can be replayed exactly.
    """

    idx: Array
    w: Var
    w_q: GaussianParams
    z0: Var
    z0_q: GaussianParams
    z: list[Var]
    z_q: list[GaussianParams]
    cluster_probs: Var
    factors: Var
    shared_factors: bool = False
    zf: Var | None = None
    zf_q: GaussianParams | None = None
    h: Var | None = None
    h_q: GaussianParams | None = None
    noise: dict[str, Array] | None = None


def init_phi(config: ModelConfig, rng: np.random.Generator) -> ParamVector:
    """Shared posterior nets: BRNN over w plus the combiner head."""
    pv = ParamVector()
    nn.init_birnn(pv, "enc", config.k, config.d_e, rng)
    nn.init_gaussian_head(pv, "comb", config.d_z + 2 * config.d_e, config.d_t, config.d_z, rng)
    return pv


def phi_param_count(config: ModelConfig) -> int:
    return nn.birnn_param_count(config.k, config.d_e) + nn.gaussian_head_param_count(
        config.d_z + 2 * config.d_e, config.d_t, config.d_z
    )


def _init_factor_means(
    data: MaskedTensor, config: ModelConfig, grid: VoxelGrid, rng: np.random.Generator
) -> Array:
    """Center means at the K strongest local maxima of the averaged field.

    Peaks are greedily separated by twice the grid spacing, then the
    selected K are ordered by descending (x, y, z) so factor indexing is
    a deterministic function of the data.  Log-widths start at
    log((2 * spacing)^2).
    """
    field = mean_square_field(data)
    spacing = grid.nn_spacing()
    peak_idx = grid.local_maxima(field)
    peak_idx = peak_idx[np.argsort(field[peak_idx])[::-1]]
    chosen: list[int] = []
    for i in peak_idx:
        if len(chosen) == config.k:
            break
        pos = grid.positions[i]
        if all(np.linalg.norm(pos - grid.positions[j]) >= 2.0 * spacing for j in chosen):
            chosen.append(int(i))
    if len(chosen) < config.k:
        warnings.warn(
            f"found {len(chosen)} usable local maxima for k={config.k}; "
            "filling remaining centers with random grid points"
        )
        pool = rng.permutation(grid.d)
        for i in pool:
            if len(chosen) == config.k:
                break
            if i not in chosen:
                chosen.append(int(i))
    centers = grid.positions[chosen]
    order = np.lexsort((-centers[:, 2], -centers[:, 1], -centers[:, 0]))
    centers = centers[order]
    h = np.zeros((config.k, 4))
    h[:, :3] = centers
    h[:, 3] = np.log((2.0 * spacing) ** 2)
    return h.reshape(-1)


def _pca_z0(data: MaskedTensor, d_z: int, burn_in: int) -> Array:
    """Per-instance mean fields projected onto their top principal axes.

    burn_in drops that many leading steps of every sequence so a
    convolutional response settles before the summary is taken.  Scores
    are scaled to unit overall std; missing dims (d_obs < d_z) stay 0.
    """
    if burn_in >= data.t:
        raise DataError(f"z0_burn_in {burn_in} leaves no steps of {data.t}")
    y, m = data.values[:, burn_in:], data.mask[:, burn_in:]
    cnt = np.maximum(m.sum(axis=1), 1)
    mean_field = (y * m).sum(axis=1) / cnt
    x = mean_field - mean_field.mean(axis=0)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    d = min(d_z, u.shape[1])
    z = np.zeros((data.n, d_z))
    z[:, :d] = u[:, :d] * s[:d]
    sd = z.std()
    if sd > 0:
        z /= sd
    return z


def init_store(
    data: MaskedTensor,
    config: ModelConfig,
    rng: np.random.Generator,
    grid: VoxelGrid | None = None,
    z0_init: str = "random",
    z0_burn_in: int = 0,
) -> VariationalStore:
    """Fresh store: means ~ N(0, 0.1^2), log-scales -1, data-driven centers."""
    if z0_init not in ("random", "pca"):
        raise DataError(f"unknown z0_init {z0_init!r}")
    n, t = data.n, data.t
    lam = ParamVector()

    def add_pair(name: str, shape: tuple[int, ...]) -> None:
        lam.add(f"{name}_mean", rng.normal(0.0, INIT_MEAN_STD, size=shape))
        lam.add(f"{name}_logscale", np.full(shape, INIT_LOG_SCALE))

    add_pair("lam.w", (n, t, config.k))
    add_pair("lam.z0", (n, config.d_z))
    if z0_init == "pca":
        lam["lam.z0_mean"] = _pca_z0(data, config.d_z, z0_burn_in)
    if config.dim_h:
        rows = 1 if config.shared_factors else n
        add_pair("lam.zf", (rows, config.d_z))
        add_pair("lam.h", (rows, config.dim_h))
        if config.factor_head == "rbf":
            if grid is None:
                raise DataError("rbf factor head requires a grid at init")
            lam["lam.h_mean"] = np.tile(_init_factor_means(data, config, grid, rng), (rows, 1))
    phi = init_phi(config, rng)
    return VariationalStore(lam, phi, n, t, config, list(data.instance_ids))


def encode_weights(phi: dict[str, Var], w) -> list[Var]:
    """BRNN over sampled weights; returns per-step hidden states.

    Accepts a (B, T, K) Var (sliced internally) or a length-T list.
    """
    if isinstance(w, (list, tuple)):
        seq = list(w)
    else:
        w = ad.as_var(w)
        seq = [ad.getitem(w, (slice(None), t)) for t in range(w.shape[1])]
    return nn.birnn_forward(phi, "enc", seq)


def structured_step(phi: dict[str, Var], z_prev, h_t) -> GaussianParams:
    """q(z_t | z_{t-1}, h_t): combiner MLP on the concatenation."""
    x = ad.concat([ad.as_var(z_prev), ad.as_var(h_t)], axis=-1)
    return nn.gaussian_head(phi, "comb", x)


def cluster_posterior(z0, theta: dict[str, Var], config: ModelConfig) -> Var:
    """Closed-form q(c): softmax_s[log pi_s + log N(z0; mu_s, Sigma_s)]."""
    z0 = ad.as_var(z0)
    log_pi = ad.log_softmax(theta["prior.logits"], axis=-1)
    z0e = ad.reshape(z0, z0.shape[:-1] + (1, config.d_z))
    comp = nn.gaussian_logpdf(
        z0e, theta["prior.mean"], ad.clip_log_scale(theta["prior.logscale"])
    )
    return ad.softmax(ad.add(ad.sum_(comp, axis=-1), log_pi), axis=-1)


def make_noise(
    store: VariationalStore,
    idx: Array,
    rng: np.random.Generator | None,
    zero: bool = False,
) -> dict[str, Array]:
    """Standard-normal draws for one batch; zeros in deterministic mode."""
    c = store.config
    b = len(idx)
    shapes = {
        "w": (b, store.t, c.k),
        "z0": (b, c.d_z),
        "z": (store.t, b, c.d_z),
    }
    if c.dim_h:
        shapes["zf"] = (1 if c.shared_factors else b, c.d_z)
        shapes["h"] = (1 if c.shared_factors else b, c.dim_h)
    if zero:
        return {k: np.zeros(s) for k, s in shapes.items()}
    if rng is None:
        raise DataError("sampling requires an rng or zero=True")
    return {k: rng.standard_normal(s) for k, s in shapes.items()}


def _lam_slice(lam: dict[str, Var], name: str, idx: Array) -> GaussianParams:
    return GaussianParams(
        ad.getitem(lam[f"{name}_mean"], idx),
        ad.clip_log_scale(ad.getitem(lam[f"{name}_logscale"], idx)),
    )


def sample_batch(
    idx,
    store: VariationalStore,
    theta: dict[str, Var],
    lam: dict[str, Var],
    phi: dict[str, Var],
    noise: dict[str, Array],
    grid: VoxelGrid | None = None,
) -> LatentSample:
    """Reparameterized draw of all latents for the given instances.

    theta/lam/phi are leaf dicts so gradients reach the stored arrays;
    noise comes from make_noise (or zeros for deterministic evaluation).
    """
    idx = np.asarray(idx, dtype=np.int64)
    config = store.config

    w_q = _lam_slice(lam, "lam.w", idx)
    w = nn.reparam_sample(w_q, noise["w"])
    hiddens = encode_weights(phi, w)

    z0_q = _lam_slice(lam, "lam.z0", idx)
    z0 = nn.reparam_sample(z0_q, noise["z0"])

    z_list: list[Var] = []
    z_q_list: list[GaussianParams] = []
    z_prev = z0
    for t in range(store.t):
        q_t = structured_step(phi, z_prev, hiddens[t])
        z_t = nn.reparam_sample(q_t, noise["z"][t])
        z_list.append(z_t)
        z_q_list.append(q_t)
        z_prev = z_t

    zf = zf_q = h = h_q = None
    if config.dim_h:
        rows = np.zeros(1, dtype=np.int64) if config.shared_factors else idx
        zf_q = _lam_slice(lam, "lam.zf", rows)
        zf = nn.reparam_sample(zf_q, noise["zf"])
        h_q = _lam_slice(lam, "lam.h", rows)
        h = nn.reparam_sample(h_q, noise["h"])
        factors = gen.factor_map(h, config, grid)
    else:
        factors = ad.as_var(config.fixed_factors)

    probs = cluster_posterior(z0, theta, config)
    return LatentSample(
        idx=idx,
        w=w,
        w_q=w_q,
        z0=z0,
        z0_q=z0_q,
        z=z_list,
        z_q=z_q_list,
        cluster_probs=probs,
        factors=factors,
        shared_factors=config.shared_factors and config.dim_h > 0,
        zf=zf,
        zf_q=zf_q,
        h=h,
        h_q=h_q,
        noise=noise,
    )


def sample_instance(
    n: int,
    store: VariationalStore,
    theta_pv: ParamVector,
    rng: np.random.Generator | None,
    grid: VoxelGrid | None = None,
    zero_noise: bool = False,
) -> LatentSample:
    """Single-instance wrapper over sample_batch with fresh leaves."""
    idx = np.array([n], dtype=np.int64)
    noise = make_noise(store, idx, rng, zero=zero_noise)
    return sample_batch(
        idx, store, theta_pv.leaves(), store.lam.leaves(), store.phi.leaves(), noise, grid
    )


def log_q(sample: LatentSample) -> Var:
    """Per-instance log q of the recorded draw, shape (B,).

    Shared factor draws contribute a corpus-level scalar that is NOT
    included here; callers handling shared latents add log_q_shared.
    """
    total = ad.sum_(nn.gaussian_logpdf(sample.w, sample.w_q.mean, sample.w_q.log_scale), axis=(1, 2))
    total = ad.add(
        total, ad.sum_(nn.gaussian_logpdf(sample.z0, sample.z0_q.mean, sample.z0_q.log_scale), axis=-1)
    )
    for z_t, q_t in zip(sample.z, sample.z_q):
        total = ad.add(total, ad.sum_(nn.gaussian_logpdf(z_t, q_t.mean, q_t.log_scale), axis=-1))
    if sample.zf is not None and not sample.shared_factors:
        total = ad.add(total, _factor_log_q(sample))
    return total


def log_q_shared(sample: LatentSample) -> Var | float:
    """Corpus-level log q terms (shared zf and H rows), scalar."""
    if sample.zf is None or not sample.shared_factors:
        return 0.0
    return ad.sum_(_factor_log_q(sample))


def _factor_log_q(sample: LatentSample) -> Var:
    out = ad.sum_(
        nn.gaussian_logpdf(sample.zf, sample.zf_q.mean, sample.zf_q.log_scale), axis=-1
    )
    return ad.add(
        out, ad.sum_(nn.gaussian_logpdf(sample.h, sample.h_q.mean, sample.h_q.log_scale), axis=-1)
    )
