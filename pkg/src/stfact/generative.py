"""Generative densities: transitions, priors, emission heads, factor maps.

The model explains an (N, T, D) tensor Y as Y_n = W_n F_n + noise, where
the (T, K) weights W_n follow a gated Markovian state-space prior driven
by latents z, and the (K, D) factors F_n come from a spatial map applied
to per-factor parameters H_n.  An S-component Gaussian mixture over the
initial latent z_0 provides time-series clustering; one-hot controls can
condition the nonlinear branch of the transition.

All forward functions accept autodiff Vars or plain arrays and broadcast
over leading batch axes.  MLP heads use tanh hidden activations with
hidden width d_t for transition nets and d_e for emission nets; gate
outputs pass through a sigmoid; every log-scale head is clamped to
[-8, 8] before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Var
from .data import ControlSequence, VoxelGrid
from .errors import DataError
from .nn import GaussianParams, ParamVector

Array = np.ndarray

TRANSITION_FORMS = ("gated", "linear", "toy")
EMISSION_FORMS = ("mlp", "linear", "toy")
FACTOR_HEADS = ("rbf", "identity", "fixed")

# Bounds for the per-factor log-width during clipping and evaluation.
GAMMA_MIN = float(np.log(0.25))


@dataclass
class ModelConfig:
    """Sizes and structural switches of the generative model.

    sigma_y > 0 fixes the observation noise std; sigma_y == 0 makes the
    noise a learned parameter.  variant "a" shares one factor set across
    the corpus; "b" adds per-instance factors and S >= 2 clustering; "c"
    additionally conditions transitions on one-hot controls of width u.
    The "toy" and "linear" transition/emission forms replace the neural
    heads with small parametric families used for parameter-recovery and
    linear-Gaussian checks.
    """

    k: int
    d_z: int
    d_t: int = 4
    d_e: int = 8
    s: int = 1
    u: int = 0
    factor_head: str = "rbf"
    sigma_y: float = 0.1
    variant: str = "a"
    transition_form: str = "gated"
    emission_form: str = "mlp"
    d_obs: int | None = None
    fixed_factors: Array | None = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.k, self.d_z, self.d_t, self.d_e) < 1:
            raise DataError("k, d_z, d_t, d_e must all be >= 1")
        if self.s < 1:
            raise DataError("s must be >= 1")
        if self.variant not in ("a", "b", "c"):
            raise DataError(f"unknown variant '{self.variant}'")
        if self.variant == "a" and self.s != 1:
            raise DataError("variant a is the shared-factor model and requires s == 1")
        if self.variant == "c" and self.u < 1:
            raise DataError("variant c requires u >= 1")
        if self.variant != "c" and self.u != 0:
            raise DataError("controls are only available in variant c")
        if self.sigma_y < 0:
            raise DataError("sigma_y must be >= 0 (0 means learned)")
        if self.factor_head not in FACTOR_HEADS:
            raise DataError(f"unknown factor_head '{self.factor_head}'")
        if self.transition_form not in TRANSITION_FORMS:
            raise DataError(f"unknown transition_form '{self.transition_form}'")
        if self.emission_form not in EMISSION_FORMS:
            raise DataError(f"unknown emission_form '{self.emission_form}'")
        if self.transition_form == "toy" and self.d_z != 2:
            raise DataError("toy transition requires d_z == 2")
        if self.emission_form == "toy" and self.k != self.d_z:
            raise DataError("toy emission requires k == d_z")
        if self.factor_head == "identity" and not self.d_obs:
            raise DataError("identity factor head requires d_obs")
        if self.factor_head == "fixed":
            if self.fixed_factors is None:
                raise DataError("factor_head 'fixed' requires fixed_factors")
            self.fixed_factors = np.asarray(self.fixed_factors, dtype=np.float64)
            if self.fixed_factors.shape[0] != self.k:
                raise DataError("fixed_factors must have k rows")
            self.d_obs = self.fixed_factors.shape[1]

    @property
    def shared_factors(self) -> bool:
        return self.variant == "a"

    @property
    def dim_h(self) -> int:
        """Flattened width of per-factor spatial parameters."""
        if self.factor_head == "rbf":
            return 4 * self.k  # center (3) + log-width per factor
        if self.factor_head == "identity":
            return self.k * self.d_obs
        return 0

    @property
    def learn_sigma_y(self) -> bool:
        return self.sigma_y == 0.0


def init_generative_params(config: ModelConfig, rng: np.random.Generator) -> ParamVector:
    """Fresh generative parameters; layout depends only on config."""
    pv = ParamVector()
    pv.add("prior.logits", np.zeros(config.s))
    if config.s == 1:
        pv.add("prior.mean", np.zeros((1, config.d_z)))
    else:
        pv.add("prior.mean", rng.normal(0.0, 1.0, size=(config.s, config.d_z)))
    pv.add("prior.logscale", np.zeros((config.s, config.d_z)))
    if config.transition_form == "gated":
        nn.init_dense(pv, "trans.lin", config.d_z, config.d_z, rng)
        # state carries over by default; small noise breaks symmetry
        pv["trans.lin.w"][:] = 0.1 * pv["trans.lin.w"] + np.eye(config.d_z)
        nn.init_mlp(pv, "trans.mlp", config.d_z + config.u, config.d_t, config.d_z, rng)
        nn.init_mlp(pv, "trans.gate", config.d_z, config.d_t, config.d_z, rng)
        nn.init_mlp(pv, "trans.scale", config.d_z, config.d_t, config.d_z, rng)
    elif config.transition_form == "linear":
        nn.init_dense(pv, "trans.lin", config.d_z, config.d_z, rng)
        pv["trans.lin.w"][:] = 0.1 * pv["trans.lin.w"] + np.eye(config.d_z)
        pv.add("trans.logscale", np.zeros(config.d_z))
    else:  # toy nonlinear system with three scalar parameters
        for name in ("trans.rho", "trans.alpha", "trans.beta"):
            pv.add(name, rng.normal(0.0, 0.1, size=()))
    if config.emission_form == "mlp":
        nn.init_gaussian_head(pv, "emitw", config.d_z, config.d_e, config.k, rng)
    elif config.emission_form == "linear":
        nn.init_dense(pv, "emitw", config.d_z, config.k, rng)
        pv.add("emitw.logscale", np.zeros(config.k))
    if config.factor_head == "rbf":
        nn.init_gaussian_head(pv, "emitf", config.d_z, config.d_e, config.dim_h, rng)
    elif config.factor_head == "identity":
        nn.init_dense(pv, "emitf.mu", config.d_z, config.dim_h, rng)
        nn.init_dense(pv, "emitf.ls", config.d_z, config.dim_h, rng)
    if config.learn_sigma_y:
        pv.add("obs.logsigma", np.zeros(()))
    return pv


def generative_param_count(config: ModelConfig) -> int:
    """Closed-form size of init_generative_params output."""
    total = config.s + 2 * config.s * config.d_z
    dz, dt, de, k = config.d_z, config.d_t, config.d_e, config.k
    if config.transition_form == "gated":
        total += (dz + 1) * dz
        total += nn.mlp_param_count(dz + config.u, dt, dz)
        total += 2 * nn.mlp_param_count(dz, dt, dz)
    elif config.transition_form == "linear":
        total += (dz + 1) * dz + dz
    else:
        total += 3
    if config.emission_form == "mlp":
        total += nn.gaussian_head_param_count(dz, de, k)
    elif config.emission_form == "linear":
        total += (dz + 1) * k + k
    if config.factor_head == "rbf":
        total += nn.gaussian_head_param_count(dz, de, config.dim_h)
    elif config.factor_head == "identity":
        total += 2 * (dz + 1) * config.dim_h
    if config.learn_sigma_y:
        total += 1
    return total


def transition_prior(
    p: dict[str, Var], config: ModelConfig, z_prev, u_prev=None
) -> GaussianParams:
    """p(z_t | z_{t-1}, u_{t-1}): gated mean with a dedicated scale head."""
    if config.u > 0 and u_prev is None:
        raise DataError("variant c transition requires u_prev")
    if config.transition_form == "toy":
        z0 = ad.getitem(ad.as_var(z_prev), (..., slice(0, 1)))
        z1 = ad.getitem(ad.as_var(z_prev), (..., slice(1, 2)))
        mean = ad.concat(
            [
                ad.add(ad.mul(p["trans.rho"], z0), ad.tanh(ad.mul(p["trans.alpha"], z1))),
                ad.add(ad.mul(p["trans.rho"], z1), ad.sin(ad.mul(p["trans.beta"], z0))),
            ],
            axis=-1,
        )
        return GaussianParams(mean, np.zeros(mean.shape))
    lin = nn.dense(p, "trans.lin", z_prev)
    if config.transition_form == "linear":
        log_scale = ad.clip_log_scale(p["trans.logscale"])
        return GaussianParams(lin, log_scale)
    x = ad.concat([ad.as_var(z_prev), ad.as_var(u_prev)], axis=-1) if config.u else z_prev
    nonlin = nn.mlp_forward(p, "trans.mlp", x)
    gate = ad.sigmoid(nn.mlp_forward(p, "trans.gate", z_prev))
    mean = ad.add(ad.mul(ad.sub(1.0, gate), lin), ad.mul(gate, nonlin))
    log_scale = ad.clip_log_scale(nn.mlp_forward(p, "trans.scale", z_prev))
    return GaussianParams(mean, log_scale)


def initial_prior(p: dict[str, Var], config: ModelConfig, c) -> GaussianParams:
    """p(z_0 | c): the c-th mixture component, batched over integer c."""
    c = np.asarray(c)
    if c.size and (c.min() < 0 or c.max() >= config.s):
        raise DataError(f"state index out of range for s={config.s}")
    return GaussianParams(
        ad.getitem(p["prior.mean"], c),
        ad.clip_log_scale(ad.getitem(p["prior.logscale"], c)),
    )


def mixture_weights(p: dict[str, Var]) -> Var:
    """Mixing proportions pi as a Var; softmax of stored logits."""
    return ad.softmax(p["prior.logits"], axis=-1)


def emit_weights(p: dict[str, Var], config: ModelConfig, z) -> GaussianParams:
    """p(w_t | z_t) head producing K means and K log-scales."""
    if config.emission_form == "mlp":
        return nn.gaussian_head(p, "emitw", z)
    if config.emission_form == "linear":
        return GaussianParams(
            nn.dense(p, "emitw", z), ad.clip_log_scale(p["emitw.logscale"])
        )
    mean = ad.mul(0.5, ad.as_var(z))  # toy emission: w ~ N(0.5 z, 0.1)
    return GaussianParams(mean, np.full(mean.shape, np.log(0.1)))


def emit_factor_params(p: dict[str, Var], config: ModelConfig, z_f) -> GaussianParams:
    """p(H | z^f) over flattened per-factor spatial parameters."""
    if config.factor_head == "rbf":
        return nn.gaussian_head(p, "emitf", z_f)
    if config.factor_head == "identity":
        return GaussianParams(
            nn.dense(p, "emitf.mu", z_f),
            ad.clip_log_scale(nn.dense(p, "emitf.ls", z_f)),
        )
    raise DataError("factor_head 'fixed' has no factor emission head")


def rbf_factors(h, grid: VoxelGrid | Array) -> Var:
    """Factor map F[k, d] = exp(-||rho_k - r_d||^2 / exp(gamma_k)).

    h packs per-factor rows [rho_x, rho_y, rho_z, gamma] flattened to a
    trailing 4K axis.  Implemented as one fused tape node so the (K, D)
    intermediate is never stored more than twice.
    """
    positions = grid.positions if isinstance(grid, VoxelGrid) else np.asarray(grid)
    h = ad.as_var(h)
    if h.shape[-1] % 4 != 0:
        raise DataError("rbf factor parameters must have a trailing 4K axis")
    k = h.shape[-1] // 4
    hr = ad.reshape(h, h.shape[:-1] + (k, 4))
    centers = ad.getitem(hr, (..., slice(0, 3)))
    gamma = ad.getitem(hr, (..., 3))
    c = centers.value
    gval = np.clip(gamma.value, -30.0, 30.0)
    inv = np.exp(-gval)[..., None]
    r2 = (positions**2).sum(axis=1)
    d2 = (c**2).sum(axis=-1, keepdims=True) - 2.0 * (c @ positions.T) + r2
    out = np.exp(-d2 * inv)

    def vjp_centers(g: Array) -> Array:
        gf = g * out * inv
        return -2.0 * (c * gf.sum(axis=-1, keepdims=True) - gf @ positions)

    def vjp_gamma(g: Array) -> Array:
        inside = (gamma.value >= -30.0) & (gamma.value <= 30.0)
        return (g * out * d2).sum(axis=-1) * inv[..., 0] * inside

    return Var(out, (centers, gamma), (vjp_centers, vjp_gamma), "rbf_factors")


def identity_factors(h, k: int, d_obs: int) -> Var:
    """Identity factor map: reshape flattened rows into (K, D)."""
    h = ad.as_var(h)
    return ad.reshape(h, h.shape[:-1] + (k, d_obs))


def factor_map(h, config: ModelConfig, grid: VoxelGrid | None):
    if config.factor_head == "rbf":
        if grid is None:
            raise DataError("rbf factor head requires a voxel grid")
        return rbf_factors(h, grid)
    if config.factor_head == "identity":
        return identity_factors(h, config.k, config.d_obs)
    return ad.as_var(config.fixed_factors)


def obs_loglik(y: Array, mask: Array, w, factors, sigma_y) -> Var:
    """Masked Gaussian log-likelihood of Y given W (.., T, K) and F (.., K, D).

    sigma_y is either a positive float (fixed noise std) or a Var holding
    the learned log std.  Mask-false cells contribute exactly zero.
    """
    if isinstance(sigma_y, Var):
        log_sigma = sigma_y
    else:
        if sigma_y <= 0:
            raise DataError("sigma_y must be positive")
        log_sigma = float(np.log(sigma_y))
    y = np.asarray(y, dtype=np.float64)
    mask_f = np.asarray(mask, dtype=np.float64)
    mu = ad.matmul(ad.as_var(w), ad.as_var(factors))
    resid = ad.mul(ad.sub(y, mu), mask_f)
    n_obs = float(mask_f.sum())
    quad = ad.mul(ad.sum_(ad.square(resid)), ad.mul(0.5, ad.exp(ad.mul(-2.0, log_sigma))))
    const = ad.add(ad.mul(n_obs, log_sigma), 0.5 * nn.LOG_2PI * n_obs)
    return ad.neg(ad.add(quad, const))


def clip_factor_means(h_mean: Array, grid: VoxelGrid, k: int) -> Array:
    """Clamp RBF centers to the grid box and log-widths to a sane range.

    Applied in place after optimizer steps, mirroring the constraint that
    factors stay inside the observed volume.
    """
    lo, hi = grid.bbox()
    gamma_max = float(np.log(grid.diameter() ** 2))
    hr = h_mean.reshape(h_mean.shape[:-1] + (k, 4))
    np.clip(hr[..., :3], lo, hi, out=hr[..., :3])
    np.clip(hr[..., 3], GAMMA_MIN, gamma_max, out=hr[..., 3])
    return h_mean


def generate_rollout(
    theta: ParamVector,
    config: ModelConfig,
    t_steps: int,
    rng: np.random.Generator | None = None,
    n: int = 1,
    z0: Array | None = None,
    c: Array | None = None,
    controls: ControlSequence | Array | None = None,
    grid: VoxelGrid | None = None,
    factors: Array | None = None,
    noise_free: bool = False,
) -> dict[str, Array]:
    """Ancestral sampling through the generative chain.

    Returns z0 (n, D_z), z (n, T, D_z), w (n, T, K), y (n, T, D), the
    sampled states c, and the factors used.  noise_free propagates means
    only (rng may then be omitted).
    """
    if t_steps < 0:
        raise DataError("t_steps must be >= 0")
    if config.u > 0 and controls is None and t_steps > 0:
        raise DataError("variant c rollout requires controls")
    if not noise_free and rng is None:
        raise DataError("sampling rollout requires an rng")
    codes = None
    if controls is not None:
        codes = controls.codes if isinstance(controls, ControlSequence) else np.asarray(controls)
        if codes.ndim != 3 or codes.shape[0] != n or codes.shape[1] < t_steps:
            raise DataError("controls must be (n, >=t_steps, u)")
    p = theta.leaves()

    if c is None:
        if config.s == 1:
            c = np.zeros(n, dtype=np.int64)
        else:
            pi = mixture_weights(p).value
            c = rng.choice(config.s, size=n, p=pi)
    c = np.asarray(c, dtype=np.int64)

    def draw(gp: GaussianParams, shape) -> Array:
        g = gp.detach()
        if noise_free:
            return np.broadcast_to(g.mean, shape).astype(np.float64)
        return g.mean + np.exp(g.log_scale) * rng.standard_normal(shape)

    if z0 is None:
        z0 = draw(initial_prior(p, config, c), (n, config.d_z))
    else:
        z0 = np.broadcast_to(np.asarray(z0, dtype=np.float64), (n, config.d_z)).copy()

    zf = None
    h = None
    if factors is None:
        if config.factor_head == "fixed":
            factors = config.fixed_factors
        else:
            n_sets = 1 if config.shared_factors else n
            zf = (
                np.zeros((n_sets, config.d_z))
                if noise_free
                else rng.standard_normal((n_sets, config.d_z))
            )
            h = draw(emit_factor_params(p, config, zf), (n_sets, config.dim_h))
            factors = factor_map(h, config, grid).value
            if config.shared_factors:
                factors = factors[0]

    zs = []
    ws = []
    z_prev = z0
    for t in range(t_steps):
        u_prev = codes[:, t] if codes is not None and config.u else None
        z_t = draw(transition_prior(p, config, z_prev, u_prev), (n, config.d_z))
        w_t = draw(emit_weights(p, config, z_t), (n, config.k))
        zs.append(z_t)
        ws.append(w_t)
        z_prev = z_t
    z = np.stack(zs, axis=1) if zs else np.zeros((n, 0, config.d_z))
    w = np.stack(ws, axis=1) if ws else np.zeros((n, 0, config.k))

    f_arr = np.asarray(factors, dtype=np.float64)
    y_mean = w @ f_arr if f_arr.ndim == 2 else np.einsum("ntk,nkd->ntd", w, f_arr)
    if noise_free:
        y = y_mean
    else:
        sigma = float(np.exp(theta["obs.logsigma"])) if config.learn_sigma_y else config.sigma_y
        y = y_mean + sigma * rng.standard_normal(y_mean.shape)
    return {"z0": z0, "z": z, "w": w, "y": y, "c": c, "factors": f_arr, "zf": zf, "h": h}
