"""ELBO assembly: analytic KL terms plus the masked reconstruction term.

The objective for a batch is

    total = L_rec + beta * (L_H + L_C + L_zw + L_W)

where every KL is closed-form for diagonal Gaussians, the cluster
variable is marginalized by exact summation over its S values, and beta
follows a linear annealing schedule from 0.01 to 1.  Terms are summed
over the batch; corpus-level terms (shared factors) are scaled by B/N so
that epoch sums approximate the full-dataset bound under minibatching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from . import generative as gen
from . import nn
from . import variational as vr
from .autodiff import Var
from .data import ControlSequence, MaskedTensor, VoxelGrid
from .errors import NumericalError
from .generative import ModelConfig
from .nn import GaussianParams, ParamVector

Array = np.ndarray

BETA_FLOOR = 0.01


@dataclass
class ElboBreakdown:
    """Named ELBO terms in nats; total = l_rec + beta * (KL terms)."""

    l_rec: float
    l_h: float
    l_c: float
    l_zw: float
    l_w: float
    beta: float
    total: float

    def validate(self) -> None:
        for name in ("l_rec", "l_h", "l_c", "l_zw", "l_w", "total"):
            if not np.isfinite(getattr(self, name)):
                raise NumericalError(f"ELBO term {name} is not finite")


def anneal_factor(epoch: int, anneal_epochs: int) -> float:
    """Linear KL weight: 0.01 at epoch 0 rising to 1 at anneal_epochs."""
    frac = min(1.0, max(0.0, epoch / anneal_epochs))
    return BETA_FLOOR + (1.0 - BETA_FLOOR) * frac


def kl_gaussian_diag(q: GaussianParams, p: GaussianParams, axis=-1) -> Var:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over axis."""
    mq, lq = ad.as_var(q.mean), ad.as_var(q.log_scale)
    mp, lp = ad.as_var(p.mean), ad.as_var(p.log_scale)
    var_ratio = ad.exp(ad.mul(2.0, ad.sub(lq, lp)))
    sq_diff = ad.mul(ad.square(ad.sub(mq, mp)), ad.exp(ad.mul(-2.0, lp)))
    per_dim = ad.add(ad.sub(lp, lq), ad.mul(0.5, ad.sub(ad.add(var_ratio, sq_diff), 1.0)))
    return ad.sum_(per_dim, axis=axis)


def kl_categorical(q, p, axis=-1):
    """KL(q || p) for categorical distributions with 0 log 0 := 0.

    Graph inputs use q * (log q - log p); plain arrays use rel_entr,
    which handles exact zeros.
    """
    if isinstance(q, Var) or isinstance(p, Var):
        q, p = ad.as_var(q), ad.as_var(p)
        return ad.sum_(ad.mul(q, ad.sub(ad.log(q), ad.log(p))), axis=axis)
    return special.rel_entr(np.asarray(q), np.asarray(p)).sum(axis=axis)


def _cluster_scores(z0, theta: dict[str, Var], config: ModelConfig) -> Var:
    """log pi_s + log N(z0; mu_s, Sigma_s), shape (..., S)."""
    z0 = ad.as_var(z0)
    log_pi = ad.log_softmax(theta["prior.logits"], axis=-1)
    z0e = ad.reshape(z0, z0.shape[:-1] + (1, config.d_z))
    comp = nn.gaussian_logpdf(
        z0e, theta["prior.mean"], ad.clip_log_scale(theta["prior.logscale"])
    )
    return ad.add(ad.sum_(comp, axis=-1), log_pi)


def elbo_batch(
    data: MaskedTensor,
    store: vr.VariationalStore,
    theta: dict[str, Var],
    lam: dict[str, Var],
    phi: dict[str, Var],
    idx: Array,
    noise: dict[str, Array],
    beta: float,
    grid: VoxelGrid | None = None,
    controls: ControlSequence | None = None,
    shared_scale: float | None = None,
) -> tuple[Var, ElboBreakdown]:
    """ELBO over a batch of instances; returns (scalar Var, breakdown).

    shared_scale weights corpus-level terms (defaults to B/N) so epoch
    sums stay comparable across batch sizes.
    """
    config = store.config
    idx = np.asarray(idx, dtype=np.int64)
    b = len(idx)
    if shared_scale is None:
        shared_scale = b / store.n
    sample = vr.sample_batch(idx, store, theta, lam, phi, noise, grid)

    sigma = theta["obs.logsigma"] if config.learn_sigma_y else config.sigma_y
    l_rec = gen.obs_loglik(data.values[idx], data.mask[idx], sample.w, sample.factors, sigma)

    if config.dim_h:
        p_h = gen.emit_factor_params(theta, config, sample.zf)
        kl_h = kl_gaussian_diag(sample.h_q, p_h)
        zf_prior = GaussianParams(np.zeros(config.d_z), np.zeros(config.d_z))
        kl_zf = kl_gaussian_diag(sample.zf_q, zf_prior)
        l_h = ad.mul(ad.neg(ad.sum_(ad.add(kl_h, kl_zf))), shared_scale if sample.shared_factors else 1.0)
    else:
        l_h = ad.as_var(0.0)

    scores = _cluster_scores(sample.z0, theta, config)
    log_q_c = ad.log_softmax(scores, axis=-1)
    q_c = ad.exp(log_q_c)
    log_pi = ad.log_softmax(theta["prior.logits"], axis=-1)
    kl_c = ad.sum_(ad.mul(q_c, ad.sub(log_q_c, log_pi)), axis=-1)
    z0_mean = ad.reshape(sample.z0_q.mean, (b, 1, config.d_z))
    z0_ls = ad.reshape(sample.z0_q.log_scale, (b, 1, config.d_z))
    comp_prior = GaussianParams(theta["prior.mean"], ad.clip_log_scale(theta["prior.logscale"]))
    kl_z0_per_s = kl_gaussian_diag(GaussianParams(z0_mean, z0_ls), comp_prior)
    l_c = ad.neg(ad.sum_(ad.add(kl_c, ad.sum_(ad.mul(q_c, kl_z0_per_s), axis=-1))))

    codes = controls.codes if isinstance(controls, ControlSequence) else controls
    kl_z = ad.as_var(0.0)
    z_prev = sample.z0
    for t in range(store.t):
        u_prev = codes[idx, t] if (codes is not None and config.u) else None
        p_t = gen.transition_prior(theta, config, z_prev, u_prev)
        kl_z = ad.add(kl_z, ad.sum_(kl_gaussian_diag(sample.z_q[t], p_t)))
        z_prev = sample.z[t]
    l_zw = ad.neg(kl_z)

    kl_w = ad.as_var(0.0)
    for t in range(store.t):
        p_w = gen.emit_weights(theta, config, sample.z[t])
        q_w_t = GaussianParams(
            ad.getitem(sample.w_q.mean, (slice(None), t)),
            ad.getitem(sample.w_q.log_scale, (slice(None), t)),
        )
        kl_w = ad.add(kl_w, ad.sum_(kl_gaussian_diag(q_w_t, p_w)))
    l_w = ad.neg(kl_w)

    kl_sum = ad.add(ad.add(l_h, l_c), ad.add(l_zw, l_w))
    total = ad.add(l_rec, ad.mul(beta, kl_sum))
    total.name = "elbo"
    breakdown = ElboBreakdown(
        l_rec=float(l_rec.value),
        l_h=float(l_h.value),
        l_c=float(l_c.value),
        l_zw=float(l_zw.value),
        l_w=float(l_w.value),
        beta=float(beta),
        total=float(total.value),
    )
    breakdown.validate()
    return total, breakdown


def elbo_instance(
    n: int,
    theta_pv: ParamVector,
    store: vr.VariationalStore,
    data: MaskedTensor,
    beta: float,
    rng: np.random.Generator | None = None,
    grid: VoxelGrid | None = None,
    controls: ControlSequence | None = None,
    noise: dict[str, Array] | None = None,
) -> tuple[Var, ElboBreakdown]:
    """Single-instance ELBO with fresh leaves; see elbo_batch.

    Corpus-level terms are scaled by 1/N so that summing elbo_instance
    over all instances matches the full-dataset bound in expectation.
    """
    idx = np.array([n], dtype=np.int64)
    if noise is None:
        noise = vr.make_noise(store, idx, rng, zero=rng is None)
    return elbo_batch(
        data,
        store,
        theta_pv.leaves(),
        store.lam.leaves(),
        store.phi.leaves(),
        idx,
        noise,
        beta,
        grid=grid,
        controls=controls,
        shared_scale=1.0 / store.n,
    )
