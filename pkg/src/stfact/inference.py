"""Inference with frozen generative parameters.

Covers held-out posterior fitting, rolling one-step forecasting,
importance-sampling log-likelihood, cluster extraction, and the masked
forecasting metrics.  Every operation here checks that the generative
parameters are bit-identical before and after (content hash).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import autodiff as ad
from . import elbo as el
from . import generative as gen
from . import nn
from . import variational as vr
from .data import ControlSequence, MaskedTensor, VoxelGrid
from .errors import DataError, NumericalError
from .generative import ModelConfig
from .nn import AdamState, GaussianParams, ParamVector, adam_step
from .rng import stream

Array = np.ndarray

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# metrics


def rmse(pred: Array, actual: Array, mask: Array) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("rmse needs at least one observed cell")
    diff = np.asarray(pred)[mask] - np.asarray(actual)[mask]
    return float(np.sqrt(np.mean(diff**2)))


def mape(pred: Array, actual: Array, mask: Array) -> float:
    """Percent absolute error over observed cells with nonzero actuals."""
    mask = np.asarray(mask, dtype=bool)
    actual = np.asarray(actual)
    keep = mask & (actual != 0)
    if not keep.any():
        raise DataError("mape needs at least one observed nonzero actual")
    return float(100.0 * np.mean(np.abs((np.asarray(pred)[keep] - actual[keep]) / actual[keep])))


def metrics(pred: Array, actual: Array, mask: Array) -> dict[str, float]:
    return {"rmse": rmse(pred, actual, mask), "mape": mape(pred, actual, mask)}


def adjusted_rand_index(labels_a, labels_b) -> float:
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise DataError("label vectors must be equal-length and nonempty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    cont = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(cont, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    total = comb2(a.size)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:  # both partitions trivial and identical
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# cluster extraction


def extract_clusters(theta: ParamVector, store: vr.VariationalStore) -> tuple[Array, Array]:
    """(labels, probabilities) from each instance's z_0 variational mean."""
    h0 = theta.content_hash()
    z0_mean = store.lam["lam.z0_mean"]
    probs = vr.cluster_posterior(z0_mean, theta.leaves(), store.config).value
    _assert_frozen(theta, h0)
    return probs.argmax(axis=-1), probs


def _assert_frozen(theta: ParamVector, h0: str) -> None:
    if theta.content_hash() != h0:
        raise NumericalError("generative parameters changed during inference")


# ---------------------------------------------------------------------------
# held-out inference


def _expected_d(config: ModelConfig, grid: VoxelGrid | None) -> int | None:
    if config.factor_head == "rbf":
        return grid.d if grid is not None else None
    if config.factor_head == "fixed":
        return config.fixed_factors.shape[1]
    return config.d_obs


def infer_heldout(
    theta: ParamVector,
    train_store: vr.VariationalStore,
    data: MaskedTensor,
    grid: VoxelGrid | None = None,
    controls: ControlSequence | None = None,
    steps: int = 200,
    lr: float = 1e-2,
    seed: int = 0,
    beta: float = 1.0,
) -> vr.VariationalStore:
    """Fit a fresh store to held-out data with theta and phi frozen.

    Shared factor rows (variant a) are copied from the training store and
    not optimized; per-instance rows are fitted from scratch.  Zero steps
    returns the initialization.
    """
    config = train_store.config
    expect_d = _expected_d(config, grid)
    if expect_d is not None and data.d != expect_d:
        raise DataError(f"test data has D={data.d}, model expects D={expect_d}")
    if config.u and controls is None:
        raise DataError("model expects controls but none were given")

    h0 = theta.content_hash()
    store = vr.init_store(data, config, stream(seed, "heldout.store"), grid=grid)
    store.phi = train_store.phi.copy()  # frozen posterior nets
    frozen_names: list[str] = []
    if config.dim_h and config.shared_factors:
        for suffix in ("mean", "logscale"):
            for base in ("lam.zf", "lam.h"):
                name = f"{base}_{suffix}"
                store.lam[name] = train_store.lam[name].copy()
                frozen_names.append(name)
    free_names = [n for n in store.lam.names() if n not in frozen_names]

    opt = AdamState.init(store.lam, per_row=True)
    noise_rng = stream(seed, "heldout.noise")
    idx = np.arange(data.n, dtype=np.int64)
    for _ in range(steps):
        noise = vr.make_noise(store, idx, noise_rng)
        lam_l = store.lam.leaves()
        total, _ = el.elbo_batch(
            data, store, theta.leaves(), lam_l, store.phi.leaves(), idx, noise, beta,
            grid=grid, controls=controls,
        )
        loss = ad.mul(total, -1.0 / data.n)
        grads = ad.grad(loss, {k: lam_l[k] for k in free_names})
        per_row = [n for n in free_names if store.lam[n].shape[0] == data.n]
        shared = [n for n in free_names if n not in per_row]
        adam_step(store.lam, {k: grads[k] for k in per_row}, opt, lr=lr, rows=idx)
        if shared:
            adam_step(
                store.lam, {k: grads[k] for k in shared}, opt, lr=lr,
                rows=np.zeros(1, dtype=np.int64),
            )
        if config.factor_head == "rbf" and not config.shared_factors:
            gen.clip_factor_means(store.lam["lam.h_mean"], grid, config.k)
    _assert_frozen(theta, h0)
    return store


# ---------------------------------------------------------------------------
# rolling forecast


@dataclass
class ForecastReport:
    predictions: Array  # (T, D)
    actuals: Array
    mask: Array
    per_step_rmse: Array  # (T,), NaN where a row has no observed cells
    rmse: float
    mape: float
    z_traj: Array  # (T, D_z) filtered latent means


class RollingPredictor:
    """One-step-ahead predictor with per-step posterior refitting.

    Usage is strictly predict() then observe() for each time step, which
    guarantees a prediction never peeks at its own target.  Predictions
    are distribution means; set sample=True (with an rng) to propagate
    sampled latents instead.
    """

    def __init__(
        self,
        theta: ParamVector,
        config: ModelConfig,
        factors: Array,
        z0: Array | None = None,
        refit_steps: int = 25,
        lr: float = 0.1,
        rng: np.random.Generator | None = None,
        sample: bool = False,
    ):
        if sample and rng is None:
            raise DataError("sample mode requires an rng")
        config.validate()
        self.theta = theta
        self.config = config
        self.factors = np.asarray(factors, dtype=np.float64)
        if self.factors.shape[0] != config.k:
            raise DataError(
                f"factors have {self.factors.shape[0]} rows, model has k={config.k}"
            )
        self._hash = theta.content_hash()
        self.refit_steps = refit_steps
        self.lr = lr
        self.rng = rng
        self.sample = sample
        if z0 is None:
            pi = special.softmax(theta["prior.logits"])
            z0 = pi @ theta["prior.mean"]
        self.z_cur = np.asarray(z0, dtype=np.float64).reshape(config.d_z)
        self.sigma_y = (
            float(np.exp(theta["obs.logsigma"])) if config.learn_sigma_y else config.sigma_y
        )
        self._pending: tuple[Array, Array] | None = None  # (z_next_mean, u)
        self.t = 0

    def _check_u(self, u) -> Array | None:
        if self.config.u == 0:
            return None
        if u is None:
            raise DataError("model is control-conditioned; pass u to predict/observe")
        u = np.asarray(u, dtype=np.float64).reshape(1, self.config.u)
        return u

    def predict(self, u=None) -> Array:
        """Mean one-step-ahead prediction for the next row."""
        if self._pending is not None:
            raise DataError("predict called twice without an observe in between")
        u = self._check_u(u)
        theta_l = self.theta.leaves()
        p_z = gen.transition_prior(theta_l, self.config, self.z_cur[None, :], u)
        if self.sample:
            z_next = nn.reparam_sample(p_z, self.rng.standard_normal(self.config.d_z)).value[0]
        else:
            z_next = p_z.mean.value[0]
        p_w = gen.emit_weights(theta_l, self.config, z_next[None, :])
        if self.sample:
            w_next = nn.reparam_sample(p_w, self.rng.standard_normal(self.config.k)).value[0]
        else:
            w_next = p_w.mean.value[0]
        self._pending = (z_next, u)
        return w_next @ self.factors

    def observe(self, y_row: Array, mask_row: Array | None = None, u=None) -> None:
        """Absorb the realized row: short ELBO refit of this step's latents."""
        if self._pending is None:
            raise DataError("observe called before predict")
        z_init, u_pred = self._pending
        u = self._check_u(u)
        if u_pred is not None and u is not None and not np.array_equal(u_pred, u):
            raise DataError("control passed to observe differs from the predicted one")
        y_row = np.asarray(y_row, dtype=np.float64).reshape(-1)
        if y_row.size != self.factors.shape[1]:
            raise DataError(
                f"row has {y_row.size} columns, factors have {self.factors.shape[1]}"
            )
        if mask_row is None:
            mask_row = np.isfinite(y_row)
        mask_row = np.asarray(mask_row, dtype=bool).reshape(y_row.shape)
        y_row = np.where(mask_row, y_row, 0.0)

        config = self.config
        theta_l = self.theta.leaves()
        w_init = gen.emit_weights(theta_l, config, z_init[None, :]).mean.value

        params = ParamVector()
        params.add("z_mean", z_init[None, :].copy())
        params.add("z_logscale", np.full((1, config.d_z), vr.INIT_LOG_SCALE))
        params.add("w_mean", w_init.copy())
        params.add("w_logscale", np.full((1, config.k), vr.INIT_LOG_SCALE))
        opt = AdamState.init(params)
        z_prev = self.z_cur[None, :]
        for _ in range(self.refit_steps):
            leaves = params.leaves()
            z_q = GaussianParams(leaves["z_mean"], ad.clip_log_scale(leaves["z_logscale"]))
            w_q = GaussianParams(leaves["w_mean"], ad.clip_log_scale(leaves["w_logscale"]))
            if self.sample:
                z_s = nn.reparam_sample(z_q, self.rng.standard_normal((1, config.d_z)))
                w_s = nn.reparam_sample(w_q, self.rng.standard_normal((1, config.k)))
            else:
                z_s, w_s = z_q.mean, w_q.mean
            l_rec = gen.obs_loglik(
                y_row[None, None, :],
                mask_row[None, None, :],
                ad.reshape(w_s, (1, 1, config.k)),
                self.factors,
                self.sigma_y,
            )
            p_z = gen.transition_prior(theta_l, config, z_prev, u_pred)
            p_w = gen.emit_weights(theta_l, config, z_s)
            bound = ad.sub(
                l_rec,
                ad.add(
                    ad.sum_(el.kl_gaussian_diag(z_q, p_z)),
                    ad.sum_(el.kl_gaussian_diag(w_q, p_w)),
                ),
            )
            grads = ad.grad(ad.neg(bound), leaves)
            adam_step(params, grads, opt, lr=self.lr)
        self.z_cur = params["z_mean"][0].copy()
        self._pending = None
        self.t += 1
        _assert_frozen(self.theta, self._hash)


def rolling_forecast(
    theta: ParamVector,
    config: ModelConfig,
    factors: Array,
    y: Array,
    mask: Array | None = None,
    controls_codes: Array | None = None,
    z0: Array | None = None,
    refit_steps: int = 25,
    lr: float = 0.1,
    rng: np.random.Generator | None = None,
    sample: bool = False,
) -> ForecastReport:
    """Strict one-step-ahead forecast over a (T, D) series.

    Each row is predicted from the filtered latent state before the row
    is read; the realized row is then absorbed by a short refit.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise DataError("test series must be a nonempty (T, D) array")
    t_steps, d = y.shape
    if mask is None:
        mask = np.isfinite(y)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != y.shape:
        raise DataError("mask shape does not match series shape")
    if controls_codes is not None:
        controls_codes = np.asarray(controls_codes, dtype=np.float64)
        if controls_codes.shape[0] != t_steps:
            raise DataError("controls length does not match series length")

    predictor = RollingPredictor(
        theta, config, factors, z0=z0, refit_steps=refit_steps, lr=lr, rng=rng, sample=sample
    )
    preds = np.zeros_like(y)
    z_traj = np.zeros((t_steps, config.d_z))
    for t in range(t_steps):
        u_t = controls_codes[t] if controls_codes is not None else None
        preds[t] = predictor.predict(u_t)
        predictor.observe(y[t], mask[t], u_t)
        z_traj[t] = predictor.z_cur

    per_step = np.full(t_steps, np.nan)
    for t in range(t_steps):
        if mask[t].any():
            per_step[t] = rmse(preds[t], y[t], mask[t])
    return ForecastReport(
        predictions=preds,
        actuals=np.where(mask, y, 0.0),
        mask=mask,
        per_step_rmse=per_step,
        rmse=rmse(preds, y, mask),
        mape=mape(preds, y, mask),
        z_traj=z_traj,
    )


def write_forecast_csv(report: ForecastReport, path) -> Path:
    path = Path(path)
    lines = ["t,d,pred,actual,observed"]
    t_steps, d = report.predictions.shape
    for t in range(t_steps):
        for j in range(d):
            lines.append(
                f"{t},{j},{report.predictions[t, j]!r},"
                f"{report.actuals[t, j]!r},{int(report.mask[t, j])}"
            )
    path.write_text("\n".join(lines) + "\n")
    return path


def write_forecast_json(
    report: ForecastReport, path, loglik: float | None = None, se: float | None = None
) -> Path:
    path = Path(path)
    payload = {
        "rmse": report.rmse,
        "mape": report.mape,
        "loglik": loglik,
        "se": se,
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# importance-sampling log-likelihood


def _gauss_logpdf(x: Array, mean: Array, log_scale: Array) -> Array:
    z = (x - mean) * np.exp(-log_scale)
    return -0.5 * (z**2 + LOG_2PI) - log_scale


def _log_joint(
    theta_l: dict,
    config: ModelConfig,
    sample: vr.LatentSample,
    data: MaskedTensor,
    codes: Array | None,
    sigma_y: float,
) -> tuple[Array, float]:
    """(per-instance log p, corpus-level shared log p) for one draw."""
    idx = sample.idx
    w = sample.w.value
    factors = sample.factors.value
    pred = w @ factors
    resid = np.where(data.mask[idx], data.values[idx] - pred, 0.0)
    n_obs = data.mask[idx].sum(axis=(1, 2))
    log_p = (
        -0.5 * (resid**2).sum(axis=(1, 2)) / sigma_y**2
        - n_obs * (np.log(sigma_y) + 0.5 * LOG_2PI)
    )

    # mixture-marginal initial density: log sum_s pi_s N(z0; mu_s, Sigma_s)
    z0 = sample.z0.value
    log_pi = theta_l["prior.logits"].value - special.logsumexp(theta_l["prior.logits"].value)
    prior_ls = np.clip(theta_l["prior.logscale"].value, -8.0, 8.0)
    comp = np.stack(
        [
            _gauss_logpdf(z0, theta_l["prior.mean"].value[s], prior_ls[s]).sum(axis=-1)
            for s in range(config.s)
        ],
        axis=-1,
    )
    log_p = log_p + special.logsumexp(comp + log_pi, axis=-1)

    z_prev = sample.z0
    for t, z_t in enumerate(sample.z):
        u_prev = codes[idx, t] if (codes is not None and config.u) else None
        p_t = gen.transition_prior(theta_l, config, z_prev, u_prev)
        log_p = log_p + _gauss_logpdf(
            z_t.value, p_t.mean.value, _ls_value(p_t.log_scale)
        ).sum(axis=-1)
        p_w = gen.emit_weights(theta_l, config, z_t)
        log_p = log_p + _gauss_logpdf(
            w[:, t], p_w.mean.value, _ls_value(p_w.log_scale)
        ).sum(axis=-1)
        z_prev = z_t

    shared = 0.0
    if config.dim_h:
        p_h = gen.emit_factor_params(theta_l, config, sample.zf)
        lp_h = _gauss_logpdf(sample.h.value, p_h.mean.value, _ls_value(p_h.log_scale)).sum(-1)
        lp_zf = _gauss_logpdf(sample.zf.value, 0.0, 0.0).sum(-1)
        if sample.shared_factors:
            shared = float(lp_h[0] + lp_zf[0])
        else:
            log_p = log_p + lp_h + lp_zf
    return log_p, shared


def _ls_value(log_scale) -> Array:
    return log_scale.value if isinstance(log_scale, ad.Var) else np.asarray(log_scale)


def importance_loglik(
    theta: ParamVector,
    store: vr.VariationalStore,
    data: MaskedTensor,
    s_samples: int = 100,
    seed: int = 0,
    grid: VoxelGrid | None = None,
    controls: ControlSequence | None = None,
    n_bootstrap: int = 200,
) -> tuple[float, float]:
    """log p(Y) estimate by importance sampling from the fitted posterior.

    Instances are combined by per-instance log-mean-exp sums, or one
    joint estimate when factor latents are shared across the corpus.
    Returns (estimate, bootstrap standard error).
    """
    if s_samples < 1:
        raise DataError("s_samples must be >= 1")
    if s_samples < 2:
        warnings.warn("s_samples < 2: no standard error available")
    config = store.config
    h0 = theta.content_hash()
    codes = controls.codes if isinstance(controls, ControlSequence) else controls
    sigma_y = float(np.exp(theta["obs.logsigma"])) if config.learn_sigma_y else config.sigma_y
    idx = np.arange(data.n, dtype=np.int64)
    noise_rng = stream(seed, "loglik.noise")
    theta_l = theta.leaves()
    lam_l = store.lam.leaves()
    phi_l = store.phi.leaves()

    shared = config.shared_factors and config.dim_h > 0
    ratios = np.zeros((s_samples, 1 if shared else data.n))
    for s in range(s_samples):
        noise = vr.make_noise(store, idx, noise_rng)
        draw = vr.sample_batch(idx, store, theta_l, lam_l, phi_l, noise, grid)
        log_p, shared_log_p = _log_joint(theta_l, config, draw, data, codes, sigma_y)
        log_q = vr.log_q(draw).value
        if shared:
            shared_log_q = float(vr.log_q_shared(draw).value)
            ratios[s, 0] = (log_p - log_q).sum() + shared_log_p - shared_log_q
        else:
            ratios[s] = log_p - log_q

    per_unit = special.logsumexp(ratios, axis=0) - np.log(s_samples)
    estimate = float(per_unit.sum())
    _assert_frozen(theta, h0)

    if s_samples < 2:
        return estimate, float("nan")
    boot_rng = stream(seed, "loglik.bootstrap")
    reps = np.zeros(n_bootstrap)
    for b in range(n_bootstrap):
        pick = boot_rng.integers(0, s_samples, size=(s_samples, ratios.shape[1]))
        resampled = np.take_along_axis(ratios, pick, axis=0)
        reps[b] = (special.logsumexp(resampled, axis=0) - np.log(s_samples)).sum()
    return estimate, float(reps.std(ddof=1))
