"""Annealed stochastic training loop over the ELBO.

Each epoch visits every instance once (full batch or shuffled
minibatches), draws a single reparameterized sample per instance,
backpropagates -mean(ELBO), and applies Adam to the generative
parameters, the posterior nets, and the touched rows of the
per-instance store.  RBF centers are clamped to the grid box after
every step.  History records dataset-level term sums per epoch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster import vq as sp_vq

from . import autodiff as ad
from . import variational as vr
from .checkpoint import save_checkpoint
from .data import ControlSequence, MaskedTensor, VoxelGrid
from .elbo import ElboBreakdown, anneal_factor, elbo_batch
from .errors import DataError, NumericalError
from .generative import ModelConfig, clip_factor_means, init_generative_params
from .nn import AdamState, ParamVector, adam_step
from .rng import stream

Array = np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-2
    anneal_epochs: int = 100
    batch_size: int = 0  # 0 = full dataset
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    checkpoint_dir: str | Path | None = None
    early_stop: bool = False
    early_stop_window: int = 20
    early_stop_tol: float = 1e-4
    mixture_reseed_epoch: int = 0  # 0 = off; k-means re-seed of the z0 mixture

    def validate(self) -> None:
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.lr <= 0:
            raise DataError("lr must be positive")
        if self.anneal_epochs < 1:
            raise DataError("anneal_epochs must be >= 1")
        if self.batch_size < 0:
            raise DataError("batch_size must be >= 0 (0 = full batch)")
        if self.early_stop and self.early_stop_window < 2:
            raise DataError("early_stop_window must be >= 2")
        if self.mixture_reseed_epoch < 0:
            raise DataError("mixture_reseed_epoch must be >= 0")


@dataclass
class TrainResult:
    theta: ParamVector
    store: vr.VariationalStore
    history: list[ElboBreakdown] = field(default_factory=list)
    stopped_epoch: int | None = None  # set when the plateau rule fired


def _batches(n: int, batch_size: int, rng) -> list[Array]:
    if batch_size <= 0 or batch_size >= n:
        return [np.arange(n, dtype=np.int64)]
    perm = rng.permutation(n).astype(np.int64)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _smoothed(values: list[float], window: int) -> float:
    return float(np.mean(values[-window:]))


def _reseed_mixture(
    theta: ParamVector,
    store: vr.VariationalStore,
    s: int,
    opt: AdamState,
    rng: np.random.Generator,
) -> None:
    """Drop the z0 mixture onto the current encoding cloud via k-means.

    A symmetric mixture tends to collapse onto the z0 centroid while the
    encodings are still forming, after which flat responsibilities leave
    no force to separate the components.  Re-seeding from the spread-out
    cloud gives each component its own basin before joint training
    resumes.  Optimizer moments for the prior are reset alongside.
    """
    z0 = store.lam["lam.z0_mean"]
    centers, labels = sp_vq.kmeans2(z0, s, minit="++", seed=rng)
    counts = np.bincount(labels, minlength=s).astype(np.float64)
    theta["prior.mean"][:] = centers
    theta["prior.logits"][:] = np.log((counts + 1.0) / (counts.sum() + s))
    spread = np.full((s, z0.shape[1]), 0.1)
    for c in range(s):
        members = z0[labels == c]
        if len(members) > 1:
            spread[c] = members.std(axis=0)
    theta["prior.logscale"][:] = np.log(np.maximum(spread, 0.05))
    for name in ("prior.mean", "prior.logits", "prior.logscale"):
        opt.m[name][:] = 0.0
        opt.v[name][:] = 0.0
        opt.step[name] = 0


def train(
    data: MaskedTensor,
    model_config: ModelConfig,
    config: TrainConfig,
    grid: VoxelGrid | None = None,
    controls: ControlSequence | None = None,
    init: tuple[ParamVector, vr.VariationalStore] | None = None,
    callback=None,
) -> TrainResult:
    """Fit the model; returns final parameters, store, and epoch history.

    A NaN loss aborts with NumericalError after writing an emergency
    checkpoint of the last finished epoch (when checkpoint_dir is set).
    A drop of more than 10x the first epoch's magnitude only warns.
    """
    model_config.validate()
    config.validate()
    if model_config.factor_head == "rbf" and grid is None:
        raise DataError("rbf factor head requires a grid")
    if model_config.u and controls is None:
        raise DataError("model expects controls but none were given")
    if controls is not None and controls.codes.shape[:2] != (data.n, data.t):
        raise DataError(
            f"controls shaped {controls.codes.shape[:2]} do not match data ({data.n}, {data.t})"
        )

    if init is not None:
        theta, store = init[0].copy(), init[1].copy()
    else:
        theta = init_generative_params(model_config, stream(config.seed, "init.theta"))
        store = vr.init_store(data, model_config, stream(config.seed, "init.store"), grid=grid)

    opt = {
        "theta": AdamState.init(theta),
        "phi": AdamState.init(store.phi),
        "lam": AdamState.init(store.lam, per_row=True),
    }
    lam_instance_names = [n for n in store.lam.names() if store.lam[n].shape[0] == data.n]
    lam_shared_names = [n for n in store.lam.names() if n not in lam_instance_names]
    shared_row = np.zeros(1, dtype=np.int64)

    noise_rng = stream(config.seed, "train.noise")
    batch_rng = stream(config.seed, "train.batch")
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    result = TrainResult(theta=theta, store=store)
    history = result.history
    last_good = (theta.copy(), store.copy())
    warned_divergence = False

    for epoch in range(config.epochs):
        beta = anneal_factor(epoch, config.anneal_epochs)
        sums = {"l_rec": 0.0, "l_h": 0.0, "l_c": 0.0, "l_zw": 0.0, "l_w": 0.0, "total": 0.0}
        try:
            for idx in _batches(data.n, config.batch_size, batch_rng):
                noise = vr.make_noise(store, idx, noise_rng)
                theta_l = theta.leaves()
                lam_l = store.lam.leaves()
                phi_l = store.phi.leaves()
                total, bd = elbo_batch(
                    data, store, theta_l, lam_l, phi_l, idx, noise, beta,
                    grid=grid, controls=controls,
                )
                loss = ad.mul(total, -1.0 / len(idx))
                leaves = {**theta_l, **lam_l, **phi_l}
                grads = ad.grad(loss, leaves)
                adam_step(theta, {k: grads[k] for k in theta.names()}, opt["theta"], lr=config.lr)
                adam_step(
                    store.phi, {k: grads[k] for k in store.phi.names()}, opt["phi"], lr=config.lr
                )
                adam_step(
                    store.lam, {k: grads[k] for k in lam_instance_names}, opt["lam"],
                    lr=config.lr, rows=idx,
                )
                if lam_shared_names:
                    adam_step(
                        store.lam, {k: grads[k] for k in lam_shared_names}, opt["lam"],
                        lr=config.lr, rows=shared_row,
                    )
                if model_config.factor_head == "rbf":
                    clip_factor_means(store.lam["lam.h_mean"], grid, model_config.k)
                for key in sums:
                    sums[key] += getattr(bd, key)
        except NumericalError:
            if ckpt_dir is not None:
                save_checkpoint(
                    ckpt_dir / "emergency", last_good[0], last_good[1], grid=grid,
                    meta={"epoch": epoch, "note": "last state before non-finite loss"},
                )
            raise

        epoch_bd = ElboBreakdown(beta=beta, **sums)
        history.append(epoch_bd)
        if callback is not None:
            callback(epoch, epoch_bd)

        if (
            config.mixture_reseed_epoch
            and epoch + 1 == config.mixture_reseed_epoch
            and model_config.s > 1
        ):
            _reseed_mixture(
                theta, store, model_config.s, opt["theta"],
                stream(config.seed, "train.mixture"),
            )

        if not warned_divergence and epoch > 0:
            ref = history[0].total
            if epoch_bd.total < ref - 10.0 * abs(ref):
                warnings.warn(
                    f"objective diverging: epoch {epoch} total {epoch_bd.total:.3g} "
                    f"fell more than 10x below the first epoch ({ref:.3g})"
                )
                warned_divergence = True

        last_good = (theta.copy(), store.copy())
        if (
            ckpt_dir is not None
            and config.checkpoint_every > 0
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            save_checkpoint(
                ckpt_dir / f"epoch{epoch + 1:05d}", theta, store, opt=opt, grid=grid,
                meta={"epoch": epoch + 1},
            )

        if config.early_stop and len(history) >= 2 * config.early_stop_window:
            totals = [h.total for h in history]
            recent = _smoothed(totals, config.early_stop_window)
            previous = float(
                np.mean(totals[-2 * config.early_stop_window : -config.early_stop_window])
            )
            if abs(recent - previous) <= config.early_stop_tol * max(1.0, abs(previous)):
                result.stopped_epoch = epoch + 1
                break

    return result


HISTORY_HEADER = "epoch,beta,l_rec,l_h,l_c,l_zw,l_w,total"


def write_history(history: list[ElboBreakdown], path) -> Path:
    path = Path(path)
    lines = [HISTORY_HEADER]
    for epoch, bd in enumerate(history):
        lines.append(
            ",".join(
                [str(epoch)]
                + [
                    repr(float(v))
                    for v in (bd.beta, bd.l_rec, bd.l_h, bd.l_c, bd.l_zw, bd.l_w, bd.total)
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")
    return path


def read_history(path) -> list[ElboBreakdown]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise DataError(f"unrecognized history header in {path}")
    out = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != 8:
            raise DataError(f"malformed history row: {line!r}")
        _, beta, l_rec, l_h, l_c, l_zw, l_w, total = map(float, cells)
        out.append(
            ElboBreakdown(
                l_rec=l_rec, l_h=l_h, l_c=l_c, l_zw=l_zw, l_w=l_w, beta=beta, total=total
            )
        )
    return out
