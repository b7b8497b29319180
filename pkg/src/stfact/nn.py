"""Neural building blocks on top of the autodiff tape.

Parameters live in a :class:`ParamVector`, a flat dict of named float64
segments.  Layer initializers claim segments under a prefix; forward
functions look the segments up as autodiff leaves.  The Adam optimizer
updates segments in place and supports row-sparse updates so that
per-instance variational parameters outside a minibatch keep their
moments untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DataError, NumericalError

Array = np.ndarray

LOG_2PI = float(np.log(2.0 * np.pi))


class ParamVector:
    """Ordered collection of named float64 parameter arrays."""

    def __init__(self):
        self._data: dict[str, Array] = {}

    def add(self, name: str, value: Array) -> None:
        if name in self._data:
            raise ValueError(f"duplicate parameter segment '{name}'")
        self._data[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> Array:
        return self._data[name]

    def __setitem__(self, name: str, value: Array) -> None:
        current = self._data[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ValueError(f"shape mismatch for segment '{name}'")
        self._data[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._data.values())

    def copy(self) -> "ParamVector":
        out = ParamVector()
        for name, value in self._data.items():
            out.add(name, value.copy())
        return out

    def leaves(self, names: Iterable[str] | None = None) -> dict[str, Var]:
        """Autodiff leaves sharing storage with the segments."""
        keys = self.names() if names is None else list(names)
        return {k: ad.leaf(self._data[k], k) for k in keys}

    def flat(self) -> Array:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def set_flat(self, flat: Array) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("flat vector length does not match parameter count")
        offset = 0
        for name, value in self._data.items():
            self._data[name] = flat[offset : offset + value.size].reshape(value.shape).copy()
            offset += value.size

    def content_hash(self) -> str:
        """SHA-256 over names, shapes, and raw little-endian bytes."""
        h = hashlib.sha256()
        for name, value in self._data.items():
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class GaussianParams:
    """Diagonal Gaussian as mean and log standard deviation."""

    mean: Any  # Var or ndarray
    log_scale: Any

    def detach(self) -> "GaussianParams":
        m = self.mean.value if isinstance(self.mean, Var) else np.asarray(self.mean)
        s = self.log_scale.value if isinstance(self.log_scale, Var) else np.asarray(self.log_scale)
        return GaussianParams(np.array(m, dtype=np.float64), np.array(s, dtype=np.float64))


def reparam_sample(g: GaussianParams, noise: Array) -> Var:
    """Location-scale sample mean + exp(log_scale) * noise."""
    return ad.add(g.mean, ad.mul(ad.exp(g.log_scale), noise))


def gaussian_logpdf(x, mean, log_scale) -> Var:
    """Elementwise diagonal-Gaussian log density; callers reduce."""
    z = ad.mul(ad.sub(x, mean), ad.exp(ad.neg(log_scale)))
    return ad.sub(ad.mul(ad.add(ad.square(z), LOG_2PI), -0.5), log_scale)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    return rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))


def init_dense(pv: ParamVector, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    pv.add(f"{prefix}.w", _init_weight(rng, fan_in, fan_out))
    pv.add(f"{prefix}.b", np.zeros(fan_out))


def dense(p: dict[str, Var], prefix: str, x) -> Var:
    return ad.add(ad.dot(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def init_mlp(pv: ParamVector, prefix: str, fan_in: int, hidden: int, fan_out: int, rng) -> None:
    init_dense(pv, f"{prefix}.l1", fan_in, hidden, rng)
    init_dense(pv, f"{prefix}.l2", hidden, fan_out, rng)


def mlp_forward(p: dict[str, Var], prefix: str, x, act=ad.tanh) -> Var:
    """Two dense layers with an elementwise nonlinearity between."""
    return dense(p, f"{prefix}.l2", act(dense(p, f"{prefix}.l1", x)))


def mlp_param_count(fan_in: int, hidden: int, fan_out: int) -> int:
    return (fan_in + 1) * hidden + (hidden + 1) * fan_out


def init_gaussian_head(
    pv: ParamVector, prefix: str, fan_in: int, hidden: int, out: int, rng
) -> None:
    """Shared hidden layer with separate mean and log-scale outputs."""
    init_dense(pv, f"{prefix}.l1", fan_in, hidden, rng)
    init_dense(pv, f"{prefix}.mu", hidden, out, rng)
    init_dense(pv, f"{prefix}.ls", hidden, out, rng)


def gaussian_head(p: dict[str, Var], prefix: str, x, act=ad.tanh) -> GaussianParams:
    h = act(dense(p, f"{prefix}.l1", x))
    return GaussianParams(
        mean=dense(p, f"{prefix}.mu", h),
        log_scale=ad.clip_log_scale(dense(p, f"{prefix}.ls", h)),
    )


def gaussian_head_param_count(fan_in: int, hidden: int, out: int) -> int:
    return (fan_in + 1) * hidden + 2 * (hidden + 1) * out


def init_birnn(pv: ParamVector, prefix: str, fan_in: int, hidden: int, rng) -> None:
    for side in ("fw", "bw"):
        pv.add(f"{prefix}.{side}.wx", _init_weight(rng, fan_in, hidden))
        pv.add(f"{prefix}.{side}.wh", _init_weight(rng, hidden, hidden))
        pv.add(f"{prefix}.{side}.b", np.zeros(hidden))


def birnn_forward(p: dict[str, Var], prefix: str, seq: list) -> list[Var]:
    """One-layer bidirectional vanilla RNN with ReLU state update.

    Takes a length-T list of (..., fan_in) inputs and returns a length-T
    list of (..., 2 * hidden) states, forward half first.
    """
    if not seq:
        raise DataError("encoder needs at least one time step")
    T = len(seq)
    fw: list[Var] = []
    h = None
    for t in range(T):
        pre = ad.add(ad.dot(seq[t], p[f"{prefix}.fw.wx"]), p[f"{prefix}.fw.b"])
        if h is not None:
            pre = ad.add(pre, ad.dot(h, p[f"{prefix}.fw.wh"]))
        h = ad.relu(pre)
        fw.append(h)
    bw: list[Var] = [None] * T
    h = None
    for t in reversed(range(T)):
        pre = ad.add(ad.dot(seq[t], p[f"{prefix}.bw.wx"]), p[f"{prefix}.bw.b"])
        if h is not None:
            pre = ad.add(pre, ad.dot(h, p[f"{prefix}.bw.wh"]))
        h = ad.relu(pre)
        bw[t] = h
    return [ad.concat([fw[t], bw[t]], axis=-1) for t in range(T)]


def birnn_param_count(fan_in: int, hidden: int) -> int:
    return 2 * (fan_in * hidden + hidden * hidden + hidden)


@dataclass
class AdamState:
    """First/second moments plus step counts, per segment."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: dict[str, Any]  # int, or int array of per-row counts

    @classmethod
    def init(cls, params: ParamVector, per_row: bool = False) -> "AdamState":
        m = {k: np.zeros_like(a) for k, a in params.items()}
        v = {k: np.zeros_like(a) for k, a in params.items()}
        if per_row:
            step = {k: np.zeros(a.shape[0], dtype=np.int64) for k, a in params.items()}
        else:
            step = {k: 0 for k, _ in params.items()}
        return cls(m=m, v=v, step=step)


def adam_step(
    params: ParamVector,
    grads: dict[str, Array],
    state: AdamState,
    lr: float = 1e-2,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    rows: Array | None = None,
) -> None:
    """One Adam update in place; `rows` restricts the touched leading rows.

    Raises NumericalError before mutating anything if any gradient is
    non-finite, so a rejected step leaves parameters and moments intact.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for segment '{name}'; step rejected")
    for name, g in grads.items():
        p = params[name]
        if rows is None:
            state.step[name] += 1
            t = state.step[name]
            state.m[name] = b1 * state.m[name] + (1 - b1) * g
            state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
            m_hat = state.m[name] / (1 - b1**t)
            v_hat = state.v[name] / (1 - b2**t)
            params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            gr = g[rows]
            state.step[name][rows] += 1
            t = state.step[name][rows].reshape((-1,) + (1,) * (p.ndim - 1))
            state.m[name][rows] = b1 * state.m[name][rows] + (1 - b1) * gr
            state.v[name][rows] = b2 * state.v[name][rows] + (1 - b2) * gr * gr
            m_hat = state.m[name][rows] / (1 - b1**t)
            v_hat = state.v[name][rows] / (1 - b2**t)
            p[rows] = p[rows] - lr * m_hat / (np.sqrt(v_hat) + eps)
