"""ELBO terms against closed forms, Monte Carlo, and a scipy re-assembly."""

import numpy as np
import pytest
from scipy import special, stats

from oracles import finite_difference_gradient, mc_kl_categorical, mc_kl_gaussian
from stfact import autodiff as ad
from stfact import elbo as el
from stfact import variational as vr
from stfact.data import MaskedTensor
from stfact.errors import NumericalError
from stfact.generative import ModelConfig, init_generative_params
from stfact.nn import GaussianParams
from stfact.rng import stream


def test_anneal_schedule_endpoints_and_midpoint():
    assert el.anneal_factor(0, 100) == pytest.approx(0.01)
    assert el.anneal_factor(50, 100) == pytest.approx(0.505)
    assert el.anneal_factor(100, 100) == 1.0
    assert el.anneal_factor(250, 100) == 1.0


# ---------------------------------------------------------------------------
# KL building blocks


def test_kl_gaussian_scalar_closed_form():
    """KL(N(m1,s1) || N(m2,s2)) = log(s2/s1) + (s1^2+(m1-m2)^2)/(2 s2^2) - 1/2."""
    m1, s1, m2, s2 = 0.3, 0.7, -1.1, 2.0
    q = GaussianParams(np.array([m1]), np.array([np.log(s1)]))
    p = GaussianParams(np.array([m2]), np.array([np.log(s2)]))
    got = el.kl_gaussian_diag(q, p).value
    expect = np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_kl_gaussian_unit_shift_is_half():
    q = GaussianParams(np.zeros(1), np.zeros(1))
    p = GaussianParams(np.ones(1), np.zeros(1))
    np.testing.assert_allclose(el.kl_gaussian_diag(q, p).value, 0.5, rtol=1e-15)


def test_kl_categorical_one_hot_vs_uniform_is_log4():
    q = np.array([0.0, 1.0, 0.0, 0.0])
    p = np.full(4, 0.25)
    np.testing.assert_allclose(el.kl_categorical(q, p), np.log(4.0), rtol=1e-12)


def test_kl_gaussian_zero_iff_equal_and_nonnegative():
    rng = stream(1, "kl")
    mean = rng.normal(size=(5, 3))
    ls = rng.normal(size=(5, 3))
    q = GaussianParams(mean, ls)
    same = el.kl_gaussian_diag(q, GaussianParams(mean.copy(), ls.copy())).value
    np.testing.assert_allclose(same, 0.0, atol=1e-14)
    other = GaussianParams(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    assert (el.kl_gaussian_diag(q, other).value > 0).all()


def test_kl_gaussian_matches_monte_carlo():
    q = GaussianParams(np.array([0.5, -0.2]), np.array([0.1, -0.4]))
    p = GaussianParams(np.array([0.0, 0.3]), np.array([-0.2, 0.2]))
    closed = float(el.kl_gaussian_diag(q, p).value)
    est, se = mc_kl_gaussian(
        q.mean, np.exp(q.log_scale), p.mean, np.exp(p.log_scale), 200_000, stream(2, "mc")
    )
    assert abs(closed - est) < 3 * se


def test_kl_gaussian_gradient_matches_fd():
    rng = stream(3, "g")
    x0 = rng.normal(size=8)

    def build(x):
        q = GaussianParams(ad.leaf(x[:2], "mq"), ad.leaf(x[2:4], "lq"))
        p = GaussianParams(ad.leaf(x[4:6], "mp"), ad.leaf(x[6:], "lp"))
        return q, p

    def f(x):
        q, p = build(x)
        return float(el.kl_gaussian_diag(q, p).value)

    q, p = build(x0)
    out = el.kl_gaussian_diag(q, p)
    ad.backward(out)
    grad = np.concatenate(
        [q.mean.grad, q.log_scale.grad, p.mean.grad, p.log_scale.grad]
    )
    fd = finite_difference_gradient(f, x0)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_kl_categorical_paths_agree_and_handle_zero():
    q = np.array([0.5, 0.5, 0.0])
    p = np.array([0.25, 0.25, 0.5])
    plain = el.kl_categorical(q, p)
    expect = 2 * 0.5 * np.log(0.5 / 0.25)
    np.testing.assert_allclose(plain, expect, rtol=1e-12)
    assert np.isfinite(plain)
    qg = np.array([0.3, 0.6, 0.1])
    graph = el.kl_categorical(ad.leaf(qg, "q"), p)
    np.testing.assert_allclose(graph.value, el.kl_categorical(qg, p), rtol=1e-12)
    assert el.kl_categorical(p, p) == 0.0


def test_kl_categorical_matches_monte_carlo():
    q = np.array([0.2, 0.5, 0.3])
    p = np.array([0.4, 0.4, 0.2])
    est, se = mc_kl_categorical(q, p, 200_000, stream(4, "mc"))
    assert abs(el.kl_categorical(q, p) - est) < 3 * se


# ---------------------------------------------------------------------------
# full objective


def matched_prior_setup(n=3, t=4, d=2, k=2):
    """Model + store where every q equals its prior, so all KLs vanish."""
    config = ModelConfig(
        k=k,
        d_z=2,
        s=1,
        factor_head="fixed",
        fixed_factors=stream(7, "f").normal(size=(k, d)),
        d_obs=d,
        transition_form="linear",
        emission_form="linear",
    )
    data = MaskedTensor(stream(7, "y").normal(size=(n, t, d)), np.ones((n, t, d), bool))
    theta = init_generative_params(config, stream(7, "theta"))
    theta["prior.mean"] = np.zeros((1, 2))
    theta["prior.logscale"] = np.zeros((1, 2))
    theta["trans.lin.w"] = np.zeros((2, 2))
    theta["trans.lin.b"] = np.zeros(2)
    theta["trans.logscale"] = np.zeros(2)
    theta["emitw.w"] = np.zeros((2, k))
    theta["emitw.b"] = np.zeros(k)
    theta["emitw.logscale"] = np.zeros(k)
    store = vr.init_store(data, config, stream(7, "store"))
    store.lam["lam.w_mean"] = np.zeros((n, t, k))
    store.lam["lam.w_logscale"] = np.zeros((n, t, k))
    store.lam["lam.z0_mean"] = np.zeros((n, 2))
    store.lam["lam.z0_logscale"] = np.zeros((n, 2))
    for name in store.phi.names():
        if name.startswith("comb."):
            store.phi[name] = np.zeros_like(store.phi[name])
    return config, data, theta, store


def run_elbo(data, store, theta, idx, noise, beta, **kw):
    return el.elbo_batch(
        data, store, theta.leaves(), store.lam.leaves(), store.phi.leaves(),
        idx, noise, beta, **kw
    )


def test_prior_matched_posterior_reduces_to_reconstruction():
    config, data, theta, store = matched_prior_setup()
    idx = np.arange(data.n)
    noise = vr.make_noise(store, idx, stream(8, "noise"))
    total, bd = run_elbo(data, store, theta, idx, noise, beta=0.7)
    assert bd.l_h == 0.0
    np.testing.assert_allclose([bd.l_c, bd.l_zw, bd.l_w], 0.0, atol=1e-12)
    np.testing.assert_allclose(bd.total, bd.l_rec, rtol=1e-12)


def test_beta_scales_kl_block_linearly():
    config, data, theta, store = matched_prior_setup()
    # perturb so the KLs are nonzero
    theta["trans.lin.b"] = np.full(2, 0.3)
    theta["emitw.b"] = np.full(2, -0.2)
    idx = np.arange(data.n)
    noise = vr.make_noise(store, idx, stream(9, "noise"))
    _, bd1 = run_elbo(data, store, theta, idx, noise, beta=0.01)
    _, bd2 = run_elbo(data, store, theta, idx, noise, beta=1.0)
    assert bd1.l_rec == bd2.l_rec
    kl1 = bd1.total - bd1.l_rec
    kl2 = bd2.total - bd2.l_rec
    np.testing.assert_allclose(kl1, 0.01 * kl2, rtol=1e-9)
    assert kl2 < 0  # KLs enter with negative sign


def tiny_model(seed=11, n=3, t=2, d=2, s=2):
    config = ModelConfig(
        k=1,
        d_z=1,
        d_t=2,
        d_e=2,
        s=s,
        variant="b",
        factor_head="fixed",
        fixed_factors=stream(seed, "f").normal(size=(1, d)),
        d_obs=d,
        transition_form="linear",
        emission_form="linear",
    )
    mask = stream(seed, "mask").random(size=(n, t, d)) > 0.3
    mask[0, 0, 0] = True
    values = stream(seed, "y").normal(size=(n, t, d))
    data = MaskedTensor(values, mask)
    theta = init_generative_params(config, stream(seed, "theta"))
    store = vr.init_store(data, config, stream(seed, "store"))
    return config, data, theta, store


def scipy_kl_gauss(mq, lq, mp, lp):
    mq, lq, mp, lp = map(np.asarray, (mq, lq, mp, lp))
    return np.sum(
        (lp - lq) + (np.exp(2 * (lq - lp)) + (mq - mp) ** 2 * np.exp(-2 * lp)) / 2 - 0.5,
        axis=-1,
    )


def reference_breakdown(config, data, theta, store, idx, noise, beta):
    """Re-assemble the bound with plain numpy/scipy from the same draw."""
    sample = vr.sample_batch(
        idx, store, theta.leaves(), store.lam.leaves(), store.phi.leaves(), noise
    )
    w = sample.w.value
    z0 = sample.z0.value
    z = [zt.value for zt in sample.z]
    factors = config.fixed_factors

    pred = w @ factors
    resid = np.where(data.mask[idx], data.values[idx] - pred, 0.0)
    n_obs = data.mask[idx].sum()
    l_rec = float(
        -0.5 * np.sum(resid**2) / config.sigma_y**2
        - n_obs * (np.log(config.sigma_y) + 0.5 * np.log(2 * np.pi))
    )

    log_pi = theta["prior.logits"] - special.logsumexp(theta["prior.logits"])
    comp = np.stack(
        [
            stats.norm.logpdf(
                z0, loc=theta["prior.mean"][s_], scale=np.exp(theta["prior.logscale"][s_])
            ).sum(-1)
            for s_ in range(config.s)
        ],
        axis=-1,
    )
    scores = comp + log_pi
    log_qc = scores - special.logsumexp(scores, axis=-1, keepdims=True)
    qc = np.exp(log_qc)
    kl_c = (qc * (log_qc - log_pi)).sum(-1)
    kl_z0 = np.stack(
        [
            scipy_kl_gauss(
                sample.z0_q.mean.value,
                sample.z0_q.log_scale.value,
                theta["prior.mean"][s_],
                theta["prior.logscale"][s_],
            )
            for s_ in range(config.s)
        ],
        axis=-1,
    )
    l_c = float(-(kl_c + (qc * kl_z0).sum(-1)).sum())

    l_zw = 0.0
    z_prev = z0
    for t in range(data.t):
        p_mean = z_prev @ theta["trans.lin.w"] + theta["trans.lin.b"]
        q_t = sample.z_q[t]
        l_zw -= scipy_kl_gauss(
            q_t.mean.value, q_t.log_scale.value, p_mean, theta["trans.logscale"]
        ).sum()
        z_prev = z[t]

    l_w = 0.0
    for t in range(data.t):
        p_mean = z[t] @ theta["emitw.w"] + theta["emitw.b"]
        l_w -= scipy_kl_gauss(
            sample.w_q.mean.value[:, t],
            sample.w_q.log_scale.value[:, t],
            p_mean,
            theta["emitw.logscale"],
        ).sum()

    total = l_rec + beta * (l_c + l_zw + l_w)
    return l_rec, l_c, float(l_zw), float(l_w), total


def test_breakdown_matches_scipy_reassembly():
    config, data, theta, store = tiny_model()
    idx = np.arange(data.n)
    noise = vr.make_noise(store, idx, stream(12, "noise"))
    beta = 0.37
    _, bd = run_elbo(data, store, theta, idx, noise, beta)
    l_rec, l_c, l_zw, l_w, total = reference_breakdown(
        config, data, theta, store, idx, noise, beta
    )
    np.testing.assert_allclose(bd.l_rec, l_rec, rtol=1e-9)
    np.testing.assert_allclose(bd.l_c, l_c, rtol=1e-9)
    np.testing.assert_allclose(bd.l_zw, l_zw, rtol=1e-9)
    np.testing.assert_allclose(bd.l_w, l_w, rtol=1e-9)
    np.testing.assert_allclose(bd.total, total, rtol=1e-9)
    np.testing.assert_allclose(bd.l_h, 0.0)


def test_elbo_gradient_matches_fd_on_miniature():
    """Whole-objective gradient against central differences, all leaves."""
    config = ModelConfig(
        k=1, d_z=1, d_t=1, d_e=1, s=1,
        factor_head="fixed", fixed_factors=np.array([[1.0]]), d_obs=1,
    )
    data = MaskedTensor(
        stream(13, "y").normal(size=(2, 1, 1)), np.ones((2, 1, 1), bool)
    )
    theta = init_generative_params(config, stream(13, "theta"))
    store = vr.init_store(data, config, stream(13, "store"))
    names = list(theta.names()) + list(store.lam.names()) + list(store.phi.names())
    sizes = {}
    for pv in (theta, store.lam, store.phi):
        for name in pv.names():
            sizes[name] = pv[name].size
    total_params = sum(sizes.values())
    assert total_params <= 50

    idx = np.arange(2)
    noise = vr.make_noise(store, idx, stream(13, "noise"))

    def unpack(x):
        th, st = theta.copy(), store.copy()
        pos = 0
        for name in names:
            holder = th if name in th.names() else (st.lam if name in st.lam.names() else st.phi)
            shape = holder[name].shape
            holder[name] = x[pos : pos + sizes[name]].reshape(shape)
            pos += sizes[name]
        return th, st

    def f(x):
        th, st = unpack(x)
        total, _ = run_elbo(data, st, th, idx, noise, beta=0.9)
        return float(total.value)

    x0 = np.concatenate(
        [theta.flat(), store.lam.flat(), store.phi.flat()]
    )
    th, st = unpack(x0)
    leaves = {}
    leaves.update(th.leaves())
    leaves.update(st.lam.leaves())
    leaves.update(st.phi.leaves())
    total, _ = el.elbo_batch(
        data, st, {k: leaves[k] for k in th.names()},
        {k: leaves[k] for k in st.lam.names()},
        {k: leaves[k] for k in st.phi.names()},
        idx, noise, 0.9,
    )
    grads = ad.grad(total, leaves)
    flat_grad = np.concatenate([grads[n].reshape(-1) for n in names])
    fd = finite_difference_gradient(f, x0)
    denom = max(np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(flat_grad - fd) / denom < 1e-4


def test_same_noise_gives_identical_gradients():
    """Exact cluster marginalization: no residual sampling noise in c."""
    config, data, theta, store = tiny_model(seed=14)
    idx = np.arange(data.n)
    noise = vr.make_noise(store, idx, stream(14, "noise"))

    def grads_once():
        leaves = {}
        leaves.update(theta.leaves())
        leaves.update(store.lam.leaves())
        leaves.update(store.phi.leaves())
        total, _ = el.elbo_batch(
            data, store, {k: leaves[k] for k in theta.names()},
            {k: leaves[k] for k in store.lam.names()},
            {k: leaves[k] for k in store.phi.names()},
            idx, noise, 0.5,
        )
        return ad.grad(total, leaves)

    g1, g2 = grads_once(), grads_once()
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_instance_sum_matches_full_batch_for_shared_factors():
    config = ModelConfig(k=2, d_z=2, s=1, variant="a", factor_head="rbf")
    data = MaskedTensor(
        stream(15, "y").normal(size=(4, 3, 27)), np.ones((4, 3, 27), bool)
    )
    from stfact.data import VoxelGrid

    grid = VoxelGrid.lattice(3, -3.0, 3.0)
    theta = init_generative_params(config, stream(15, "theta"))
    store = vr.init_store(data, config, stream(15, "store"), grid=grid)
    idx = np.arange(4)
    noise = vr.make_noise(store, idx, None, zero=True)
    total, bd = run_elbo(data, store, theta, idx, noise, beta=0.8, grid=grid)
    parts = [
        el.elbo_instance(n, theta, store, data, beta=0.8, grid=grid)[1] for n in range(4)
    ]
    np.testing.assert_allclose(sum(p.total for p in parts), bd.total, rtol=1e-9)
    np.testing.assert_allclose(sum(p.l_h for p in parts), bd.l_h, rtol=1e-9)


def test_non_finite_term_is_named():
    config, data, theta, store = tiny_model(seed=16)
    store.lam["lam.w_mean"][0, 0, 0] = np.inf
    idx = np.arange(data.n)
    noise = vr.make_noise(store, idx, None, zero=True)
    with np.errstate(all="ignore"):
        with pytest.raises(NumericalError, match="l_rec"):
            run_elbo(data, store, theta, idx, noise, beta=0.5)
