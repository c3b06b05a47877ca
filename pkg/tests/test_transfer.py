"""Training-regime tests: pooled training, fine-tuning, meta-learning."""

import numpy as np
import pytest

from csitransfer import channel as ch
from csitransfer import net, optim, transfer
from csitransfer.net import Batch
from csitransfer.seeding import STREAM_BATCH, stream
from csitransfer.transfer import TrainConfig

RNG = np.random.default_rng


def tiny_cfg(**overrides):
    base = dict(
        k_s=12, k_t=4, k_b=3, u=5, n_tr=8, n_ad=8, n_te=8, v=16,
        g_tr=2, g_ad=20, max_steps=60, seed=0, hidden=(16,),
        gen=ch.GeneratorConfig(array=ch.ArrayConfig(m=4), users=5),
    )
    base.update(overrides)
    return TrainConfig(**base)


def identity_sources(m=2, n=64, seed=0):
    """A task whose labels equal its inputs (fittable by a linear net)."""
    rng = RNG(seed)
    xs = rng.normal(size=(n, 2 * m))
    pairs = [ch.SamplePair(x=x, y=x.copy(), f_up=1e9, f_down=1e9,
                           y_clean=x.copy(), user_index=0) for x in xs]
    return [ch.TaskDataset(env_id=0, role="train-support", pairs=pairs)]


def quadratic_batch(target):
    """Batch whose full-batch loss is (w - target)^2 + b^2 for a 1x1 linear net."""
    xs = np.array([[1.0], [-1.0]])
    ys = np.array([[target], [-target]])
    return Batch(xs, ys)


def scalar_net(w):
    return net.NetParams([np.array([[float(w)]])], [np.zeros(1)])


# ---------------------------------------------------------------------------
# config validation


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(k_b=20)  # k_b > k_s
    with pytest.raises(ValueError):
        tiny_cfg(gamma=0.0)
    with pytest.raises(ValueError):
        tiny_cfg(meta_mode="third-order")
    cfg = tiny_cfg(n_tr=9)
    assert cfg.n_support == 4 and cfg.n_query == 5


def test_gradient_order_accounting():
    cfg = tiny_cfg(g_tr=3)
    assert transfer.gradient_order("training", cfg) == 1
    assert transfer.gradient_order("meta-training", cfg) == 4
    assert transfer.gradient_order("meta-training", tiny_cfg(meta_mode="first-order")) == 1
    assert transfer.gradient_order("meta-training", tiny_cfg(g_tr=0)) == 1
    assert transfer.gradient_order("adaption", cfg) == 1
    assert transfer.gradient_order("testing", cfg) == 0


# ---------------------------------------------------------------------------
# no-transfer training


def test_no_transfer_fits_identity_task():
    sources = identity_sources()
    cfg = tiny_cfg(hidden=(), v=32, max_steps=2000, gamma=1e-2,
                   gen=ch.GeneratorConfig(array=ch.ArrayConfig(m=2), users=5))
    model = transfer.train_no_transfer(sources, cfg, stream(0, STREAM_BATCH))
    assert model.provenance == "no-transfer"
    assert model.loss_history[-1] < 1e-6
    assert model.derivative_order == 1


def test_no_transfer_zero_steps_returns_initialization():
    sources = identity_sources()
    cfg = tiny_cfg(hidden=(), v=16, max_steps=0,
                   gen=ch.GeneratorConfig(array=ch.ArrayConfig(m=2), users=5))
    model = transfer.train_no_transfer(sources, cfg, stream(0, STREAM_BATCH))
    init = transfer.init_network(cfg)
    assert len(model.loss_history) == 1
    assert np.array_equal(model.params.weights[0], init.weights[0])


def test_no_transfer_bit_identical_given_seed():
    sources = identity_sources()
    cfg = tiny_cfg(hidden=(8,), v=16, max_steps=40,
                   gen=ch.GeneratorConfig(array=ch.ArrayConfig(m=2), users=5))
    m1 = transfer.train_no_transfer(sources, cfg, stream(0, STREAM_BATCH))
    m2 = transfer.train_no_transfer(sources, cfg, stream(0, STREAM_BATCH))
    for a, b in zip(m1.params.weights, m2.params.weights):
        assert np.array_equal(a, b)
    assert m1.loss_history == m2.loss_history


def test_no_transfer_rejects_empty_or_small_pool():
    cfg = tiny_cfg(v=500)
    with pytest.raises(ValueError):
        transfer.train_no_transfer([], cfg, RNG(0))
    with pytest.raises(ValueError):
        transfer.train_no_transfer(identity_sources(n=10), cfg, RNG(0))
    cfg_ok = tiny_cfg(v=500, sample_with_replacement=True, max_steps=1,
                      gen=ch.GeneratorConfig(array=ch.ArrayConfig(m=2), users=5),
                      hidden=())
    transfer.train_no_transfer(identity_sources(n=10), cfg_ok, RNG(0))


# ---------------------------------------------------------------------------
# adaption stages


def _fitted_base(cfg, provenance="no-transfer"):
    params = transfer.init_network(cfg)
    return transfer.TrainedModel(params=params, provenance=provenance,
                                 config=None, loss_history=[1.0])


def _clean_target_sets(cfg, env_id=100, seed=5):
    env = ch.sample_environment(env_id, cfg.gen, seed)
    ad, te = ch.generate_task_datasets(
        env, [("adaption", cfg.n_ad), ("test", cfg.n_te)], cfg.u,
        (cfg.gen.f_min, cfg.gen.f_max), cfg.gen.delta_f, cfg.gen.array,
        ch.NoiseSpec(mode="clean"), RNG(seed))
    return ad, te


def test_direct_adapt_zero_steps_keeps_base():
    cfg = tiny_cfg(g_ad=0)
    base = _fitted_base(cfg)
    d_ad, _ = _clean_target_sets(cfg)
    out = transfer.direct_adapt(base, d_ad, cfg)
    assert out.provenance == "adapted"
    for a, b in zip(out.params.weights, base.params.weights):
        assert np.array_equal(a, b)


def test_gd_adaption_loss_monotone_for_small_rate():
    cfg = tiny_cfg(direct_adapt_rule="gd")
    base = _fitted_base(cfg)
    d_ad, _ = _clean_target_sets(cfg)
    beta = 1e-6
    for _ in range(6):  # safeguard halving
        out = transfer.direct_adapt(base, d_ad, tiny_cfg(direct_adapt_rule="gd",
                                                         beta=beta, g_ad=50))
        diffs = np.diff(out.loss_history)
        if np.all(diffs <= 1e-12):
            return
        beta /= 2
    pytest.fail("GD adaption loss not monotone even after halving the rate")


def test_adaption_always_starts_from_stage_output():
    cfg = tiny_cfg(g_ad=5)
    base = _fitted_base(cfg)
    ad1, _ = _clean_target_sets(cfg, env_id=100)
    ad2, _ = _clean_target_sets(cfg, env_id=101, seed=6)
    m1 = transfer.adapt_snapshots(base, ad1, cfg, "adam", [0, 5])
    m2 = transfer.adapt_snapshots(base, ad2, cfg, "adam", [0, 5])
    for a, b in zip(m1[0].params.weights, m2[0].params.weights):
        assert np.array_equal(a, b)  # both trajectories start at the base
    assert not np.array_equal(m1[5].params.weights[0], m2[5].params.weights[0])
    for a, b in zip(base.params.weights, m1[0].params.weights):
        assert np.array_equal(a, b)


def test_direct_adapt_requires_trained_base():
    cfg = tiny_cfg()
    adapted = _fitted_base(cfg, provenance="adapted")
    d_ad, _ = _clean_target_sets(cfg)
    with pytest.raises(ValueError):
        transfer.direct_adapt(adapted, d_ad, cfg)
    with pytest.raises(ValueError):
        transfer.meta_adapt(_fitted_base(cfg, "no-transfer"), d_ad, cfg)


def test_meta_adapt_equals_manual_gd_steps():
    cfg = tiny_cfg(g_ad=4, beta=1e-5)
    base = _fitted_base(cfg, provenance="meta")
    d_ad, _ = _clean_target_sets(cfg)
    out = transfer.meta_adapt(base, d_ad, cfg)
    params = base.params.copy()
    batch = Batch(d_ad.xs(), d_ad.ys())
    for _ in range(4):
        params = optim.gd_step(params, net.backward(params, batch), cfg.beta)
    for a, b in zip(out.params.weights, params.weights):
        assert np.array_equal(a, b)


def test_empty_adaption_set_rejected():
    cfg = tiny_cfg()
    base = _fitted_base(cfg)
    empty = Batch(np.empty((0, 8)), np.empty((0, 8)))
    with pytest.raises(ValueError):
        transfer.direct_adapt(base, empty, cfg)


# ---------------------------------------------------------------------------
# inner loop


def test_inner_adapt_zero_steps():
    omega = scalar_net(1.0)
    out, iterates = transfer.inner_adapt(omega, quadratic_batch(3.0), 0, 1e-2)
    assert iterates == []
    assert np.array_equal(out.weights[0], omega.weights[0])


def test_inner_adapt_quadratic_closed_form():
    w, a, beta = 1.5, 3.0, 0.01
    out, _ = transfer.inner_adapt(scalar_net(w), quadratic_batch(a), 1, beta)
    assert out.weights[0][0, 0] == pytest.approx(w - 2 * beta * (w - a), abs=1e-15)
    assert out.biases[0][0] == 0.0


def test_inner_adapt_matches_manual_composition():
    spec = net.LayerSpec.fnn(2, (6,))
    rng = RNG(0)
    omega = net.init_params(spec, rng)
    batch = Batch(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    out, iterates = transfer.inner_adapt(omega, batch, 3, 1e-3)
    manual = omega.copy()
    for _ in range(3):
        manual = optim.gd_step(manual, net.backward(manual, batch), 1e-3)
    assert len(iterates) == 3
    for a, b in zip(out.weights, manual.weights):
        assert np.array_equal(a, b)


def test_inner_adapt_empty_support_hard_error():
    omega = scalar_net(1.0)
    empty = Batch(np.empty((0, 1)), np.empty((0, 1)))
    with pytest.raises(ValueError):
        transfer.inner_adapt(omega, empty, 1, 1e-2)


# ---------------------------------------------------------------------------
# meta-gradient


def test_meta_gradient_no_inner_steps_is_query_gradient_sum():
    spec = net.LayerSpec.fnn(2, (6,))
    rng = RNG(1)
    omega = net.init_params(spec, rng)
    tasks = [(Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))),
              Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))))
             for _ in range(3)]
    expected = net.zeros_like_params(omega)
    for _, que in tasks:
        expected = net.params_axpy(1.0, net.backward(omega, que), expected)
    for mode in ("exact", "first-order"):
        got = transfer.meta_gradient(omega, tasks, 0, 1e-3, mode)
        assert np.allclose(got.weights[0], expected.weights[0], atol=0)
        assert np.allclose(got.biases[1], expected.biases[1], atol=0)


def test_meta_gradient_quadratic_toy_closed_forms():
    w, a, b, beta = 1.5, 3.0, -1.0, 0.01
    omega = scalar_net(w)
    tasks = [(quadratic_batch(a), quadratic_batch(b))]
    w_prime = w - 2 * beta * (w - a)
    exact = transfer.meta_gradient(omega, tasks, 1, beta, "exact")
    first = transfer.meta_gradient(omega, tasks, 1, beta, "first-order")
    assert exact.weights[0][0, 0] == pytest.approx(2 * (w_prime - b) * (1 - 2 * beta),
                                                   rel=1e-12)
    assert first.weights[0][0, 0] == pytest.approx(2 * (w_prime - b), rel=1e-12)


@pytest.mark.parametrize("g_tr", [1, 2, 3])
def test_meta_gradient_exact_matches_finite_differences(g_tr):
    spec = net.LayerSpec.fnn(2, (4, 8))
    rng = RNG(2 + g_tr)
    omega = net.init_params(spec, rng)
    tasks = [(Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))),
              Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))))
             for _ in range(2)]
    beta = 1e-3
    grad = transfer.meta_gradient(omega, tasks, g_tr, beta, "exact")

    def meta_loss(p):
        total = 0.0
        for sup, que in tasks:
            adapted, _ = transfer.inner_adapt(p, sup, g_tr, beta)
            total += net.mse_loss(adapted, que)
        return total

    # Central-difference step near the f64 optimum for loss values O(1);
    # smaller steps push roundoff above the 1e-5 tolerance.
    eps = 2e-5
    worst = 0.0
    for _ in range(50):
        li = int(rng.integers(0, len(omega.weights)))
        wm = omega.weights[li]
        idx = (int(rng.integers(0, wm.shape[0])), int(rng.integers(0, wm.shape[1])))
        p_plus, p_minus = omega.copy(), omega.copy()
        p_plus.weights[li][idx] += eps
        p_minus.weights[li][idx] -= eps
        fd = (meta_loss(p_plus) - meta_loss(p_minus)) / (2 * eps)
        an = grad.weights[li][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    assert worst < 1e-5


def test_first_order_approaches_exact_as_beta_vanishes():
    spec = net.LayerSpec.fnn(2, (4, 8))
    rng = RNG(9)
    omega = net.init_params(spec, rng)
    tasks = [(Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))),
              Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))))]

    def rel_gap(beta):
        exact = transfer.meta_gradient(omega, tasks, 1, beta, "exact")
        fo = transfer.meta_gradient(omega, tasks, 1, beta, "first-order")
        diff = net.params_map(lambda a, b: a - b, exact, fo)
        return net.params_norm(diff) / net.params_norm(exact)

    assert rel_gap(1e-8) < 0.05
    assert rel_gap(1e-3) > 1e-10  # the two modes genuinely differ here


# ---------------------------------------------------------------------------
# meta training


def test_meta_train_bit_identical_given_seed():
    cfg = tiny_cfg(max_steps=5)
    envs = [ch.sample_environment(i, cfg.gen, cfg.seed) for i in range(cfg.k_s)]
    m1 = transfer.meta_train(envs, cfg, stream(cfg.seed, STREAM_BATCH, 1))
    m2 = transfer.meta_train(envs, cfg, stream(cfg.seed, STREAM_BATCH, 1))
    for a, b in zip(m1.params.weights, m2.params.weights):
        assert np.array_equal(a, b)
    assert m1.loss_history == m2.loss_history
    assert m1.derivative_order == cfg.g_tr + 1


def test_meta_train_degenerate_is_query_adam():
    """k_b=1 with no inner steps reduces to Adam on the query losses."""
    cfg = tiny_cfg(k_b=1, g_tr=0, max_steps=4, fixed_task_data=True)
    envs = [ch.sample_environment(i, cfg.gen, cfg.seed) for i in range(cfg.k_s)]
    model = transfer.meta_train(envs, cfg, stream(cfg.seed, STREAM_BATCH, 1))

    # direct construction with the same streams
    rng = stream(cfg.seed, STREAM_BATCH, 1)
    params = transfer.init_network(cfg)
    state = optim.AdamState.init(params)
    cache = {}
    for _ in range(4):
        chosen = int(rng.choice(len(envs), size=1, replace=False)[0])
        env = envs[chosen]
        if env.id not in cache:
            cache[env.id] = transfer._support_query(env, cfg, 0)
        _, que = cache[env.id]
        grads = net.backward(params, Batch(que.xs(), que.ys()))
        params, state = optim.adam_step(state, params, grads, cfg.gamma)
    for a, b in zip(model.params.weights, params.weights):
        assert np.array_equal(a, b)


def test_meta_train_loss_decreases_on_small_run():
    cfg = tiny_cfg(k_s=30, k_b=5, g_tr=2, max_steps=400, n_tr=8,
                   convergence_window=1000)  # disable early stop
    envs = [ch.sample_environment(i, cfg.gen, cfg.seed) for i in range(cfg.k_s)]
    model = transfer.meta_train(envs, cfg, stream(cfg.seed, STREAM_BATCH, 1))
    h = model.loss_history
    assert len(h) == 400
    assert np.mean(h[-100:]) < np.mean(h[:100])


def test_meta_train_requires_enough_sources():
    cfg = tiny_cfg(k_b=3)
    envs = [ch.sample_environment(i, cfg.gen, cfg.seed) for i in range(2)]
    with pytest.raises(ValueError):
        transfer.meta_train(envs, cfg, RNG(0))


def test_support_query_disjoint():
    cfg = tiny_cfg()
    env = ch.sample_environment(0, cfg.gen, cfg.seed)
    sup, que = transfer._support_query(env, cfg, 0)
    assert len(sup) == cfg.n_support and len(que) == cfg.n_query
    assert not (sup.keys() & que.keys())
    # a later visit regenerates different data
    sup2, _ = transfer._support_query(env, cfg, 1)
    assert sup.keys() != sup2.keys()


# ---------------------------------------------------------------------------
# Taylor diagnostic


def test_taylor_residual_zero_beta():
    rng = RNG(11)
    spec = net.LayerSpec.fnn(2, (6,))
    omega = net.init_params(spec, rng)
    sup = Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    que = Batch(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    exact, approx, residual = transfer.taylor_residual(omega, sup, que, 0.0)
    assert residual == 0.0
    assert exact == approx


def test_taylor_residual_quadratic_closed_form():
    """For a linear net the loss is exactly quadratic, so the residual is the
    second-order term: beta^2 * (1/V) sum_v ||G x_v + g||^2 with (G, g) the
    support gradient."""
    rng = RNG(12)
    omega = net.NetParams([rng.normal(size=(3, 3))], [rng.normal(size=3)])
    sup = Batch(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    que = Batch(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
    beta = 0.01
    _, _, residual = transfer.taylor_residual(omega, sup, que, beta)
    g_sup = net.backward(omega, sup)
    expected = beta ** 2 * np.mean(
        np.sum((que.xs @ g_sup.weights[0].T + g_sup.biases[0]) ** 2, axis=1))
    assert residual == pytest.approx(expected, rel=1e-9)


def test_taylor_residual_quadratic_scaling():
    rng = RNG(13)
    spec = net.LayerSpec.fnn(2, (8, 8))
    omega = net.init_params(spec, rng)
    sup = Batch(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    que = Batch(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    beta = 1e-3
    _, _, r_full = transfer.taylor_residual(omega, sup, que, beta)
    _, _, r_half = transfer.taylor_residual(omega, sup, que, beta / 2)
    assert 0.15 <= r_half / r_full <= 0.35
