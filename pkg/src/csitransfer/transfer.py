"""The three training regimes for downlink channel prediction.

* classical training on the pooled source data (no transfer),
* fine-tuning that trained network per target environment (direct transfer),
* meta-learning an initialization through alternating inner-task
  gradient-descent updates and across-task Adam updates, adapted per target
  with plain gradient descent.

The meta-gradient is available in two modes: ``exact`` differentiates
through the unrolled inner loop (reverse accumulation with Hessian-vector
products at every recorded iterate), ``first-order`` treats the inner-loop
Jacobian as the identity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import net
from .channel import (
    ROLE_TRAIN_QUERY,
    ROLE_TRAIN_SUPPORT,
    Environment,
    GeneratorConfig,
    TaskDataset,
    generate_task_datasets,
)
from .net import Batch, NetParams, params_axpy
from .optim import AdamState, adam_step, gd_step
from .seeding import STREAM_BATCH, STREAM_NET_INIT, STREAM_TASK_DATA, stream

PROVENANCE_NO_TRANSFER = "no-transfer"
PROVENANCE_META = "meta"
PROVENANCE_ADAPTED = "adapted"

META_EXACT = "exact"
META_FIRST_ORDER = "first-order"

RULE_ADAM = "adam"
RULE_GD = "gd"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the three algorithms plus data-generation config.

    Field names follow the symbols the command-line flags use: ``gamma`` is
    the across-task/Adam rate, ``beta`` the inner-task/adaption rate,
    ``k_s``/``k_t``/``k_b`` the source/target/meta-batch task counts,
    ``g_tr``/``g_ad`` the inner-loop and adaption gradient-step counts,
    ``n_tr``/``n_ad``/``n_te`` per-task sample counts, ``u`` users per
    environment, ``v`` the training batch size.
    """

    gamma: float = 1e-3
    beta: float = 1e-6
    v: int = 128
    k_s: int = 1500
    k_t: int = 800
    k_b: int = 80
    g_tr: int = 3
    g_ad: int = 1000
    n_tr: int = 20
    n_ad: int = 20
    n_te: int = 20
    u: int = 25
    max_steps: int = 20000
    meta_mode: str = META_EXACT
    seed: int = 0
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    hidden: tuple[int, ...] = (128, 128)
    init_fan: str = "in"
    direct_adapt_rule: str = RULE_ADAM  # fine-tuning uses Adam
    meta_adapt_rule: str = RULE_GD      # meta-adaption uses plain GD
    fixed_task_data: bool = False       # regenerate support/query per visit when False
    sample_with_replacement: bool = False
    convergence_window: int = 200
    convergence_tol: float = 0.005
    track_grad_similarity: bool = False

    def __post_init__(self):
        for name in ("v", "k_s", "k_t", "k_b", "n_tr", "n_ad", "n_te", "u"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("g_tr", "g_ad", "max_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.k_b > self.k_s:
            raise ValueError(f"meta batch k_b={self.k_b} cannot exceed k_s={self.k_s}")
        if self.gamma <= 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.meta_mode not in (META_EXACT, META_FIRST_ORDER):
            raise ValueError(f"unknown meta mode {self.meta_mode!r}")
        for name in ("direct_adapt_rule", "meta_adapt_rule"):
            if getattr(self, name) not in (RULE_ADAM, RULE_GD):
                raise ValueError(f"{name} must be 'adam' or 'gd'")

    @property
    def n_support(self) -> int:
        """Support half of each source task's samples (equal split)."""
        return self.n_tr // 2

    @property
    def n_query(self) -> int:
        return self.n_tr - self.n_tr // 2

    def layer_spec(self) -> net.LayerSpec:
        return net.LayerSpec.fnn(self.gen.array.m, self.hidden)

    def snapshot(self) -> dict:
        """JSON-friendly copy of every field (for manifests and digests)."""
        d = asdict(self)
        d["gen"]["noise"]["pilot_len"] = int(d["gen"]["noise"]["pilot_len"])
        return d

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Reduced profile that runs the full three-way comparison in minutes."""
        from .channel import ArrayConfig  # local to avoid import noise at module top

        base = dict(
            k_s=200, k_t=50, u=10, max_steps=20000,
            gen=GeneratorConfig(array=ArrayConfig(m=16), users=10),
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainedModel:
    """Network parameters plus where they came from.

    ``derivative_order`` records the highest derivative order the producing
    stage actually computed (meta training in exact mode differentiates
    through ``g_tr`` gradient steps, hence order ``g_tr + 1``; every other
    training or adaption stage is first-order; testing is order zero).
    """

    params: NetParams
    provenance: str
    config: dict | None
    loss_history: list[float]
    derivative_order: int = 1
    grad_similarity: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not all(math.isfinite(x) for x in self.loss_history):
            raise ValueError("loss history contains non-finite values")


def gradient_order(stage: str, cfg: TrainConfig) -> int:
    """Highest derivative order each stage needs.

    ``training``: 1 for pooled training, ``g_tr + 1`` for exact-mode meta
    training (1 in first-order mode). ``adaption``: 1. ``testing``: 0.
    """
    if stage == "training":
        return 1
    if stage == "meta-training":
        if cfg.meta_mode == META_EXACT and cfg.g_tr > 0:
            return cfg.g_tr + 1
        return 1
    if stage == "adaption":
        return 1
    if stage == "testing":
        return 0
    raise ValueError(f"unknown stage {stage!r}")


def _as_batch(d) -> Batch:
    if isinstance(d, Batch):
        return d
    return Batch(d.xs(), d.ys())


def _converged(history: list[float], window: int, tol: float) -> bool:
    """Moving-average stopping rule: the last window improved on the
    previous one by less than ``tol`` (relative)."""
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window:-window]))
    cur = float(np.mean(history[-window:]))
    if prev <= 0:
        return True
    return (prev - cur) / prev < tol


def train_no_transfer(sources: Sequence[TaskDataset], cfg: TrainConfig,
                      rng: np.random.Generator) -> TrainedModel:
    """Classical training: pool every source pair, minibatch Adam until the
    loss converges or the step cap is reached.

    Initialization comes from the config's network-init substream; the
    passed generator drives batch selection only.
    """
    xs = np.concatenate([d.xs() for d in sources]) if sources else np.empty((0, 0))
    ys = np.concatenate([d.ys() for d in sources]) if sources else np.empty((0, 0))
    n_pool = xs.shape[0]
    if n_pool == 0:
        raise ValueError("source pool is empty")
    if n_pool < cfg.v and not cfg.sample_with_replacement:
        raise ValueError(
            f"pool of {n_pool} pairs cannot fill batches of {cfg.v} without replacement")

    params = init_network(cfg)
    history = [net.mse_loss(params, Batch(xs, ys))]
    state = AdamState.init(params)
    for _ in range(cfg.max_steps):
        idx = rng.choice(n_pool, size=cfg.v, replace=cfg.sample_with_replacement)
        loss, grads = net.loss_and_grad(params, Batch(xs[idx], ys[idx]))
        params, state = adam_step(state, params, grads, cfg.gamma)
        history.append(loss)
        if _converged(history[1:], cfg.convergence_window, cfg.convergence_tol):
            break
    return TrainedModel(params=params, provenance=PROVENANCE_NO_TRANSFER,
                        config=cfg.snapshot(), loss_history=history,
                        derivative_order=gradient_order("training", cfg))


def adapt_snapshots(base: TrainedModel, d_ad, cfg: TrainConfig, rule: str,
                    step_marks: Sequence[int]) -> dict[int, TrainedModel]:
    """Full-batch adaption capturing the parameters at selected step counts.

    The trajectory of a shorter adaption run is exactly the prefix of a
    longer one (both rules are deterministic), so one pass serves a whole
    grid of gradient-step budgets.
    """
    marks = sorted(set(int(g) for g in step_marks))
    if not marks or marks[0] < 0:
        raise ValueError(f"step marks must be nonnegative, got {step_marks}")
    batch = _as_batch(d_ad)
    if len(batch) == 0:
        raise ValueError("adaption set is empty")
    params = base.params.copy()
    # history[g] is the loss after g adaption steps.
    history: list[float] = []
    state = AdamState.init(params) if rule == RULE_ADAM else None
    out: dict[int, TrainedModel] = {}
    mark_set = set(marks)

    def snap(step):
        out[step] = TrainedModel(
            params=params.copy(), provenance=PROVENANCE_ADAPTED, config=base.config,
            loss_history=history[:step] + [net.mse_loss(params, batch)],
            derivative_order=gradient_order("adaption", cfg))

    if 0 in mark_set:
        snap(0)
    for step in range(1, marks[-1] + 1):
        loss, grads = net.loss_and_grad(params, batch)
        history.append(loss)
        if rule == RULE_ADAM:
            params, state = adam_step(state, params, grads, cfg.beta)
        else:
            params = gd_step(params, grads, cfg.beta)
        if step in mark_set:
            snap(step)
    return out


def _adapt(base: TrainedModel, d_ad, cfg: TrainConfig, rule: str,
           g_ad: int | None = None) -> TrainedModel:
    steps = cfg.g_ad if g_ad is None else g_ad
    return adapt_snapshots(base, d_ad, cfg, rule, [steps])[steps]


def direct_adapt(base: TrainedModel, d_ad, cfg: TrainConfig) -> TrainedModel:
    """Fine-tune a trained network on one target's adaption set.

    Always starts from the stage-output parameters, never from a previous
    target's adapted copy.
    """
    if base.provenance not in (PROVENANCE_NO_TRANSFER, PROVENANCE_META):
        raise ValueError(f"can only adapt a trained base model, got {base.provenance!r}")
    return _adapt(base, d_ad, cfg, cfg.direct_adapt_rule)


def meta_adapt(base: TrainedModel, d_ad, cfg: TrainConfig) -> TrainedModel:
    """Plain-GD adaption of the meta-trained initialization."""
    if base.provenance != PROVENANCE_META:
        raise ValueError(f"meta_adapt requires a meta-trained base, got {base.provenance!r}")
    return _adapt(base, d_ad, cfg, cfg.meta_adapt_rule)


def inner_adapt(omega: NetParams, d_sup, g_tr: int,
                beta: float) -> tuple[NetParams, list[NetParams]]:
    """Task-specific copy after ``g_tr`` full-batch gradient-descent steps.

    Returns the adapted parameters and the iterates the steps were taken
    from (needed to differentiate through the unrolled loop).
    """
    if g_tr < 0:
        raise ValueError("gradient step count must be nonnegative")
    batch = _as_batch(d_sup)
    if len(batch) == 0 and g_tr > 0:
        raise ValueError("support set is empty but inner updates were requested")
    params = omega.copy()
    iterates = []
    for _ in range(g_tr):
        iterates.append(params)
        grads = net.backward(params, batch)
        params = gd_step(params, grads, beta)
    return params, iterates


def _meta_batch_eval(omega: NetParams, batch_tasks, g_tr: int, beta: float,
                     mode: str) -> tuple[float, NetParams]:
    """Summed query loss of the adapted copies and its gradient wrt omega."""
    if not batch_tasks:
        raise ValueError("meta batch is empty")
    if mode not in (META_EXACT, META_FIRST_ORDER):
        raise ValueError(f"unknown meta mode {mode!r}")
    total_loss = 0.0
    total_grad = net.zeros_like_params(omega)
    for d_sup, d_que in batch_tasks:
        sup = _as_batch(d_sup)
        que = _as_batch(d_que)
        adapted, iterates = inner_adapt(omega, sup, g_tr, beta)
        loss, v = net.loss_and_grad(adapted, que)
        total_loss += loss
        if mode == META_EXACT:
            # Reverse accumulation through omega_{g+1} = omega_g - beta * grad_sup:
            # the transposed step Jacobian is I - beta * H_sup(omega_g).
            for iterate in reversed(iterates):
                hvp = net.forward_param_jvp(iterate, v, sup)
                v = params_axpy(-beta, hvp, v)
        total_grad = params_axpy(1.0, v, total_grad)
    return total_loss, total_grad


def meta_gradient(omega: NetParams, batch_tasks, g_tr: int, beta: float,
                  mode: str = META_EXACT) -> NetParams:
    """Gradient of the summed post-adaption query loss with respect to the
    shared initialization."""
    return _meta_batch_eval(omega, batch_tasks, g_tr, beta, mode)[1]


def _support_query(env: Environment, cfg: TrainConfig, visit: int) -> tuple[TaskDataset, TaskDataset]:
    rng = stream(env.seed, STREAM_TASK_DATA, visit)
    sup, que = generate_task_datasets(
        env,
        [(ROLE_TRAIN_SUPPORT, cfg.n_support), (ROLE_TRAIN_QUERY, cfg.n_query)],
        cfg.u, (cfg.gen.f_min, cfg.gen.f_max), cfg.gen.delta_f,
        cfg.gen.array, cfg.gen.noise, rng, cfg.gen.delay_max)
    return sup, que


def meta_train(source_envs: Sequence[Environment], cfg: TrainConfig,
               rng: np.random.Generator) -> TrainedModel:
    """Alternating inner-task and across-task updates until convergence.

    Each time step draws ``k_b`` tasks, regenerates their support/query
    sets (cached instead when ``fixed_task_data``), computes the meta
    gradient and applies one Adam step at rate ``gamma``. Initialization
    comes from the config's network-init substream; the passed generator
    drives task selection only.
    """
    if len(source_envs) < cfg.k_b:
        raise ValueError(f"need at least k_b={cfg.k_b} source environments, "
                         f"got {len(source_envs)}")
    params = init_network(cfg)
    state = AdamState.init(params)
    visits: dict[int, int] = {}
    cache: dict[int, tuple[TaskDataset, TaskDataset]] = {}
    history: list[float] = []
    similarity: list[float] = []
    for _ in range(cfg.max_steps):
        chosen = rng.choice(len(source_envs), size=cfg.k_b, replace=False)
        tasks = []
        for i in sorted(int(j) for j in chosen):
            env = source_envs[i]
            if cfg.fixed_task_data:
                if env.id not in cache:
                    cache[env.id] = _support_query(env, cfg, 0)
                sup, que = cache[env.id]
            else:
                visit = visits.get(env.id, 0)
                visits[env.id] = visit + 1
                sup, que = _support_query(env, cfg, visit)
            if sup.keys() & que.keys():
                raise AssertionError(
                    f"support/query overlap in environment {env.id}")
            tasks.append((sup, que))
        loss, grad = _meta_batch_eval(params, tasks, cfg.g_tr, cfg.beta, cfg.meta_mode)
        if cfg.track_grad_similarity:
            similarity.append(_batch_grad_cosine(params, tasks))
        params, state = adam_step(state, params, grad, cfg.gamma)
        history.append(loss)
        if _converged(history, cfg.convergence_window, cfg.convergence_tol):
            break
    return TrainedModel(params=params, provenance=PROVENANCE_META,
                        config=cfg.snapshot(), loss_history=history if history else [0.0],
                        derivative_order=gradient_order("meta-training", cfg),
                        grad_similarity=similarity)


def _batch_grad_cosine(omega: NetParams, tasks) -> float:
    """Mean cosine similarity between support and query gradients at omega."""
    sims = []
    for d_sup, d_que in tasks:
        gs = net.backward(omega, _as_batch(d_sup))
        gq = net.backward(omega, _as_batch(d_que))
        denom = net.params_norm(gs) * net.params_norm(gq)
        if denom > 0:
            sims.append(net.params_dot(gs, gq) / denom)
    return float(np.mean(sims)) if sims else 0.0


def taylor_residual(omega: NetParams, d_sup, d_que,
                    beta: float) -> tuple[float, float, float]:
    """How far the one-step meta objective is from its linearisation.

    exact  = L_que(omega - beta * grad L_sup(omega))
    approx = L_que(omega) - beta * <grad L_sup(omega), grad L_que(omega)>

    The gap shrinks quadratically in beta; its sign tracks the curvature of
    the query loss along the support gradient.
    """
    sup = _as_batch(d_sup)
    que = _as_batch(d_que)
    g_sup = net.backward(omega, sup)
    loss_que, g_que = net.loss_and_grad(omega, que)
    stepped = gd_step(omega, g_sup, beta) if beta > 0 else omega
    exact = net.mse_loss(stepped, que)
    approx = loss_que - beta * net.params_dot(g_sup, g_que)
    return exact, approx, abs(exact - approx)


def init_network(cfg: TrainConfig) -> NetParams:
    """Fresh parameters from the run's network-init substream."""
    return net.init_params(cfg.layer_spec(), stream(cfg.seed, STREAM_NET_INIT),
                           fan=cfg.init_fan)


def training_rng(cfg: TrainConfig) -> np.random.Generator:
    """Substream that drives init and batch selection during training."""
    return stream(cfg.seed, STREAM_BATCH)
