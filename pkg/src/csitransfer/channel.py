"""Synthetic multipath channel simulator and task-dataset generation.

A user's propagation state is a finite set of rays, each with a direction
of arrival inside the environment's angle spread, an attenuation amplitude,
a phase shift, and a delay. Uplink and downlink channels at any carrier
frequency follow deterministically from the same rays, which is what makes
the uplink-to-downlink regression problem well posed: a sample pair is the
real-stacked channel at ``f_up`` and at ``f_up + delta_f``.

Noisy data collection is modelled as an additive complex Gaussian
observation (pilot processing gain folded into the noise variance) followed
by an optional LMMSE estimate against the environment's channel covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .seeding import STREAM_COVARIANCE, STREAM_ENV, seed_for, stream

SPEED_OF_LIGHT = 299_792_458.0

# Half wavelength at 2 GHz; the physical array spacing is fixed across
# carrier frequencies.
DEFAULT_SPACING = SPEED_OF_LIGHT / (2 * 2.0e9)

# Largest excess path delay in seconds. Small enough that the per-ray
# downlink rotation 2*pi*delta_f*tau stays below one cycle at the default
# 120 MHz offset (otherwise uplink and downlink decorrelate completely and
# no predictor can do better than outputting zero), yet large enough that
# the channel keeps wrapping in phase as f sweeps 1..3 GHz.
DEFAULT_DELAY_MAX = 2.0e-9

# Per-entry RMS channel amplitude the default ray statistics are normalised
# to. The absolute scale is arbitrary physically; it is chosen so that
# plain gradient-descent adaption at the stock learning rates makes visible
# progress on desk-scale runs (loss curvature grows with the square of this
# number while Adam's effective step does not depend on it).
DEFAULT_ENTRY_AMPLITUDE = 30.0

ROLE_TRAIN_SUPPORT = "train-support"
ROLE_TRAIN_QUERY = "train-query"
ROLE_ADAPTION = "adaption"
ROLE_TEST = "test"
ROLES = (ROLE_TRAIN_SUPPORT, ROLE_TRAIN_QUERY, ROLE_ADAPTION, ROLE_TEST)

NOISE_CLEAN = "clean"
NOISE_AWGN = "awgn"
NOISE_LMMSE = "lmmse"
NOISE_MODES = (NOISE_CLEAN, NOISE_AWGN, NOISE_LMMSE)


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array at the base station."""

    m: int = 64
    d: float = DEFAULT_SPACING
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"antenna count must be >= 1, got {self.m}")
        if not (self.d > 0 and math.isfinite(self.d)):
            raise ValueError(f"antenna spacing must be positive, got {self.d}")


@dataclass(frozen=True)
class Environment:
    """One propagation region: a bounded angle-spread interval plus ray statistics."""

    id: int
    as_lower: float
    as_upper: float
    ray_count: int
    amplitude_scale: float
    seed: int

    def __post_init__(self):
        if not (-math.pi / 2 <= self.as_lower < self.as_upper <= math.pi / 2):
            raise ValueError(
                f"angle spread bounds must satisfy -pi/2 <= lower < upper <= pi/2, "
                f"got [{self.as_lower}, {self.as_upper}]")
        if self.ray_count < 1:
            raise ValueError(f"ray count must be >= 1, got {self.ray_count}")
        if self.amplitude_scale < 0:
            raise ValueError("amplitude scale must be nonnegative")


@dataclass(frozen=True)
class UserRays:
    """Discretized propagation state of one user: equal-length ray arrays."""

    env_id: int
    doas: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    delays: np.ndarray

    def __post_init__(self):
        n = len(self.doas)
        if not (len(self.amplitudes) == len(self.phases) == len(self.delays) == n):
            raise ValueError("ray arrays must have equal length")


@dataclass(frozen=True)
class NoiseSpec:
    """How sample pairs are collected: clean, raw noisy, or LMMSE-estimated."""

    snr_db: float = 20.0
    pilot_len: int = 64
    mode: str = NOISE_LMMSE

    def __post_init__(self):
        if self.pilot_len < 1:
            raise ValueError(f"pilot length must be >= 1, got {self.pilot_len}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}, expected one of {NOISE_MODES}")


CLEAN_SPEC = NoiseSpec(mode=NOISE_CLEAN)


@dataclass(frozen=True)
class SamplePair:
    """One (uplink, downlink) training pair in real-stacked form.

    ``y_clean`` keeps the noiseless downlink label so that prediction error
    can always be measured against ground truth, whatever the collection
    noise was. ``user_index`` identifies which of the drawn users produced
    the pair (used to enforce disjointness between dataset roles).
    """

    x: np.ndarray
    y: np.ndarray
    f_up: float
    f_down: float
    y_clean: np.ndarray
    user_index: int

    def key(self) -> tuple[int, float]:
        return (self.user_index, self.f_up)


@dataclass
class TaskDataset:
    """Sample pairs of one environment under one role tag."""

    env_id: int
    role: str
    pairs: list[SamplePair]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")

    def __len__(self) -> int:
        return len(self.pairs)

    def xs(self) -> np.ndarray:
        return np.array([p.x for p in self.pairs])

    def ys(self) -> np.ndarray:
        return np.array([p.y for p in self.pairs])

    def clean_downlinks(self) -> list[np.ndarray]:
        return [real_to_complex(p.y_clean) for p in self.pairs]

    def keys(self) -> set[tuple[int, float]]:
        return {p.key() for p in self.pairs}


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything needed to synthesise environments and their datasets."""

    array: ArrayConfig = field(default_factory=ArrayConfig)
    ray_count: int = 25
    as_width_min: float = 0.05
    as_width_max: float = 0.2
    amplitude_scale: float | None = None  # None: normalise per-entry power
    delay_max: float = DEFAULT_DELAY_MAX
    f_min: float = 1.0e9
    f_max: float = 3.0e9
    delta_f: float = 120.0e6
    users: int = 25
    noise: NoiseSpec = CLEAN_SPEC

    def __post_init__(self):
        if self.ray_count < 1:
            raise ValueError("ray count must be >= 1")
        if not (0 < self.as_width_min <= self.as_width_max <= math.pi):
            raise ValueError(
                f"invalid angle-spread width range [{self.as_width_min}, {self.as_width_max}]")
        if not (0 < self.f_min <= self.f_max):
            raise ValueError("frequency range must satisfy 0 < f_min <= f_max")
        if self.f_min + self.delta_f <= 0:
            raise ValueError("downlink frequency must stay positive")
        if self.delay_max < 0:
            raise ValueError("delay_max must be nonnegative")
        if self.users < 1:
            raise ValueError("users per environment must be >= 1")

    def resolved_amplitude_scale(self) -> float:
        """Rayleigh scale per ray; defaults to unit-normalised entry power.

        With P rays of Rayleigh(sigma) amplitude and uniform phases the
        expected squared magnitude of one channel entry is 2*sigma^2*P, so
        sigma = A/sqrt(2P) gives per-entry RMS amplitude A.
        """
        if self.amplitude_scale is not None:
            return self.amplitude_scale
        return DEFAULT_ENTRY_AMPLITUDE / math.sqrt(2.0 * self.ray_count)


def array_manifold(theta: float, f: float, cfg: ArrayConfig) -> np.ndarray:
    """Steering vector of the ULA toward direction ``theta`` at carrier ``f``.

    Entry m equals exp(-j * (2 pi d f / c) * m * sin theta); entry 0 is 1.
    """
    if not math.isfinite(theta):
        raise ValueError(f"direction of arrival must be finite, got {theta}")
    if not (f > 0 and math.isfinite(f)):
        raise ValueError(f"carrier frequency must be positive, got {f}")
    varpi = 2.0 * math.pi * cfg.d * f / cfg.c
    m = np.arange(cfg.m)
    return np.exp(-1j * varpi * m * math.sin(theta))


def sample_environment(env_id: int, gcfg: GeneratorConfig, master_seed: int) -> Environment:
    """Draw one environment, deterministically from (env_id, master_seed).

    The angle-spread width is uniform in the configured range and the
    interval centre is uniform over the positions where the interval still
    fits inside [-pi/2, pi/2].
    """
    if gcfg.as_width_min > gcfg.as_width_max:
        raise ValueError("empty angle-spread width range")
    rng = stream(master_seed, STREAM_ENV, env_id)
    width = rng.uniform(gcfg.as_width_min, gcfg.as_width_max)
    half = width / 2.0
    center = rng.uniform(-math.pi / 2 + half, math.pi / 2 - half)
    return Environment(
        id=env_id,
        as_lower=center - half,
        as_upper=center + half,
        ray_count=gcfg.ray_count,
        amplitude_scale=gcfg.resolved_amplitude_scale(),
        seed=seed_for(master_seed, STREAM_ENV, env_id),
    )


def sample_user(env: Environment, rng: np.random.Generator,
                delay_max: float = DEFAULT_DELAY_MAX) -> UserRays:
    """Draw one user's rays inside the environment's angle spread.

    Directions are uniform over the spread, amplitudes Rayleigh with the
    environment's scale, phases uniform on [0, 2 pi), delays uniform on
    [0, delay_max].
    """
    p = env.ray_count
    return UserRays(
        env_id=env.id,
        doas=rng.uniform(env.as_lower, env.as_upper, size=p),
        amplitudes=env.amplitude_scale * rng.rayleigh(1.0, size=p),
        phases=rng.uniform(0.0, 2.0 * math.pi, size=p),
        delays=rng.uniform(0.0, delay_max, size=p),
    )


def channel_response(user: UserRays, f: float, cfg: ArrayConfig) -> np.ndarray:
    """Channel vector at carrier ``f``: the ray sum over the array manifold.

    h(f) = sum_p |alpha_p| * exp(-j 2 pi f tau_p + j phi_p) * a(theta_p)
    """
    if not (f > 0 and math.isfinite(f)):
        raise ValueError(f"carrier frequency must be positive, got {f}")
    gains = user.amplitudes * np.exp(1j * (user.phases - 2.0 * math.pi * f * user.delays))
    varpi = 2.0 * math.pi * cfg.d * f / cfg.c
    # (P, M) manifold matrix; row p is the steering vector of ray p.
    manifold = np.exp(-1j * varpi * np.outer(np.sin(user.doas), np.arange(cfg.m)))
    return gains @ manifold


def complex_to_real(z: np.ndarray) -> np.ndarray:
    """Real-stacked image of a complex vector: [Re(z); Im(z)]."""
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag]).astype(np.float64)


def real_to_complex(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`complex_to_real`."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] % 2 != 0:
        raise ValueError(f"real-stacked vector must have even length, got {v.shape[-1]}")
    m = v.shape[-1] // 2
    return v[..., :m] + 1j * v[..., m:]


def noise_variance(h: np.ndarray, snr_db: float, pilot_len: int) -> float:
    """Per-entry complex noise variance for a given observation SNR.

    The pilot length divides the variance, modelling coherent processing
    gain over the pilot sequence.
    """
    if pilot_len < 1:
        raise ValueError(f"pilot length must be >= 1, got {pilot_len}")
    m = h.shape[-1]
    signal_power = float(np.vdot(h, h).real) / m
    return signal_power / (10.0 ** (snr_db / 10.0) * pilot_len)


def add_awgn(h: np.ndarray, snr_db: float, pilot_len: int,
             rng: np.random.Generator) -> np.ndarray:
    """Observation h + n with circular complex Gaussian n."""
    sigma2 = noise_variance(h, snr_db, pilot_len)
    scale = math.sqrt(sigma2 / 2.0)
    n = rng.normal(0.0, 1.0, size=h.shape) + 1j * rng.normal(0.0, 1.0, size=h.shape)
    return h + scale * n


def lmmse_estimate(y: np.ndarray, r: np.ndarray, sigma2: float) -> np.ndarray:
    """LMMSE channel estimate R (R + sigma^2 I)^-1 y.

    ``r`` must be Hermitian (checked to 1e-9 absolute asymmetry). For
    sigma2 = 0 the estimate is the observation itself.
    """
    r = np.asarray(r)
    if r.ndim != 2 or r.shape[0] != r.shape[1] or r.shape[0] != y.shape[-1]:
        raise ValueError(f"covariance shape {r.shape} does not match observation "
                         f"length {y.shape[-1]}")
    if sigma2 < 0:
        raise ValueError("noise variance must be nonnegative")
    asym = float(np.max(np.abs(r - r.conj().T)))
    if asym > 1e-9:
        raise ValueError(f"covariance is not Hermitian (max asymmetry {asym:.3e})")
    if sigma2 == 0.0:
        return np.array(y, copy=True)
    a = r + sigma2 * np.eye(r.shape[0])
    return r @ np.linalg.solve(a, y)


class EnvCovariance:
    """Regularised sample covariance of clean channels for one environment.

    Built once per environment from a fixed pool of users drawn from the
    environment's own seed, so the LMMSE prior does not depend on which
    dataset is being generated. The covariance depends on the carrier, so
    it is computed per frequency on demand.
    """

    def __init__(self, env: Environment, cfg: ArrayConfig, n_samples: int = 200,
                 delay_max: float = DEFAULT_DELAY_MAX, ridge: float = 1e-6):
        rng = stream(env.seed, STREAM_COVARIANCE)
        self._users = [sample_user(env, rng, delay_max) for _ in range(n_samples)]
        self._cfg = cfg
        self._ridge = ridge

    def at(self, f: float) -> np.ndarray:
        h = np.array([channel_response(u, f, self._cfg) for u in self._users])
        n, m = h.shape
        r = h.T @ h.conj() / n
        return r + self._ridge * (np.trace(r).real / m) * np.eye(m)


def _estimate(h: np.ndarray, f: float, noise: NoiseSpec,
              rng: np.random.Generator, cov: EnvCovariance | None) -> np.ndarray:
    if noise.mode == NOISE_CLEAN:
        return h
    y = add_awgn(h, noise.snr_db, noise.pilot_len, rng)
    if noise.mode == NOISE_AWGN:
        return y
    if cov is None:
        raise ValueError("LMMSE noise mode requires an environment covariance model")
    sigma2 = noise_variance(h, noise.snr_db, noise.pilot_len)
    return lmmse_estimate(y, cov.at(f), sigma2)


def make_sample_pair(user: UserRays, f_up: float, delta_f: float, cfg: ArrayConfig,
                     noise: NoiseSpec, rng: np.random.Generator,
                     cov: EnvCovariance | None = None,
                     user_index: int = 0) -> SamplePair:
    """Collect one (uplink, downlink) pair at ``f_up`` and ``f_up + delta_f``.

    Both links go through the same estimation pipeline with independent
    noise draws; the clean downlink is kept alongside as the ground-truth
    label.
    """
    f_down = f_up + delta_f
    if not (f_up > 0 and f_down > 0):
        raise ValueError(f"frequencies must be positive, got f_up={f_up}, f_down={f_down}")
    h_up = channel_response(user, f_up, cfg)
    h_down = channel_response(user, f_down, cfg)
    return SamplePair(
        x=complex_to_real(_estimate(h_up, f_up, noise, rng, cov)),
        y=complex_to_real(_estimate(h_down, f_down, noise, rng, cov)),
        f_up=f_up,
        f_down=f_down,
        y_clean=complex_to_real(h_down),
        user_index=user_index,
    )


@dataclass
class ComboSet:
    """A user pool and per-role (user, uplink frequency) assignments.

    Drawing combinations is separated from collecting the samples so that
    the same combinations can be re-collected under different noise
    specifications (the SNR sweep does exactly that), keeping role
    disjointness intact.
    """

    env: Environment
    users: list[UserRays]
    by_role: dict[str, list[tuple[int, float]]]


def draw_combos(env: Environment, role_counts: Sequence[tuple[str, int]], u: int,
                f_range: tuple[float, float], rng: np.random.Generator,
                delay_max: float = DEFAULT_DELAY_MAX) -> ComboSet:
    """Draw ``u`` users once, then disjoint per-role combination lists.

    A combination whose key is already taken by another role is redrawn;
    repeats within one role are allowed (they only occur for degenerate
    frequency ranges). If the environment cannot supply enough distinct
    keys for the requested disjoint roles, this is an error rather than a
    silent overlap.
    """
    if u < 1:
        raise ValueError("user count must be >= 1")
    seen_roles = set()
    for role, n in role_counts:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if role in seen_roles:
            raise ValueError(f"role {role!r} requested twice")
        seen_roles.add(role)
        if n < 1:
            raise ValueError(f"pair count for role {role!r} must be >= 1, got {n}")
    f_lo, f_hi = f_range
    if not (0 < f_lo <= f_hi):
        raise ValueError(f"invalid frequency range [{f_lo}, {f_hi}]")

    users = [sample_user(env, rng, delay_max) for _ in range(u)]
    total = sum(n for _, n in role_counts)
    max_attempts = 1000 * total
    attempts = 0
    taken: set[tuple[int, float]] = set()
    by_role: dict[str, list[tuple[int, float]]] = {}
    for role, n in role_counts:
        own: set[tuple[int, float]] = set()
        combos: list[tuple[int, float]] = []
        while len(combos) < n:
            attempts += 1
            if attempts > max_attempts:
                raise ValueError(
                    f"cannot draw {total} combinations across disjoint roles: the "
                    f"environment only yields {len(taken)} distinct (user, frequency) keys")
            uid = int(rng.integers(0, u))
            f_up = float(rng.uniform(f_lo, f_hi))
            key = (uid, f_up)
            if key in taken:
                continue
            own.add(key)
            combos.append(key)
        taken |= own
        by_role[role] = combos
    return ComboSet(env=env, users=users, by_role=by_role)


def collect(combo_set: ComboSet, role: str, delta_f: float, cfg: ArrayConfig,
            noise: NoiseSpec, rng: np.random.Generator,
            cov: EnvCovariance | None = None, limit: int | None = None,
            delay_max: float = DEFAULT_DELAY_MAX) -> TaskDataset:
    """Collect the sample pairs for one role of a drawn combination set.

    ``limit`` truncates to the first combinations (nested subsets share
    their prefix exactly, which keeps sample-count sweeps paired).
    """
    combos = combo_set.by_role[role]
    if limit is not None:
        combos = combos[:limit]
    if noise.mode == NOISE_LMMSE and cov is None:
        cov = EnvCovariance(combo_set.env, cfg, delay_max=delay_max)
    pairs = [make_sample_pair(combo_set.users[uid], f_up, delta_f, cfg, noise, rng,
                              cov=cov, user_index=uid)
             for uid, f_up in combos]
    return TaskDataset(env_id=combo_set.env.id, role=role, pairs=pairs)


def generate_task_datasets(env: Environment, role_counts: Sequence[tuple[str, int]],
                           u: int, f_range: tuple[float, float], delta_f: float,
                           cfg: ArrayConfig, noise: NoiseSpec,
                           rng: np.random.Generator,
                           delay_max: float = DEFAULT_DELAY_MAX) -> list[TaskDataset]:
    """Generate datasets for several roles of one environment at once.

    Roles drawn together are disjoint in their (user, uplink frequency)
    keys; see :func:`draw_combos`.
    """
    combo_set = draw_combos(env, role_counts, u, f_range, rng, delay_max)
    cov = (EnvCovariance(env, cfg, delay_max=delay_max)
           if noise.mode == NOISE_LMMSE else None)
    return [collect(combo_set, role, delta_f, cfg, noise, rng, cov=cov,
                    delay_max=delay_max)
            for role, _ in role_counts]


def generate_task_dataset(env: Environment, role: str, n_pairs: int, u: int,
                          f_range: tuple[float, float], delta_f: float,
                          cfg: ArrayConfig, noise: NoiseSpec,
                          rng: np.random.Generator,
                          delay_max: float = DEFAULT_DELAY_MAX) -> TaskDataset:
    """Single-role convenience wrapper around :func:`generate_task_datasets`."""
    return generate_task_datasets(env, [(role, n_pairs)], u, f_range, delta_f,
                                  cfg, noise, rng, delay_max)[0]


def with_array(gcfg: GeneratorConfig, m: int) -> GeneratorConfig:
    """Copy of the generator config with a different antenna count."""
    return replace(gcfg, array=replace(gcfg.array, m=m))
