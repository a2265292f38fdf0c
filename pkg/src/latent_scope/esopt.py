"""Bounded extremum seeking.

Each tuned parameter moves at a rate ``sqrt(alpha_i * omega_i) * psi(omega_i t + k y)``
with ``psi`` a cosine or square wave, so update speeds are bounded no matter what
the measured cost does. On average the parameters descend the cost gradient
with speed ``k * alpha / 2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)

#: number of initial cost samples used to fix the normalization scale
NORMALIZE_SAMPLES = 10


class ESConfigError(ValueError):
    pass


class ESEvaluationError(RuntimeError):
    """The cost evaluation returned a non-finite value."""


def default_ratios(n: int) -> np.ndarray:
    """Pairwise-irrational ratios ``sqrt(prime_i / 2)``, starting at 1."""
    if n > len(PRIMES):
        raise ESConfigError(f"at most {len(PRIMES)} default ratios")
    return np.sqrt(np.asarray(PRIMES[:n], dtype=np.float64) / 2.0)


@dataclass
class ESConfig:
    n_params: int
    omega: float
    k: float
    alpha: float | Sequence[float]
    dt: float
    ratios: Sequence[float] | None = None
    dither_kind: str = "cosine"
    lo: Sequence[float] | None = None
    hi: Sequence[float] | None = None
    normalize: bool = False
    max_phase_step: float = 0.5

    def __post_init__(self):
        n = int(self.n_params)
        if n < 1:
            raise ESConfigError("n_params must be >= 1")
        self.n_params = n
        self.ratios = (
            default_ratios(n) if self.ratios is None else np.asarray(self.ratios, dtype=np.float64)
        )
        if self.ratios.shape != (n,):
            raise ESConfigError("need one frequency ratio per parameter")
        if len(np.unique(self.ratios)) != n:
            raise ESConfigError("frequency ratios must be pairwise distinct")
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (n,)).copy()
        if np.any(self.alpha < 0):
            raise ESConfigError("alpha must be non-negative")
        if self.k < 0:
            raise ESConfigError("k must be non-negative")
        if not self.dt > 0 or not self.omega > 0:
            raise ESConfigError("dt and omega must be positive")
        if self.omega * self.ratios.max() * self.dt >= self.max_phase_step:
            raise ESConfigError(
                f"omega * r_max * dt = {self.omega * self.ratios.max() * self.dt:.3g} "
                f">= {self.max_phase_step}; dither is under-resolved"
            )
        if self.dither_kind not in ("cosine", "square"):
            raise ESConfigError(f"unknown dither kind {self.dither_kind!r}")
        for name in ("lo", "hi"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy())
        if self.lo is not None and self.hi is not None and np.any(self.lo > self.hi):
            raise ESConfigError("lower bound above upper bound")

    @property
    def omegas(self) -> np.ndarray:
        return self.omega * self.ratios

    @property
    def max_rates(self) -> np.ndarray:
        return np.sqrt(self.alpha * self.omegas)

    def period_steps(self) -> int:
        """Steps in one period of the slowest dither."""
        return max(1, int(round(2 * math.pi / (self.omegas.min() * self.dt))))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, v in d.items():
            if isinstance(v, np.ndarray):
                d[key] = v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ESConfig":
        return cls(**dict(d))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ESConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ESState:
    p: np.ndarray
    t: float = 0.0
    # first observed costs, used when cfg.normalize is set
    y_seen: tuple[float, ...] = ()

    def __post_init__(self):
        self.p = np.array(self.p, dtype=np.float64)


def _psi(kind: str, phase):
    c = np.cos(phase)
    return c if kind == "cosine" else np.sign(c)


def dither_rate(j: int, t: float, y_hat: float, cfg: ESConfig) -> float:
    """Rate of parameter ``j`` at time ``t`` given the measured cost."""
    if not 0 <= j < cfg.n_params:
        raise IndexError(j)
    w = cfg.omegas[j]
    return float(math.sqrt(cfg.alpha[j] * w) * _psi(cfg.dither_kind, w * t + cfg.k * y_hat))


def dither_rates(t: float, y_hat: float, cfg: ESConfig) -> np.ndarray:
    return cfg.max_rates * _psi(cfg.dither_kind, cfg.omegas * t + cfg.k * y_hat)


def normalized_cost(state: ESState, y_hat: float, cfg: ESConfig) -> tuple[float, tuple]:
    """Rescale ``y_hat`` by the largest magnitude among the first observed costs."""
    if not cfg.normalize:
        return y_hat, state.y_seen
    seen = state.y_seen
    if len(seen) < NORMALIZE_SAMPLES:
        seen = seen + (float(y_hat),)
    scale = max(abs(v) for v in seen)
    return (y_hat / scale if scale > 0 else y_hat), seen


def step(state: ESState, y_hat: float, cfg: ESConfig) -> ESState:
    """One forward-Euler step of the bounded ES law; returns a new state."""
    if not np.isfinite(y_hat):
        raise ESEvaluationError(f"non-finite cost {y_hat!r} at t={state.t}")
    y, seen = normalized_cost(state, float(y_hat), cfg)
    p = state.p + cfg.dt * dither_rates(state.t, y, cfg)
    if cfg.lo is not None or cfg.hi is not None:
        p = np.clip(p, cfg.lo, cfg.hi)
    return ESState(p, state.t + cfg.dt, seen)


@dataclass
class CostEvaluator:
    """Cost callable ``fn(p, t) -> y`` with optional additive uniform noise.

    Noise is drawn from ``U(-noise_amplitude, noise_amplitude)`` using a
    generator seeded at construction.
    """

    fn: Callable[[np.ndarray, float], float]
    noise_amplitude: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    @classmethod
    def static(cls, fn: Callable[[np.ndarray], float], **kw) -> "CostEvaluator":
        return cls(lambda p, t: fn(p), **kw)

    def __call__(self, p: np.ndarray, t: float = 0.0) -> float:
        y = float(self.fn(p, t))
        if self.noise_amplitude:
            y += self._rng.uniform(-self.noise_amplitude, self.noise_amplitude)
        return y


@dataclass
class Trajectory:
    t: np.ndarray  # (n,)
    p: np.ndarray  # (n, m), parameters at which y was measured
    y: np.ndarray  # (n,)
    final: ESState

    def __len__(self) -> int:
        return len(self.t)

    def windowed_p(self, window: int) -> np.ndarray:
        return windowed_mean(self.p, window)

    def to_csv(self, path: str | Path) -> None:
        m = self.p.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"p_{i + 1}" for i in range(m)] + ["y_hat"])
            for t, p, y in zip(self.t, self.p, self.y):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in p] + [repr(float(y))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, p, y = data[:, 0], data[:, 1:-1], data[:, -1]
        return cls(t, p, y, ESState(p[-1], float(t[-1])))


def run(
    evaluator: Callable,
    cfg: ESConfig,
    init_p: Sequence[float],
    n_steps: int,
    callback: Callable[[int, ESState, float], object] | None = None,
) -> Trajectory:
    """Run up to ``n_steps`` measure-then-update iterations starting from ``init_p``.

    ``evaluator`` is a :class:`CostEvaluator` (called with ``(p, t)``) or any
    plain ``f(p)`` callable. A ``callback`` returning a truthy value ends the
    run after the current measurement; the trajectory is truncated there.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not isinstance(evaluator, CostEvaluator):
        evaluator = CostEvaluator.static(evaluator)
    state = ESState(np.asarray(init_p, dtype=np.float64))
    if state.p.shape != (cfg.n_params,):
        raise ESConfigError("init_p has wrong length")
    if cfg.lo is not None or cfg.hi is not None:
        state.p = np.clip(state.p, cfg.lo, cfg.hi)
    ts = np.empty(n_steps)
    ps = np.empty((n_steps, cfg.n_params))
    ys = np.empty(n_steps)
    for n in range(n_steps):
        y = evaluator(state.p, state.t)
        ts[n], ps[n], ys[n] = state.t, state.p, y
        if callback is not None and callback(n, state, y):
            return Trajectory(ts[: n + 1], ps[: n + 1], ys[: n + 1], state)
        state = step(state, y, cfg)
    return Trajectory(ts, ps, ys, state)


def windowed_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` rows use what is available."""
    x = np.asarray(x, dtype=np.float64)
    c = np.cumsum(x, axis=0)
    out = np.empty_like(c)
    window = max(1, int(window))
    out[:window] = c[:window] / np.arange(1, min(window, len(x)) + 1).reshape(
        (-1,) + (1,) * (x.ndim - 1)
    )
    out[window:] = (c[window:] - c[:-window]) / window
    return out


def orthogonality_residual(
    kind: str,
    i: int,
    j: int,
    omega: float,
    T: float,
    ratios: Sequence[float] | None = None,
    samples_per_period: int = 64,
) -> float:
    """``(1/T) * integral_0^T psi_i psi_j dtau`` by the midpoint rule.

    With ``i == j`` this is the mean of ``psi_i**2`` (1/2 for cosine, 1 for square).
    """
    if not T > 0:
        raise ValueError("T must be positive")
    r = default_ratios(max(i, j) + 1) if ratios is None else np.asarray(ratios, dtype=np.float64)
    wi, wj = omega * r[i], omega * r[j]
    n = int(np.ceil(max(wi, wj) * T / (2 * math.pi) * samples_per_period)) + 1
    tau = (np.arange(n) + 0.5) * (T / n)
    return float(np.mean(_psi(kind, wi * tau) * _psi(kind, wj * tau)))


# --- benchmark plants ---------------------------------------------------------


def _rk4(f, x0, t_end: float, dt: float, limit: float = 1e8):
    """Classic RK4; stops early (truncating the output) once ``|x|`` exceeds ``limit``."""
    n = int(round(t_end / dt))
    x = np.asarray(x0, dtype=np.float64)
    ts = np.arange(n + 1) * dt
    xs = np.empty((n + 1,) + x.shape)
    xs[0] = x
    for i in range(n):
        t = ts[i]
        k1 = f(t, x)
        k2 = f(t + dt / 2, x + dt / 2 * k1)
        k3 = f(t + dt / 2, x + dt / 2 * k2)
        k4 = f(t + dt, x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[i + 1] = x
        if np.max(np.abs(x)) > limit:
            return ts[: i + 2], xs[: i + 2]
    return ts, xs


@dataclass
class AdaptiveScalarPlant:
    """``dx/dt = a x + b u`` with the adaptive law ``u = theta x``, ``dtheta/dt = -k x**2``.

    Stabilizes for unknown ``a`` provided ``b > 0``; with ``b < 0`` the law
    pushes the closed loop the wrong way and ``x`` grows.
    """

    a: float = 1.0
    b: float = 2.0
    k: float = 1.0
    x0: float = 1.0
    theta0: float = 0.0

    def rhs(self, t, s):
        x, theta = s
        return np.array([self.a * x + self.b * theta * x, -self.k * x * x])

    def simulate(self, t_end: float = 20.0, dt: float = 1e-3):
        ts, s = _rk4(self.rhs, [self.x0, self.theta0], t_end, dt)
        return ts, s[:, 0], s[:, 1]

    @property
    def evaluator(self) -> CostEvaluator:
        return CostEvaluator(lambda p, t: float(np.sum(np.square(p))))


@dataclass
class SignVaryingPlant:
    """``dx/dt = a x + cos(2 pi f t) u`` with ``u`` the bounded ES rate on ``y = x**2``.

    The control direction flips sign repeatedly, which defeats the adaptive law
    above but not ES: averaged, ``dx/dt ~ (a - k alpha / 2) x``.
    """

    a: float = 1.0
    f: float = 0.1
    x0: float = 1.0
    es: ESConfig = field(
        default_factory=lambda: ESConfig(n_params=1, omega=200.0, k=5.0, alpha=2.0, dt=1e-3)
    )

    def b(self, t: float) -> float:
        return math.cos(2 * math.pi * self.f * t)

    def simulate(self, t_end: float = 100.0, noise_amplitude: float = 0.0, seed: int = 0):
        ev = self.evaluator(noise_amplitude, seed)
        dt = self.es.dt
        n = int(round(t_end / dt))
        ts = np.arange(n + 1) * dt
        xs = np.empty(n + 1)
        x = self.x0
        xs[0] = x
        for i in range(n):
            t = ts[i]
            u = dither_rate(0, t, ev(np.array([x]), t), self.es)
            x = x + dt * (self.a * x + self.b(t) * u)
            xs[i + 1] = x
        return ts, xs

    def evaluator(self, noise_amplitude: float = 0.0, seed: int = 0) -> CostEvaluator:
        return CostEvaluator(lambda p, t: float(p[0] ** 2), noise_amplitude, seed)


@dataclass
class NoisyBowlPlant:
    """Static nonlinear cost over a parameter vector, measured with uniform noise.

    ``y = |p - p*|^2 + coupling * sum(sin(p - p*)^2)``; minimum 0 at ``p*``.
    """

    target: Sequence[float] = (1.0, -0.5)
    coupling: float = 0.2
    noise_amplitude: float = 0.05
    seed: int = 0

    def cost(self, p: np.ndarray) -> float:
        d = np.asarray(p) - np.asarray(self.target)
        return float(d @ d + self.coupling * np.sum(np.sin(d) ** 2))

    @property
    def evaluator(self) -> CostEvaluator:
        return CostEvaluator(lambda p, t: self.cost(p), self.noise_amplitude, self.seed)


def benchmark_plants() -> dict:
    return {
        "adaptive_scalar": AdaptiveScalarPlant(),
        "sign_varying": SignVaryingPlant(),
        "noisy_bowl": NoisyBowlPlant(),
    }
