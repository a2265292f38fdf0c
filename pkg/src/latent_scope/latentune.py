"""Extremum-seeking tuning of a frozen decoder's latent vector.

The encoder inputs are assumed unavailable: the latent vector is driven
directly by bounded ES so that the decoder's predictions of the measurable
projections (LPS at TCAV stations, energy spectra at spectrometer stations)
match measurements. The tuned parameters are latent coordinates rescaled to
``[-1, 1]`` over the training-latent box stored with the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import beamsim, esopt
from .beamsim import CHANNEL_XE, CHANNEL_ZE, N_CHANNELS
from .phasenet import Network


class CostSpecError(ValueError):
    pass


@dataclass
class CostSpec:
    tcav_terms: list[tuple[int, float]] = field(default_factory=list)
    spectrum_terms: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.tcav_terms = [(int(s), float(w)) for s, w in self.tcav_terms]
        self.spectrum_terms = [(int(s), float(w)) for s, w in self.spectrum_terms]
        weights = [w for _, w in self.tcav_terms + self.spectrum_terms]
        if not weights:
            raise CostSpecError("cost needs at least one term")
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise CostSpecError("weights must be non-negative and not all zero")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostSpec":
        return cls(d.get("tcav_terms", []), d.get("spectrum_terms", []))

    @property
    def stations(self) -> list[int]:
        return sorted({s for s, _ in self.tcav_terms + self.spectrum_terms})

    def measured_channels(self, stations: Sequence[int]) -> list[int]:
        """Flat channel indices fed into (or directly summarized by) the cost."""
        idx = {s: k for k, s in enumerate(stations)}
        out = {idx[s] * N_CHANNELS + CHANNEL_ZE for s, _ in self.tcav_terms}
        out |= {idx[s] * N_CHANNELS + CHANNEL_XE for s, _ in self.spectrum_terms}
        return sorted(out)


def _check(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def cost_tcav(pred_56, meas_56) -> float:
    """Sum of absolute bin differences between two (z, delta) grids."""
    a, b = _check(pred_56, meas_56)
    return float(np.abs(a - b).sum())


def cost_spectrum(pred_16, meas_spectrum) -> float:
    """L1 distance between the energy spectrum of an (x, delta) grid and a measured one."""
    spec = beamsim.energy_spectrum(pred_16)
    a, b = _check(spec, meas_spectrum)
    return float(np.abs(a - b).sum())


def measurements_from_stack(spec: CostSpec, stack: np.ndarray, stations: Sequence[int]) -> dict:
    """The measurable pieces of a flat ``(n_stations * 15, G, G)`` stack."""
    idx = {s: k for k, s in enumerate(stations)}
    out = {}
    for s, _ in spec.tcav_terms:
        out[("tcav", s)] = stack[idx[s] * N_CHANNELS + CHANNEL_ZE]
    for s, _ in spec.spectrum_terms:
        out[("spectrum", s)] = beamsim.energy_spectrum(stack[idx[s] * N_CHANNELS + CHANNEL_XE])
    return out


def combined_cost(spec: CostSpec, decoded: np.ndarray, measurements: Mapping, stations: Sequence[int]) -> float:
    idx = {s: k for k, s in enumerate(stations)}
    total = 0.0
    for s, w in spec.tcav_terms:
        if s not in idx or ("tcav", s) not in measurements:
            raise CostSpecError(f"station {s} missing from prediction or measurements")
        if w:
            total += w * cost_tcav(decoded[idx[s] * N_CHANNELS + CHANNEL_ZE], measurements[("tcav", s)])
    for s, w in spec.spectrum_terms:
        if s not in idx or ("spectrum", s) not in measurements:
            raise CostSpecError(f"station {s} missing from prediction or measurements")
        if w:
            total += w * cost_spectrum(decoded[idx[s] * N_CHANNELS + CHANNEL_XE], measurements[("spectrum", s)])
    return total


# --- measurement providers --------------------------------------------------


class ManufacturedProvider:
    """Measurements produced by the decoder itself at a known latent ``target``."""

    def __init__(self, net: Network, target_latent, spec: CostSpec, stations):
        self.target_latent = np.asarray(target_latent, dtype=np.float64)
        self.stack = net.decode(self.target_latent)
        self._meas = measurements_from_stack(spec, self.stack, stations)

    def measure(self, t: float = 0.0) -> dict:
        return self._meas

    def truth(self, t: float = 0.0) -> np.ndarray:
        return self.stack


@dataclass
class Drift:
    """Sinusoidal drift ``amplitude * sin(2 pi t / period)`` added to one hidden parameter."""

    parameter: str
    amplitude: float
    period: float

    def offset(self, t: float) -> float:
        return self.amplitude * math.sin(2 * math.pi * t / self.period)


class SimulatedProvider:
    """Measurements from the beam simulator at hidden machine parameters.

    With ``drift`` set the hidden parameters move with time; the simulation is
    refreshed every ``update_every`` time units (held constant in between).
    ``noise_level`` adds Poisson-like pixel noise: each measured grid is
    resampled as counts with ``noise_level ** -2`` expected events.
    """

    def __init__(
        self,
        sim: beamsim.SimConfig,
        params: beamsim.MachineParams,
        seed: int,
        axes: np.ndarray,
        spec: CostSpec,
        drift: Drift | None = None,
        update_every: float = 0.0,
        noise_level: float = 0.0,
    ):
        self.sim, self.params, self.seed, self.axes, self.spec = sim, params, seed, axes, spec
        self.drift = drift
        self.update_every = update_every
        self.noise_level = noise_level
        self._rng = np.random.default_rng([seed, 2])
        self._key = None
        self._stack = None

    def params_at(self, t: float) -> beamsim.MachineParams:
        if self.drift is None:
            return self.params
        value = getattr(self.params, self.drift.parameter) + self.drift.offset(t)
        return self.params.replace(**{self.drift.parameter: value})

    def truth(self, t: float = 0.0) -> np.ndarray:
        if self.drift is None:
            key, tq = 0, 0.0
        elif self.update_every > 0:
            key = math.floor(t / self.update_every)
            tq = key * self.update_every
        else:
            key = tq = t
        if key != self._key:
            p = self.params_at(tq)
            beam = beamsim.sample_input_beam(p, self.sim.generator, [self.seed, 1])
            snaps = beamsim.track(self.sim.lattice, beam, p)
            self._stack = beamsim.all_projections(snaps, self.axes, self.sim.G).flat()
            self._key = key
        return self._stack

    def measure(self, t: float = 0.0) -> dict:
        meas = measurements_from_stack(self.spec, self.truth(t), self.sim.stations)
        if self.noise_level > 0:
            n = self.noise_level**-2
            for key, grid in meas.items():
                counts = self._rng.poisson(grid * n).astype(np.float64)
                total = counts.sum()
                meas[key] = counts / total if total > 0 else grid
        return meas


# --- tuning -----------------------------------------------------------------


@dataclass
class LatentBox:
    """Affine map between unit coordinates ``u`` in ``[-1, 1]^d`` and latents.

    ``z = center + basis @ (half * u)``; ``basis`` is orthonormal.
    """

    center: np.ndarray
    basis: np.ndarray
    half: np.ndarray

    @classmethod
    def of(cls, net: Network) -> "LatentBox":
        f = lambda a: np.asarray(a, dtype=np.float64)
        return cls(f(net.latent_center), f(net.latent_basis), f(net.latent_half))

    @property
    def diameter(self) -> float:
        return float(2 * np.linalg.norm(self.half))

    def to_latent(self, u):
        return self.center + (np.asarray(u) * self.half) @ self.basis.T

    def to_unit(self, z):
        return ((np.asarray(z) - self.center) @ self.basis) / self.half

    def corner(self, signs) -> np.ndarray:
        return self.to_latent(np.asarray(signs, dtype=np.float64))


@dataclass
class TuneSettings:
    threshold: float = 0.05
    stuck_window: int = 100
    stuck_tolerance: float = 0.01
    stuck_windows: int = 5

    @classmethod
    def from_dict(cls, d: Mapping) -> "TuneSettings":
        keys = ("threshold", "stuck_window", "stuck_tolerance", "stuck_windows")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass
class TuneResult:
    t: np.ndarray
    latents: np.ndarray  # (n, N_L)
    costs: np.ndarray  # (n,)
    window: int  # averaging window (steps), one slowest dither period
    steps_to_threshold: int | None
    stuck: bool
    final_latent: np.ndarray  # windowed mean at the end
    weights_checksum: str
    report: "ErrorReport | None" = None
    initial_report: "ErrorReport | None" = None

    @property
    def windowed_costs(self) -> np.ndarray:
        return esopt.windowed_mean(self.costs, self.window)

    @property
    def final_cost(self) -> float:
        return float(self.windowed_costs[-1])


def es_config(d: Mapping, n_params: int) -> esopt.ESConfig:
    """ES settings for tuning in the unit latent box.

    ``dt`` defaults to ``phase_step / (omega * r_max)`` so every dimension count
    resolves its fastest dither with the same number of steps.
    """
    ratios = d.get("ratios")
    ratios = esopt.default_ratios(n_params) if ratios is None else np.asarray(ratios[:n_params])
    omega = float(d["omega"])
    dt = d.get("dt")
    if dt is None:
        dt = float(d.get("phase_step", 0.25)) / (omega * float(np.max(ratios)))
    return esopt.ESConfig(
        n_params=n_params,
        omega=omega,
        k=float(d["k"]),
        alpha=float(d["alpha"]),
        dt=float(dt),
        ratios=ratios,
        dither_kind=d.get("dither_kind", "cosine"),
        lo=-1.0,
        hi=1.0,
        normalize=bool(d.get("normalize", True)),
    )


def detect_stuck(costs: np.ndarray, settings: TuneSettings) -> bool:
    """Plateau above threshold: the last ``stuck_windows`` block-mean improvements
    each fall below ``stuck_tolerance`` (relative) and the final block mean
    exceeds the success threshold."""
    w, n = settings.stuck_window, settings.stuck_windows
    blocks = len(costs) // w
    if blocks < n + 1:
        return False
    means = costs[: blocks * w].reshape(blocks, w).mean(axis=1)
    if means[-1] <= settings.threshold:
        return False
    recent = means[-(n + 1) :]
    improvement = (recent[:-1] - recent[1:]) / np.maximum(recent[:-1], 1e-300)
    return bool(np.all(improvement < settings.stuck_tolerance))


def steps_to_threshold(costs: np.ndarray, window: int, threshold: float) -> int | None:
    """First step count at which the trailing window mean falls below ``threshold``."""
    wc = esopt.windowed_mean(costs, window)
    hit = np.nonzero(wc[window - 1 :] < threshold)[0]
    return None if len(hit) == 0 else int(hit[0] + window)


def tune(
    decoder: Network,
    provider,
    spec: CostSpec,
    es_cfg: esopt.ESConfig,
    init_latent,
    n_steps: int,
    stations: Sequence[int],
    settings: TuneSettings | None = None,
    box: LatentBox | None = None,
    callback: Callable | None = None,
    stop_on_success: bool = False,
) -> TuneResult:
    """Drive the decoder's latent input by ES on ``combined_cost``.

    With ``stop_on_success`` the run ends as soon as the trailing one-period
    mean cost drops below the success threshold.
    """
    settings = settings or TuneSettings()
    box = box or LatentBox.of(decoder)
    if len(init_latent) != decoder.arch.latent_dim or es_cfg.n_params != decoder.arch.latent_dim:
        raise ValueError("latent dimension mismatch")
    checksum = decoder.checksum()
    window = es_cfg.period_steps()

    def cost(u, t):
        return combined_cost(spec, decoder.decode(box.to_latent(u)), provider.measure(t), stations)

    recent = []

    def hook(n, state, y):
        stop = callback(n, state, y) if callback is not None else False
        if stop_on_success:
            recent.append(y)
            if len(recent) > window:
                recent.pop(0)
            stop = stop or (len(recent) == window and sum(recent) / window < settings.threshold)
        return stop

    traj = esopt.run(esopt.CostEvaluator(cost), es_cfg, box.to_unit(init_latent), n_steps, hook)
    if decoder.checksum() != checksum:
        raise RuntimeError("decoder parameters changed during tuning")
    latents = box.to_latent(traj.p)
    reached = steps_to_threshold(traj.y, window, settings.threshold)
    stopped = stop_on_success and reached is not None
    return TuneResult(
        t=traj.t,
        latents=latents,
        costs=traj.y,
        window=window,
        steps_to_threshold=reached,
        # a run ended by success is not on a plateau
        stuck=False if stopped else detect_stuck(traj.y, settings),
        final_latent=esopt.windowed_mean(latents, window)[-1],
        weights_checksum=checksum,
    )


# --- unseen-channel evaluation ---------------------------------------------


@dataclass
class ErrorReport:
    errors: np.ndarray  # (n_channels,) L1 per channel
    measured: list[int]
    unseen: list[int]

    @property
    def measured_mean(self) -> float:
        return float(self.errors[self.measured].mean()) if self.measured else float("nan")

    @property
    def unseen_mean(self) -> float:
        return float(self.errors[self.unseen].mean()) if self.unseen else float("nan")


def evaluate_unseen(decoded: np.ndarray, truth: np.ndarray, measured_channels: Sequence[int]) -> ErrorReport:
    """Per-channel L1 errors split into measured and unseen groups."""
    a, b = _check(decoded, truth)
    errors = np.abs(a - b).sum(axis=(-1, -2))
    measured = sorted(set(int(c) for c in measured_channels))
    if any(c < 0 or c >= len(errors) for c in measured):
        raise ValueError("measured channel index out of range")
    unseen = [c for c in range(len(errors)) if c not in set(measured)]
    return ErrorReport(errors, measured, unseen)
