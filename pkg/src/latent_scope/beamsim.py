"""Toy 6D beam transport through a FACET-II-like compressor lattice.

Coordinates per macroparticle are ``(x, xp, y, yp, z, delta)`` with positions in
metres, angles in radians and ``delta`` the relative energy deviation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

COORD_NAMES = ("x", "xp", "y", "yp", "z", "delta")

# Channel order of the 15 unique coordinate pairs (0-based indices).
PAIRS: tuple[tuple[int, int], ...] = tuple(
    (i, j) for i in range(6) for j in range(i + 1, 6)
)
N_CHANNELS = len(PAIRS)
PAIR_LABELS = tuple(f"rho_{i + 1}{j + 1}" for i, j in PAIRS)
CHANNEL_XE = PAIRS.index((0, 5))
CHANNEL_ZE = PAIRS.index((4, 5))

PARAM_NAMES = (
    "x_offset",
    "y_offset",
    "charge",
    "l1_amplitude",
    "l1_phase",
    "l2_amplitude",
    "l2_phase",
)


class ConfigError(ValueError):
    """Raised for invalid lattice, generator or histogram settings."""


@dataclass(frozen=True)
class MachineParams:
    x_offset: float = 0.0
    y_offset: float = 0.0
    charge: float = 1e-9
    l1_amplitude: float = 1.0
    l1_phase: float = 0.0
    l2_amplitude: float = 1.0
    l2_phase: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "MachineParams":
        if len(values) != len(PARAM_NAMES):
            raise ConfigError(f"expected {len(PARAM_NAMES)} machine parameters")
        return cls(*(float(v) for v in values))

    def replace(self, **changes) -> "MachineParams":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return MachineParams(**data)


@dataclass
class ParticleEnsemble:
    coords: np.ndarray
    charge: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 6 or len(self.coords) < 1:
            raise ConfigError("coords must have shape (N, 6) with N >= 1")
        if not self.charge > 0:
            raise ConfigError("charge must be positive")

    @property
    def n_particles(self) -> int:
        return len(self.coords)

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.coords.copy(), self.charge)


# --- lattice elements -------------------------------------------------------


@dataclass(frozen=True)
class Drift:
    L: float

    def __post_init__(self):
        if self.L < 0:
            raise ConfigError("drift length must be non-negative")

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        c = beam.coords.copy()
        c[:, 0] += self.L * c[:, 1]
        c[:, 2] += self.L * c[:, 3]
        return ParticleEnsemble(c, beam.charge)


@dataclass(frozen=True)
class Quad:
    """Thin-lens kick of strength ``k1 * L`` between two half drifts."""

    L: float
    k1: float

    def __post_init__(self):
        if self.L < 0:
            raise ConfigError("quad length must be non-negative")

    def plane_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.array([[1.0, self.L / 2], [0.0, 1.0]])
        kl = self.k1 * self.L
        fx = np.array([[1.0, 0.0], [-kl, 1.0]])
        fy = np.array([[1.0, 0.0], [kl, 1.0]])
        return half @ fx @ half, half @ fy @ half

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        mx, my = self.plane_matrices()
        c = beam.coords.copy()
        c[:, 0:2] = beam.coords[:, 0:2] @ mx.T
        c[:, 2:4] = beam.coords[:, 2:4] @ my.T
        return ParticleEnsemble(c, beam.charge)


@dataclass(frozen=True)
class RF:
    V: float
    phase: float
    wavenumber: float
    section: int | None = None

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        c = beam.coords.copy()
        c[:, 5] += self.V * np.cos(self.phase + self.wavenumber * c[:, 4])
        return ParticleEnsemble(c, beam.charge)


@dataclass(frozen=True)
class Chicane:
    R56: float
    T566: float = 0.0

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        c = beam.coords.copy()
        d = c[:, 5]
        c[:, 4] += self.R56 * d + self.T566 * d * d
        return ParticleEnsemble(c, beam.charge)


@dataclass(frozen=True)
class WakeSurrogate:
    """Head-to-tail energy loss ramp proportional to bunch charge."""

    kappa: float

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        c = beam.coords.copy()
        n = len(c)
        # stable sort keeps ties deterministic
        order = np.argsort(c[:, 4], kind="stable")
        rank = np.empty(n, dtype=np.float64)
        rank[order] = np.arange(n)
        c[:, 5] -= self.kappa * beam.charge * rank / n
        return ParticleEnsemble(c, beam.charge)


@dataclass(frozen=True)
class Marker:
    station_id: int
    name: str = ""

    def apply(self, beam: ParticleEnsemble) -> ParticleEnsemble:
        return beam


LatticeElement = Drift | Quad | RF | Chicane | WakeSurrogate | Marker

_KINDS = {
    "drift": Drift,
    "quad": Quad,
    "rf": RF,
    "chicane": Chicane,
    "wake": WakeSurrogate,
    "marker": Marker,
}


def apply_element(elem: LatticeElement, beam: ParticleEnsemble) -> ParticleEnsemble:
    return elem.apply(beam)


def element_from_dict(d: Mapping) -> LatticeElement:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown element kind {kind!r}")
    try:
        return _KINDS[kind](**d)
    except TypeError as exc:
        raise ConfigError(f"bad fields for {kind}: {exc}") from None


def element_to_dict(elem: LatticeElement) -> dict:
    kind = next(k for k, cls in _KINDS.items() if isinstance(elem, cls))
    out = {"kind": kind}
    out.update({f.name: getattr(elem, f.name) for f in fields(elem)})
    return out


def build_lattice(spec: Sequence[Mapping]) -> list[LatticeElement]:
    lattice = [element_from_dict(d) for d in spec]
    ids = [e.station_id for e in lattice if isinstance(e, Marker)]
    if len(ids) != len(set(ids)):
        raise ConfigError("marker station ids must be unique")
    return lattice


def station_ids(lattice: Sequence[LatticeElement]) -> list[int]:
    return [e.station_id for e in lattice if isinstance(e, Marker)]


def station_names(lattice: Sequence[LatticeElement]) -> list[str]:
    return [e.name or f"S{e.station_id}" for e in lattice if isinstance(e, Marker)]


# --- generation and tracking ------------------------------------------------


@dataclass
class GeneratorConfig:
    """Input beam generator: a Gaussian core plus optional sub-bunch blobs.

    ``sigmas`` are rms values for the six coordinates of the core. Each blob is
    a dict with ``fraction`` (of N) and ``offset`` (six-vector added to the blob
    centre); blobs share the core sigmas scaled by ``scale`` (default 1).
    ``beam_seed``, when set, freezes the particle realization: every draw uses
    it in place of the per-sample seed.
    """

    n_particles: int = 20000
    sigmas: tuple[float, ...] = (1e-3, 1e-4, 1e-3, 1e-4, 1e-3, 1e-3)
    blobs: list[dict] = field(default_factory=list)
    beam_seed: int | None = None

    def __post_init__(self):
        if int(self.n_particles) <= 0:
            raise ConfigError("n_particles must be positive")
        if len(self.sigmas) != 6 or any(not s > 0 for s in self.sigmas):
            raise ConfigError("sigmas must be six positive values")
        if len(self.blobs) > 2:
            raise ConfigError("at most two sub-bunch blobs")
        total = sum(float(b.get("fraction", 0.0)) for b in self.blobs)
        if any(float(b.get("fraction", 0.0)) < 0 for b in self.blobs) or total >= 1:
            raise ConfigError("blob fractions must be non-negative and sum below 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        return cls(
            n_particles=int(d.get("n_particles", 20000)),
            sigmas=tuple(float(s) for s in d.get("sigmas", cls.sigmas)),
            blobs=[dict(b) for b in d.get("blobs", [])],
            beam_seed=d.get("beam_seed"),
        )


def sample_input_beam(
    params: MachineParams, gen_config: GeneratorConfig, seed: int
) -> ParticleEnsemble:
    """Draw the beam entering the lattice.

    The core and blobs are drawn from one seeded generator so the result is a
    pure function of ``(params, gen_config, seed)``. The transverse offsets in
    ``params`` shift every particle.
    """
    rng = np.random.default_rng(seed if gen_config.beam_seed is None else gen_config.beam_seed)
    n = gen_config.n_particles
    sig = np.asarray(gen_config.sigmas, dtype=np.float64)
    counts = [int(round(float(b["fraction"]) * n)) for b in gen_config.blobs]
    n_core = n - sum(counts)
    parts = [rng.standard_normal((n_core, 6)) * sig]
    for blob, m in zip(gen_config.blobs, counts):
        scale = np.asarray(blob.get("scale", 1.0), dtype=np.float64)
        offset = np.asarray(blob.get("offset", [0.0] * 6), dtype=np.float64)
        parts.append(rng.standard_normal((m, 6)) * sig * scale + offset)
    coords = np.concatenate(parts, axis=0)
    coords[:, 0] += params.x_offset
    coords[:, 2] += params.y_offset
    return ParticleEnsemble(coords, params.charge)


def _modulated(elem: LatticeElement, params: MachineParams) -> LatticeElement:
    if not isinstance(elem, RF) or elem.section not in (1, 2):
        return elem
    if elem.section == 1:
        amp, dphi = params.l1_amplitude, params.l1_phase
    else:
        amp, dphi = params.l2_amplitude, params.l2_phase
    return RF(elem.V * amp, elem.phase + dphi, elem.wavenumber, elem.section)


def track(
    lattice: Sequence[LatticeElement], beam: ParticleEnsemble, params: MachineParams
) -> dict[int, ParticleEnsemble]:
    """Track ``beam`` through ``lattice`` and snapshot it at every marker.

    RF elements tagged ``section`` 1 or 2 have their amplitude scaled and phase
    shifted by the corresponding machine parameters.
    """
    if not any(isinstance(e, Marker) for e in lattice):
        raise ConfigError("lattice has no markers")
    snapshots: dict[int, ParticleEnsemble] = {}
    current = beam
    for elem in lattice:
        if isinstance(elem, Marker):
            snapshots[elem.station_id] = current.copy()
        else:
            current = _modulated(elem, params).apply(current)
    return snapshots


# --- histograms -------------------------------------------------------------


def _bin_index(values: np.ndarray, lo: float, hi: float, G: int) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * G)
    return np.clip(idx, 0, G - 1).astype(np.intp)


def _check_ranges(axis_ranges, G: int):
    if G < 2:
        raise ConfigError("grid size must be at least 2")
    for lo, hi in axis_ranges:
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ConfigError(f"invalid axis range ({lo}, {hi})")


def project(
    beam: ParticleEnsemble, pair: tuple[int, int], axis_ranges, G: int
) -> np.ndarray:
    """Normalized G x G histogram of coordinates ``pair`` (0-based, i < j).

    ``axis_ranges`` gives ``(lo, hi)`` for the two coordinates. Particles out of
    range land in the edge bins. Rows index the first coordinate.
    """
    i, j = pair
    if not (0 <= i < j < 6):
        raise ConfigError(f"invalid coordinate pair {pair}")
    _check_ranges(axis_ranges, G)
    (lo_i, hi_i), (lo_j, hi_j) = axis_ranges
    a = _bin_index(beam.coords[:, i], lo_i, hi_i, G)
    b = _bin_index(beam.coords[:, j], lo_j, hi_j, G)
    grid = np.bincount(a * G + b, minlength=G * G).astype(np.float64)
    return (grid / beam.n_particles).reshape(G, G)


def station_projections(beam: ParticleEnsemble, ranges: np.ndarray, G: int) -> np.ndarray:
    """All 15 channels for one snapshot; ``ranges`` has shape (6, 2)."""
    _check_ranges(ranges, G)
    idx = [_bin_index(beam.coords[:, c], ranges[c, 0], ranges[c, 1], G) for c in range(6)]
    out = np.empty((len(PAIRS), G, G))
    for ch, (i, j) in enumerate(PAIRS):
        counts = np.bincount(idx[i] * G + idx[j], minlength=G * G)
        out[ch] = counts.reshape(G, G) / beam.n_particles
    return out


@dataclass
class ProjectionSet:
    stations: list[int]
    grids: np.ndarray  # (n_stations, 15, G, G)
    axes: np.ndarray  # (n_stations, 6, 2)

    @property
    def G(self) -> int:
        return self.grids.shape[-1]

    def flat(self) -> np.ndarray:
        """Channel-major stack of shape (n_stations * 15, G, G)."""
        n, c, g, _ = self.grids.shape
        return self.grids.reshape(n * c, g, g)


def all_projections(
    snapshots: Mapping[int, ParticleEnsemble], axis_config: np.ndarray, G: int
) -> ProjectionSet:
    stations = list(snapshots)
    axis_config = np.asarray(axis_config, dtype=np.float64)
    if axis_config.shape != (len(stations), 6, 2):
        raise ConfigError("axis table must have shape (n_stations, 6, 2)")
    grids = np.stack(
        [station_projections(snapshots[s], axis_config[k], G) for k, s in enumerate(stations)]
    )
    return ProjectionSet(stations, grids, axis_config)


def energy_spectrum(projection_16: np.ndarray) -> np.ndarray:
    """Energy spectrum from an (x, delta) grid: sum over the x axis (rows)."""
    return np.asarray(projection_16).sum(axis=-2)


# --- axis table -------------------------------------------------------------


def axis_table(
    snapshot_batches: Sequence[Mapping[int, ParticleEnsemble]],
    percentiles: tuple[float, float] = (1.0, 99.0),
    margin: float = 0.1,
) -> np.ndarray:
    """Per-station, per-coordinate ``(lo, hi)`` from pooled pilot runs.

    The percentile window is widened by ``margin`` of its width on each side.
    """
    stations = list(snapshot_batches[0])
    table = np.empty((len(stations), 6, 2))
    for k, s in enumerate(stations):
        pooled = np.concatenate([b[s].coords for b in snapshot_batches])
        lo, hi = np.percentile(pooled, percentiles, axis=0)
        width = np.maximum(hi - lo, 1e-12)
        table[k, :, 0] = lo - margin * width
        table[k, :, 1] = hi + margin * width
    return table


# --- config ---------------------------------------------------------------


@dataclass
class SimConfig:
    lattice: list[LatticeElement]
    generator: GeneratorConfig
    ranges: dict[str, tuple[float, float]]
    G: int = 32

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        ranges = {k: (float(v[0]), float(v[1])) for k, v in d["sampling_ranges"].items()}
        missing = set(PARAM_NAMES) - set(ranges)
        if missing:
            raise ConfigError(f"missing sampling ranges: {sorted(missing)}")
        for name, (lo, hi) in ranges.items():
            if lo > hi:
                raise ConfigError(f"sampling range for {name} has lo > hi")
        return cls(
            lattice=build_lattice(d["lattice"]),
            generator=GeneratorConfig.from_dict(d.get("generator", {})),
            ranges=ranges,
            G=int(d.get("grid_size", 32)),
        )

    @property
    def stations(self) -> list[int]:
        return station_ids(self.lattice)

    def nominal(self) -> MachineParams:
        return MachineParams(*(0.5 * (self.ranges[n][0] + self.ranges[n][1]) for n in PARAM_NAMES))

    def sample_params(self, rng: np.random.Generator) -> MachineParams:
        lo = np.array([self.ranges[n][0] for n in PARAM_NAMES])
        hi = np.array([self.ranges[n][1] for n in PARAM_NAMES])
        return MachineParams.from_array(lo + (hi - lo) * rng.random(len(PARAM_NAMES)))


def load_sim_config(path: str | Path) -> SimConfig:
    with open(path) as fh:
        return SimConfig.from_dict(json.load(fh))


def simulate(cfg: SimConfig, params: MachineParams, seed: int) -> dict[int, ParticleEnsemble]:
    """Input beam plus tracked snapshots; the input beam is keyed ``-1``."""
    beam = sample_input_beam(params, cfg.generator, seed)
    snaps = track(cfg.lattice, beam, params)
    return {-1: beam, **snaps}
