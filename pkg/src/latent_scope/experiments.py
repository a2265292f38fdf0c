"""Experiment drivers shared by the command line and the test-suite.

Each driver takes a validated config document plus already-loaded data and
returns plain results; file output lives in :mod:`latent_scope.cli`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import beamsim
from .latentune import (
    CostSpec,
    Drift,
    ErrorReport,
    LatentBox,
    ManufacturedProvider,
    SimulatedProvider,
    TuneResult,
    TuneSettings,
    es_config,
    evaluate_unseen,
    tune,
)
from .phasenet import Dataset, Network, TrainConfig, init_network, train
from .pipeline import draw_params, network_arch, sim_config

TUNE_SEED_OFFSET = 2_000_000
DEFAULT_ES = {"omega": 10.0, "k": 60.0, "alpha": 0.005, "phase_step": 0.25}


class ExperimentError(ValueError):
    """Inconsistent inputs (shapes, axis tables, dimensions)."""


def latent_dims(doc: dict) -> list[int]:
    ld = doc.get("network", {}).get("latent_dim", 2)
    return [int(ld)] if isinstance(ld, int) else [int(v) for v in ld]


def cost_variants(doc: dict) -> dict[str, CostSpec]:
    """Named cost definitions; a lone ``cost`` section is variant ``"cost"``."""
    if doc.get("cost_variants"):
        return {k: CostSpec.from_dict(v) for k, v in doc["cost_variants"].items()}
    return {"cost": CostSpec.from_dict(doc.get("cost", {"tcav_terms": [[0, 1.0]]}))}


def check_dataset(doc: dict, ds: Dataset, stations) -> None:
    sim = sim_config(doc)
    G = sim.G
    want = (len(sim.stations) * beamsim.N_CHANNELS, G, G)
    if ds.targets.shape[1:] != want or list(stations) != sim.stations:
        raise ExperimentError(f"dataset targets {ds.targets.shape[1:]} / stations {list(stations)} do not match config {want} / {sim.stations}")
    if ds.axes.shape != (len(sim.stations), 6, 2):
        raise ExperimentError("dataset axis table does not match the lattice stations")


# --- training / evaluation --------------------------------------------------


def train_model(doc: dict, ds: Dataset, stations, latent_dim: int, seed: int, log: Callable | None = None):
    """``(network, history)`` for one latent dimension and training seed."""
    check_dataset(doc, ds, stations)
    sim = sim_config(doc)
    arch = network_arch(doc, latent_dim, len(stations), sim.G)
    dtype = np.dtype(doc.get("network", {}).get("dtype", "float32"))
    tcfg = TrainConfig.from_dict({**doc.get("train", {}), "seed": seed})
    return train(init_network(arch, seed, dtype), ds, tcfg, log)


def sample_errors(net: Network, images, scalars, targets, batch_size: int = 64) -> np.ndarray:
    """Per-sample, per-channel L1 errors ``(n, n_channels)``."""
    if len(images) == 0:
        raise ExperimentError("no samples to evaluate")
    out = []
    for i in range(0, len(images), batch_size):
        pred = net.forward(images[i : i + batch_size], scalars[i : i + batch_size])
        out.append(np.abs(pred - targets[i : i + batch_size].astype(np.float64)).sum(axis=(2, 3)))
    return np.concatenate(out)


def check_checkpoint(net: Network, axes, ds: Dataset) -> None:
    if ds.targets.shape[1:] != (net.arch.n_stations * beamsim.N_CHANNELS, net.arch.G, net.arch.G):
        raise ExperimentError("checkpoint output shape does not match dataset targets")
    if not np.array_equal(np.asarray(axes), ds.axes):
        raise ExperimentError("checkpoint and dataset axis tables differ")


def error_summary(errors: np.ndarray) -> dict:
    per_sample = errors.mean(axis=1)
    return {
        "n_samples": int(len(per_sample)),
        "mean": float(per_sample.mean()),
        "median": float(np.median(per_sample)),
        "p90": float(np.percentile(per_sample, 90)),
    }


# --- tuning -----------------------------------------------------------------


@dataclass
class TuneRun:
    """One seeded tuning experiment."""

    seed: int
    variant: str
    mode: str
    spec: CostSpec
    init_latent: np.ndarray
    result: TuneResult
    provider: object
    initial_report: ErrorReport
    final_report: ErrorReport
    target_latent: np.ndarray | None = None
    hidden_params: beamsim.MachineParams | None = None
    tracking: TuneResult | None = None
    info: dict = field(default_factory=dict)

    @property
    def static_cost(self) -> float:
        return self.result.final_cost

    @property
    def tracking_ratio(self) -> float | None:
        if self.tracking is None:
            return None
        w = self.tracking.windowed_costs[self.tracking.window - 1 :]
        return float(w.max() / max(self.static_cost, 1e-12))

    def summary(self) -> dict:
        r = self.result
        out = {
            "seed": self.seed,
            "variant": self.variant,
            "mode": self.mode,
            "latent_dim": int(len(self.init_latent)),
            "steps_run": int(len(r.costs)),
            "steps_to_threshold": r.steps_to_threshold,
            "stuck": bool(r.stuck),
            "initial_cost": float(r.costs[0]),
            "final_cost": r.final_cost,
            "below_threshold": bool(r.final_cost < self.info.get("threshold", 0.05)),
            "measured_error_initial": self.initial_report.measured_mean,
            "measured_error_final": self.final_report.measured_mean,
            "unseen_error_initial": self.initial_report.unseen_mean,
            "unseen_error_final": self.final_report.unseen_mean,
            "init_latent": [float(v) for v in self.init_latent],
            "final_latent": [float(v) for v in r.final_latent],
            "weights_checksum": r.weights_checksum,
        }
        if self.target_latent is not None:
            out["target_latent"] = [float(v) for v in self.target_latent]
        if self.hidden_params is not None:
            out["hidden_params"] = dict(zip(beamsim.PARAM_NAMES, map(float, self.hidden_params.as_array())))
        if self.tracking is not None:
            out["tracking_steps"] = int(len(self.tracking.costs))
            out["tracking_max_windowed_cost"] = float(self.tracking.windowed_costs[self.tracking.window - 1 :].max())
            out["tracking_ratio"] = self.tracking_ratio
        return out


def pick_latents(pool: np.ndarray, seed: int, init: str, box: LatentBox, center) -> tuple[np.ndarray, np.ndarray]:
    """``(target, init_latent)`` for a seed. ``pool`` holds encoded held-out samples."""
    rng = np.random.default_rng([seed, 7])
    n = len(pool)
    it = int(rng.integers(n))
    target = pool[it]
    if init == "centroid":
        start = np.asarray(center, dtype=np.float64)
    elif init == "corner":
        start = box.corner(0.9 * rng.choice([-1.0, 1.0], len(target)))
    elif init == "random":
        if n < 2:
            raise ExperimentError("random init needs at least two held-out latents")
        j = int(rng.integers(n - 1))
        start = pool[j + (j >= it)]
    else:
        raise ExperimentError(f"unknown init {init!r}")
    return target, start


def encoded_pool(net: Network, ds: Dataset) -> np.ndarray:
    """Encoded held-out samples (all samples when the split has no test part)."""
    img, sc, _ = ds.split(True)
    if len(img) == 0:
        img, sc = ds.images, ds.scalars
    return np.concatenate([net.encode(img[i : i + 256], sc[i : i + 256]) for i in range(0, len(img), 256)])


def run_tuning(
    doc: dict,
    net: Network,
    axes: np.ndarray,
    stations,
    pool: np.ndarray,
    seed: int,
    spec: CostSpec,
    variant: str = "cost",
) -> TuneRun:
    """Seeded tuning run in the configured mode (manufactured or simulated)."""
    tcfg = doc.get("tune", {})
    mode = tcfg.get("mode", "manufactured")
    settings = TuneSettings.from_dict(tcfg)
    L = net.arch.latent_dim
    es_cfg = es_config({**DEFAULT_ES, **doc.get("es", {})}, L)
    box = LatentBox.of(net)
    n_steps = int(tcfg.get("n_steps", 2000))
    target, start = pick_latents(pool, seed, tcfg.get("init", "centroid"), box, net.latent_center)
    drift_cfg = tcfg.get("drift")
    measured = spec.measured_channels(stations)
    hidden = None

    if mode == "manufactured":
        if drift_cfg:
            raise beamsim.ConfigError("tune.drift requires simulated mode")
        provider = ManufacturedProvider(net, target, spec, stations)
    else:
        sim = sim_config(doc)
        hseed = TUNE_SEED_OFFSET + seed
        hidden = draw_params(sim, hseed)
        provider = SimulatedProvider(sim, hidden, hseed, axes, spec, noise_level=float(tcfg.get("noise_level", 0.0)))
        target = None
    truth = provider.truth(0.0)

    drift = None
    if drift_cfg:
        drift = Drift(drift_cfg["parameter"], float(drift_cfg["amplitude"]), float(drift_cfg["period"]))
        if drift.parameter not in beamsim.PARAM_NAMES:
            raise beamsim.ConfigError(f"unknown drift parameter {drift.parameter!r}")
    warm = int(drift_cfg.get("warm_start_steps", 0)) if drift_cfg else 0

    def moving():
        return SimulatedProvider(
            provider.sim,
            hidden,
            provider.seed,
            axes,
            spec,
            drift=drift,
            update_every=float(drift_cfg.get("update_every", 0.0)),
            noise_level=provider.noise_level,
        )

    tracking = None
    if drift is None:
        stop = bool(tcfg.get("stop_on_success", False))
        result = tune(net, provider, spec, es_cfg, start, n_steps, stations, settings, box, stop_on_success=stop)
    elif warm == 0:
        # no static stage: the drifting run is the only result
        result = tune(net, moving(), spec, es_cfg, start, n_steps, stations, settings, box)
    else:
        # static warm start, then track the drifting machine from the converged latent
        result = tune(net, provider, spec, es_cfg, start, warm, stations, settings, box)
        tracking = tune(net, moving(), spec, es_cfg, result.final_latent, n_steps, stations, settings, box)

    return TuneRun(
        seed=seed,
        variant=variant,
        mode=mode,
        spec=spec,
        init_latent=np.asarray(start, dtype=np.float64),
        result=result,
        provider=provider,
        initial_report=evaluate_unseen(net.decode(start), truth, measured),
        final_report=evaluate_unseen(net.decode(result.final_latent), truth, measured),
        target_latent=None if target is None else np.asarray(target, dtype=np.float64),
        hidden_params=hidden,
        tracking=tracking,
        info={"threshold": settings.threshold, "es": {"dt": es_cfg.dt, "window": es_cfg.period_steps()}},
    )


def aggregate(runs: list[TuneRun]) -> dict:
    """Batch statistics over tuning runs of one variant."""
    steps = [r.result.steps_to_threshold for r in runs]
    reached = [s for s in steps if s is not None]
    finite = np.array([np.inf if s is None else s for s in steps], dtype=np.float64)
    improved = [r.final_report.unseen_mean < r.initial_report.unseen_mean for r in runs]
    return {
        "n_runs": len(runs),
        "stuck_fraction": float(np.mean([r.result.stuck for r in runs])) if runs else float("nan"),
        "success_fraction": len(reached) / len(runs) if runs else float("nan"),
        # None when fewer than half the runs reached the threshold
        "median_steps_to_threshold": (float(np.median(finite)) if np.isfinite(np.median(finite)) else None) if runs else None,
        "unseen_improved_fraction": float(np.mean(improved)) if runs else float("nan"),
    }

