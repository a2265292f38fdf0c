"""Dataset generation and checkpoint persistence on top of the LSPT container."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import beamsim
from .io import entry_json, json_entry, read_container, write_container
from .phasenet import Dataset, Network, NetworkArch

INPUT_STATION = -1
PILOT_SEED_OFFSET = 1_000_000


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("LATENT_SCOPE_THREADS", "1")))
    except ValueError:
        return 1


def sim_config(doc: dict) -> beamsim.SimConfig:
    return beamsim.SimConfig.from_dict(doc)


def _map(fn, items):
    workers = n_workers()
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def sample_seed(base: int, i: int) -> int:
    return base + i


def draw_params(cfg: beamsim.SimConfig, seed: int) -> beamsim.MachineParams:
    return cfg.sample_params(np.random.default_rng([seed, 0]))


def run_sample(cfg: beamsim.SimConfig, params: beamsim.MachineParams, seed: int):
    beam = beamsim.sample_input_beam(params, cfg.generator, [seed, 1])
    snaps = beamsim.track(cfg.lattice, beam, params)
    return beam, snaps


def build_axes(doc: dict, base_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Input-beam and per-station axis tables from a pilot batch.

    Pilot machine parameters are drawn from the sampling ranges (not fixed at
    nominal) so that off-nominal samples stay inside the frozen axes.
    """
    cfg = sim_config(doc)
    axes = doc.get("axes", {})
    n_pilot = int(axes.get("pilot_runs", 100))
    pct = tuple(axes.get("percentiles", (1.0, 99.0)))
    margin = float(axes.get("margin", 0.1))

    def pilot(i):
        seed = sample_seed(base_seed + PILOT_SEED_OFFSET, i)
        beam, snaps = run_sample(cfg, draw_params(cfg, seed), seed)
        return {INPUT_STATION: beam, **snaps}

    runs = _map(pilot, range(n_pilot))
    table = beamsim.axis_table(runs, pct, margin)
    return table[0], table[1:]


def simulate_projections(cfg: beamsim.SimConfig, params, seed: int, input_axes, axes):
    """``(input_image, flat_targets)`` for one machine setting and beam seed."""
    beam, snaps = run_sample(cfg, params, seed)
    image = beamsim.project(beam, (0, 2), input_axes[[0, 2]], cfg.G)
    targets = beamsim.all_projections(snaps, axes, cfg.G).flat()
    return image, targets


def generate_dataset(doc: dict, base_seed: int | None = None, n_train=None, n_test=None) -> Dataset:
    cfg = sim_config(doc)
    base_seed = doc.get("seeds", {}).get("data", 0) if base_seed is None else base_seed
    ds = doc.get("dataset", {})
    n_train = ds.get("n_train", 3000) if n_train is None else n_train
    n_test = ds.get("n_test", 300) if n_test is None else n_test
    n = n_train + n_test
    input_axes, axes = build_axes(doc, base_seed)

    def one(i):
        seed = sample_seed(base_seed, i)
        params = draw_params(cfg, seed)
        img, tgt = simulate_projections(cfg, params, seed, input_axes, axes)
        return img, tgt, params.as_array()

    rows = _map(one, range(n))
    G = cfg.G
    n_ch = 15 * len(cfg.stations)
    images = np.array([r[0] for r in rows]).reshape(n, G, G)
    targets = np.array([r[1] for r in rows], dtype=np.float32).reshape(n, n_ch, G, G)
    params = np.array([r[2] for r in rows]).reshape(n, 7)
    return Dataset(
        images=images,
        scalars=params.copy(),
        targets=targets,
        is_test=np.arange(n) >= n_train,
        axes=axes,
        input_axes=input_axes,
        params=params,
        seeds=np.array([sample_seed(base_seed, i) for i in range(n)], dtype=np.float64),
    )


def save_dataset(path: str | Path, ds: Dataset, stations, meta: dict | None = None) -> None:
    write_container(
        path,
        {
            "inputs": ds.images.astype(np.float64),
            "scalars": ds.scalars.astype(np.float64),
            "targets": ds.targets.astype(np.float32),
            "is_test": ds.is_test.astype(np.float64),
            "axes": ds.axes,
            "input_axes": ds.input_axes,
            "params": ds.params,
            "seeds": ds.seeds,
            "stations": np.asarray(stations, dtype=np.float64),
            "meta": json_entry(meta or {}),
        },
    )


def load_dataset(path: str | Path) -> tuple[Dataset, list[int], dict]:
    e = read_container(path)
    ds = Dataset(
        images=e["inputs"],
        scalars=e["scalars"],
        targets=e["targets"],
        is_test=e["is_test"].astype(bool),
        axes=e["axes"],
        input_axes=e["input_axes"],
        params=e["params"],
        seeds=e["seeds"],
    )
    return ds, [int(s) for s in e["stations"]], entry_json(e["meta"])


def network_arch(doc: dict, latent_dim: int, n_stations: int, G: int) -> NetworkArch:
    net = {k: v for k, v in doc.get("network", {}).items() if k not in ("latent_dim", "dtype")}
    return NetworkArch(G=G, latent_dim=latent_dim, n_stations=n_stations, **net)


def save_checkpoint(path: str | Path, net: Network, axes, input_axes, stations, meta: dict | None = None) -> None:
    write_container(
        path,
        {
            "arch": json_entry(net.arch.to_dict()),
            "dtype": json_entry(str(net.dtype)),
            "params": net.params,
            "scalar_mean": net.scalar_mean,
            "scalar_std": net.scalar_std,
            "latent_center": net.latent_center,
            "latent_basis": net.latent_basis,
            "latent_half": net.latent_half,
            "axes": np.asarray(axes, dtype=np.float64),
            "input_axes": np.asarray(input_axes, dtype=np.float64),
            "stations": np.asarray(stations, dtype=np.float64),
            "meta": json_entry(meta or {}),
        },
    )


def load_checkpoint(path: str | Path):
    """Returns ``(net, axes, input_axes, stations, meta)``."""
    e = read_container(path)
    arch = NetworkArch.from_dict(entry_json(e["arch"]))
    net = Network(arch, e["params"], dtype=np.dtype(entry_json(e["dtype"])))
    for name in ("scalar_mean", "scalar_std", "latent_center", "latent_basis", "latent_half"):
        setattr(net, name, e[name].astype(np.float64))
    return net, e["axes"], e["input_axes"], [int(s) for s in e["stations"]], entry_json(e["meta"])
