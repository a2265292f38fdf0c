"""Shared fixtures: small configs and a lazily built desk-scale model zoo.

The desk zoo (dataset plus one checkpoint per latent dim and seed) is built on
first use and kept for the session. Setting ``LATENT_SCOPE_TEST_CACHE`` to a
directory reuses artifacts across sessions.
"""

from __future__ import annotations

import os
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from latent_scope.config import load_shipped, merged
from latent_scope.experiments import encoded_pool, train_model
from latent_scope.pipeline import generate_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, sim_config

TINY_NETWORK = {
    "enc_conv": [4, 8],
    "enc_dense": [16],
    "merge_dense": [16],
    "dec_dense": [16],
    "dec_base": 2,
    "dec_base_channels": 8,
    "dec_conv": [8],
}

DESK_NETWORK = {"enc_conv": [8, 16], "dec_conv": [16], "dec_base": 4, "dec_base_channels": 32}


def tiny_doc(name: str = "fig8_local_vs_global", **overrides) -> dict:
    """A shipped config shrunk to G=8, 2000 particles and 50 samples."""
    base = load_shipped(name)
    doc = merged(
        base,
        grid_size=8,
        generator={"n_particles": 2000},
        axes={"pilot_runs": 10},
        dataset={"n_train": 40, "n_test": 10},
        network={**TINY_NETWORK, "latent_dim": 2},
        train={"epochs": 2},
        tune={"n_steps": 300, "frames": [0, 100]},
    )
    return merged(doc, **overrides) if overrides else doc


def desk_doc(name: str = "fig6_errors", **overrides) -> dict:
    """A shipped config at desk scale: G=16, 1500 train / 200 test samples."""
    doc = merged(
        load_shipped(name),
        grid_size=16,
        network=DESK_NETWORK,
        dataset={"n_train": 1500, "n_test": 200},
    )
    return merged(doc, **overrides) if overrides else doc


class DeskZoo:
    """Desk dataset and trained checkpoints, built on demand and cached on disk."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.doc = desk_doc()
        self._lock = threading.Lock()
        self._ds = None
        self._models = {}
        self.train_seconds = {}

    @property
    def dataset(self):
        with self._lock:
            if self._ds is None:
                path = self.root / "desk.lspt"
                if not path.exists():
                    ds = generate_dataset(self.doc)
                    save_dataset(path, ds, sim_config(self.doc).stations)
                self._ds = load_dataset(path)
            return self._ds

    def model(self, latent_dim: int, seed: int):
        """``(net, axes, stations)``; trains and saves on first request."""
        key = (latent_dim, seed)
        if key in self._models:
            return self._models[key]
        ds, stations, _ = self.dataset
        path = self.root / f"desk_L{latent_dim}_s{seed}.lspt"
        if not path.exists():
            t0 = time.perf_counter()
            net, _ = train_model(self.doc, ds, stations, latent_dim, seed)
            save_checkpoint(path, net, ds.axes, ds.input_axes, stations, {"train_seconds": time.perf_counter() - t0})
        net, axes, _, st, meta = load_checkpoint(path)
        self.train_seconds[key] = float(meta.get("train_seconds", float("nan")))
        self._models[key] = (net, axes, st)
        return self._models[key]

    def pool(self, latent_dim: int, seed: int) -> np.ndarray:
        net, _, _ = self.model(latent_dim, seed)
        return encoded_pool(net, self.dataset[0])


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskZoo:
    cache = os.environ.get("LATENT_SCOPE_TEST_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("desk")
    return DeskZoo(root)


# --- acceptance report ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    """Store and print one criterion line; returns ``ok`` for the assertion."""
    line = f"[PRIMARY] criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
