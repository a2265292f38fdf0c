"""``latent-scope`` command line: datagen, train, tune and eval.

All commands read one JSON config and write into one output directory
(``--out`` or the config's ``output_dir``)::

    dataset.lspt                    datagen
    model_L{d}_s{seed}.lspt         train, one per latent dim and seed
    history_L{d}_s{seed}.csv/.png
    eval/                           eval
    tune/L{d}/{variant}/seed_{s}/   tune, plus tune/summary.csv and aggregate.json

Every directory written gets a copy of the resolved config. Exit status is
0 on success, 2 for configuration / input errors and 3 for numeric failures;
errors are reported on stderr as a single ``latent-scope-error`` line.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import beamsim, esopt, plotting
from .beamsim import CHANNEL_ZE, N_CHANNELS
from .config import ConfigValidationError, load_config
from .experiments import (
    ExperimentError,
    aggregate,
    check_checkpoint,
    cost_variants,
    encoded_pool,
    error_summary,
    latent_dims,
    run_tuning,
    sample_errors,
    train_model,
)
from .io import ContainerError, render_pgm, write_csv
from .latentune import CostSpecError
from .phasenet import ShapeError, TrainingDivergedError
from .pipeline import _map, generate_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, sim_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def parse_seeds(text: str | None) -> list[int] | None:
    """``"a..b"`` (inclusive) or a single integer."""
    if text is None:
        return None
    m = re.fullmatch(r"\s*(-?\d+)\s*(?:\.\.\s*(-?\d+)\s*)?", text)
    if not m:
        raise UsageError(f"--seeds expects 'a..b' or an integer, got {text!r}")
    a = int(m.group(1))
    b = int(m.group(2)) if m.group(2) is not None else a
    if b < a:
        raise UsageError("--seeds range is empty")
    return list(range(a, b + 1))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Resolved config plus output-directory helpers for one command."""

    def __init__(self, args):
        self.doc = load_config(args.config)
        out = args.out or self.doc.get("output_dir") or "."
        self.out = Path(out)
        self.doc = {**self.doc, "output_dir": str(out)}
        self.seeds = parse_seeds(args.seeds)

    def dir(self, *parts) -> Path:
        d = self.out.joinpath(*parts)
        d.mkdir(parents=True, exist_ok=True)
        _dump(d / "config.json", self.doc)
        return d

    def seed_list(self, key: str) -> list[int]:
        return self.seeds if self.seeds is not None else [int(self.doc.get("seeds", {}).get(key, 0))]

    def dataset(self):
        path = self.out / "dataset.lspt"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run datagen first")
        return load_dataset(path)

    def checkpoint(self, latent_dim: int, seed: int):
        path = self.out / f"model_L{latent_dim}_s{seed}.lspt"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run train first")
        return load_checkpoint(path)


# --- commands -----------------------------------------------------------------


def cmd_datagen(run: Run) -> dict:
    seeds = run.seed_list("data")
    if len(seeds) != 1:
        raise UsageError("datagen takes a single data seed")
    doc = run.doc
    sim = sim_config(doc)
    t0 = time.perf_counter()
    ds = generate_dataset(doc, base_seed=seeds[0])
    out = run.dir()
    names = beamsim.station_names(sim.lattice)
    save_dataset(out / "dataset.lspt", ds, sim.stations, {"data_seed": seeds[0], "station_names": names})
    rows = []
    for k, (sid, name) in enumerate(zip(sim.stations, names)):
        grids = ds.targets[:, k * N_CHANNELS : (k + 1) * N_CHANNELS].astype(np.float64)
        sums = grids.sum(axis=(2, 3))
        rows.append([sid, name, float(np.abs(sums - 1).max()), float(grids.max(axis=(2, 3)).mean()), float((grids[:, CHANNEL_ZE] > 0).mean())])
    write_csv(out / "grid_stats.csv", ["station_id", "name", "max_sum_deviation", "mean_peak_bin", "zE_occupancy"], rows)
    if len(ds):
        plotting.plot_lps(ds.targets[0].astype(np.float64), sim.stations, names, out / "sample0_lps.png")
    summary = {
        "n_samples": len(ds),
        "n_train": int((~ds.is_test).sum()),
        "n_test": int(ds.is_test.sum()),
        "grid_size": sim.G,
        "stations": dict(zip(map(str, sim.stations), names)),
        "data_seed": seeds[0],
    }
    _dump(out / "datagen_summary.json", summary)
    print(f"datagen: {len(ds)} samples ({summary['n_train']} train / {summary['n_test']} test) in {time.perf_counter() - t0:.1f} s")
    for r in rows:
        print(f"  station {r[0]} {r[1]:>6}: max|sum-1| {r[2]:.2e}  mean peak bin {r[3]:.4f}  zE occupancy {r[4]:.3f}")
    return summary


def cmd_train(run: Run) -> dict:
    ds, stations, _ = run.dataset()
    out = run.dir()
    results = {}
    for L in latent_dims(run.doc):
        for seed in run.seed_list("train"):
            tag = f"L{L}_s{seed}"
            t0 = time.perf_counter()
            try:
                net, hist = train_model(run.doc, ds, stations, L, seed)
            except TrainingDivergedError as exc:
                if exc.checkpoint is not None:
                    save_checkpoint(out / f"model_{tag}_diverged.lspt", exc.checkpoint, ds.axes, ds.input_axes, stations, {"diverged": True})
                raise
            meta = {"latent_dim": L, "train_seed": seed, "epochs": len(hist)}
            save_checkpoint(out / f"model_{tag}.lspt", net, ds.axes, ds.input_axes, stations, meta)
            write_csv(out / f"history_{tag}.csv", ["epoch", "train_loss", "test_loss"], [[h["epoch"], h["train_loss"], h["test_loss"]] for h in hist])
            plotting.plot_history(hist, out / f"history_{tag}.png", title=f"N_L={L}, seed {seed}")
            results[tag] = {"final_train_loss": hist[-1]["train_loss"], "final_test_loss": hist[-1]["test_loss"]}
            print(f"train {tag}: train {hist[-1]['train_loss']:.4f} test {hist[-1]['test_loss']:.4f} ({time.perf_counter() - t0:.1f} s)")
    _dump(out / "train_summary.json", results)
    return results


def cmd_eval(run: Run, split: str = "test") -> dict:
    ds, stations, _ = run.dataset()
    img, sc, tg = ds.split(split == "test")
    if len(img) == 0:
        raise ExperimentError(f"dataset has no {split} samples")
    checkpoints = []
    for L in latent_dims(run.doc):
        for seed in run.seed_list("train"):
            net, axes, _, _, _ = run.checkpoint(L, seed)
            check_checkpoint(net, axes, ds)
            checkpoints.append((L, seed, net))
    out = run.dir("eval")
    rows, hist = [], {}
    n_ch = tg.shape[1]
    for L, seed, net in checkpoints:
        err = sample_errors(net, img, sc, tg)
        tag = f"L{L}_s{seed}"
        header = ["sample", "mean"] + [f"c{c:03d}" for c in range(n_ch)]
        write_csv(out / f"errors_{tag}.csv", header, [[i, float(e.mean()), *map(float, e)] for i, e in enumerate(err)])
        s = error_summary(err)
        rows.append([L, seed, split, s["n_samples"], s["mean"], s["median"], s["p90"]])
        hist[f"N_L={L} s{seed}"] = err.mean(axis=1)
        print(f"eval {tag} ({split}): median {s['median']:.4f}  p90 {s['p90']:.4f}")
    write_csv(out / "error_stats.csv", ["latent_dim", "seed", "split", "n_samples", "mean", "median", "p90"], rows)
    plotting.plot_error_hist(hist, out / "error_hist.png")
    return {"rows": rows}


def _write_tune_run(d: Path, tr, frames, stations, net) -> None:
    r = tr.result
    wc = r.windowed_costs
    write_csv(d / "costs.csv", ["step", "t", "cost", "windowed_cost"], [[i, r.t[i], r.costs[i], wc[i]] for i in range(len(r.costs))])
    L = r.latents.shape[1]
    write_csv(d / "latents.csv", ["step"] + [f"z{j + 1}" for j in range(L)], [[i, *r.latents[i]] for i in range(len(r.latents))])
    idx = {s: k for k, s in enumerate(stations)}
    truth = tr.provider.truth(0.0)
    for s, _ in tr.spec.tcav_terms:
        ch = idx[s] * N_CHANNELS + CHANNEL_ZE
        (d / f"measured_st{s}.pgm").write_bytes(render_pgm(truth[ch]))
        for f in frames:
            if 0 <= f < len(r.latents):
                (d / f"pred_st{s}_step{f:06d}.pgm").write_bytes(render_pgm(net.decode(r.latents[f])[ch]))
    if tr.tracking is not None:
        t = tr.tracking
        write_csv(d / "tracking_costs.csv", ["step", "t", "cost", "windowed_cost"], [[i, t.t[i], t.costs[i], w] for i, w in enumerate(t.windowed_costs)])
    plotting.plot_tune(r.t, r.costs, wc, r.latents, d / "tune.png", tr.info.get("threshold"), tr.target_latent)
    _dump(d / "summary.json", tr.summary())


def cmd_tune(run: Run) -> dict:
    doc = run.doc
    tcfg = doc.get("tune", {})
    frames = [int(f) for f in tcfg.get("frames", [])]
    variants = cost_variants(doc)
    tune_seeds = run.seed_list("tune")
    train_seed = int(doc.get("seeds", {}).get("train", 0))
    ds = None
    if tcfg.get("init", "centroid") != "centroid" or tcfg.get("mode", "manufactured") == "manufactured":
        ds, _, _ = run.dataset()
    table, agg = [], {}
    for L in latent_dims(doc):
        net, axes, _, stations, _ = run.checkpoint(L, train_seed)
        if net.arch.latent_dim != L:
            raise ExperimentError(f"checkpoint latent dim {net.arch.latent_dim} != configured {L}")
        pool = encoded_pool(net, ds) if ds is not None else net.latent_center[None]
        for name, spec in variants.items():
            runs = _map(lambda s: run_tuning(doc, net, axes, stations, pool, s, spec, name), tune_seeds)
            for tr in runs:
                _write_tune_run(run.dir("tune", f"L{L}", name, f"seed_{tr.seed}"), tr, frames, stations, net)
                s = tr.summary()
                table.append(
                    [L, name, tr.seed, s["steps_run"], "" if s["steps_to_threshold"] is None else s["steps_to_threshold"], int(s["stuck"]),
                     s["initial_cost"], s["final_cost"], s["unseen_error_initial"], s["unseen_error_final"], s.get("tracking_ratio", "")]
                )
            a = aggregate(runs)
            agg[f"L{L}/{name}"] = a
            print(
                f"tune N_L={L} {name}: {a['n_runs']} runs, stuck {a['stuck_fraction']:.2f}, "
                f"success {a['success_fraction']:.2f}, median steps {a['median_steps_to_threshold']}"
            )
    out = run.dir("tune")
    header = ["latent_dim", "variant", "seed", "steps_run", "steps_to_threshold", "stuck", "initial_cost", "final_cost",
              "unseen_error_initial", "unseen_error_final", "tracking_ratio"]
    write_csv(out / "summary.csv", header, table)
    _dump(out / "aggregate.json", agg)
    return agg


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "tune": cmd_tune, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-scope", description="Beam phase-space surrogate: data, training, latent tuning, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("datagen", "simulate a dataset"),
        ("train", "train one network per latent dim and seed"),
        ("tune", "extremum-seeking latent tuning"),
        ("eval", "per-sample error statistics of trained checkpoints"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        sp.add_argument("--seeds", default=None, help="seed or inclusive range a..b")
        if name == "eval":
            sp.add_argument("--split", choices=("test", "train"), default="test")
    return p


def _fail(code: int, kind: str, msg: str, path: str = "") -> int:
    extra = f" path={path}" if path else ""
    print(f"latent-scope-error code={code} kind={kind}{extra} msg={json.dumps(str(msg))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        if args.command == "eval":
            cmd_eval(run, args.split)
        else:
            COMMANDS[args.command](run)
    except ConfigValidationError as exc:
        return _fail(EXIT_CONFIG, "config", exc, exc.path)
    except (UsageError, beamsim.ConfigError, CostSpecError, ExperimentError, ShapeError, esopt.ESConfigError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (FileNotFoundError, ContainerError) as exc:
        return _fail(EXIT_CONFIG, "input", exc)
    except (TrainingDivergedError, esopt.ESEvaluationError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except ValueError as exc:
        # remaining validation failures from the library (bad values in config sections)
        return _fail(EXIT_CONFIG, "config", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
