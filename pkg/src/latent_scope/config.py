"""Experiment configuration: JSON documents validated against a strict schema."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

_num = {"type": "number"}
_int = {"type": "integer"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_intlist = {"type": "array", "items": _int}


def _obj(props: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(required),
        "additionalProperties": False,
    }


_element = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["drift", "quad", "rf", "chicane", "wake", "marker"]},
        "L": _num,
        "k1": _num,
        "V": _num,
        "phase": _num,
        "wavenumber": _num,
        "section": {"type": ["integer", "null"]},
        "R56": _num,
        "T566": _num,
        "kappa": _num,
        "station_id": _int,
        "name": {"type": "string"},
    },
    "additionalProperties": False,
}

_term = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_cost = _obj(
    {
        "tcav_terms": {"type": "array", "items": _term},
        "spectrum_terms": {"type": "array", "items": _term},
    }
)

SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "grid_size": {"type": "integer", "minimum": 2},
        "lattice": {"type": "array", "items": _element, "minItems": 1},
        "generator": _obj(
            {
                "n_particles": {"type": "integer", "minimum": 1},
                "beam_seed": {"type": "integer", "minimum": 0},
                "sigmas": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6},
                "blobs": {
                    "type": "array",
                    "maxItems": 2,
                    "items": _obj(
                        {
                            "fraction": _num,
                            "offset": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6},
                            "scale": {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 6, "maxItems": 6}]},
                        },
                        ["fraction"],
                    ),
                },
            },
            ["n_particles", "sigmas"],
        ),
        "sampling_ranges": _obj(
            {
                n: _pair
                for n in (
                    "x_offset",
                    "y_offset",
                    "charge",
                    "l1_amplitude",
                    "l1_phase",
                    "l2_amplitude",
                    "l2_phase",
                )
            },
            ["x_offset", "y_offset", "charge", "l1_amplitude", "l1_phase", "l2_amplitude", "l2_phase"],
        ),
        "axes": _obj(
            {
                "pilot_runs": {"type": "integer", "minimum": 1},
                "percentiles": _pair,
                "margin": _num,
            }
        ),
        "dataset": _obj(
            {
                "n_train": {"type": "integer", "minimum": 0},
                "n_test": {"type": "integer", "minimum": 0},
            },
            ["n_train", "n_test"],
        ),
        "network": _obj(
            {
                "latent_dim": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}]},
                "kernel": _int,
                "enc_conv": _intlist,
                "enc_dense": _intlist,
                "merge_dense": _intlist,
                "dec_dense": _intlist,
                "dec_base": _int,
                "dec_base_channels": _int,
                "dec_conv": _intlist,
                "leak": _num,
                "dtype": {"enum": ["float32", "float64"]},
            },
            ["latent_dim"],
        ),
        "train": _obj(
            {
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": _num,
                "beta2": _num,
                "eps": _num,
                "loss": {"enum": ["mae"]},
            }
        ),
        "es": _obj(
            {
                "omega": {"type": "number", "exclusiveMinimum": 0},
                "k": {"type": "number", "minimum": 0},
                "alpha": {"type": "number", "minimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "phase_step": {"type": "number", "exclusiveMinimum": 0},
                "dither_kind": {"enum": ["cosine", "square"]},
                "normalize": {"type": "boolean"},
                "ratios": {"type": "array", "items": _num},
            },
            ["omega", "k", "alpha"],
        ),
        "cost": _cost,
        "cost_variants": {"type": "object", "additionalProperties": _cost, "minProperties": 1},
        "tune": _obj(
            {
                "mode": {"enum": ["manufactured", "simulated"]},
                "n_steps": {"type": "integer", "minimum": 1},
                "init": {"enum": ["centroid", "corner", "random"]},
                "threshold": _num,
                "stuck_window": {"type": "integer", "minimum": 1},
                "stuck_tolerance": _num,
                "stuck_windows": {"type": "integer", "minimum": 1},
                "stop_on_success": {"type": "boolean"},
                "noise_level": {"type": "number", "minimum": 0},
                "frames": _intlist,
                "drift": _obj(
                    {
                        "parameter": {"type": "string"},
                        "amplitude": _num,
                        "period": {"type": "number", "exclusiveMinimum": 0},
                        "update_every": {"type": "number", "minimum": 0},
                        "warm_start_steps": {"type": "integer", "minimum": 0},
                    },
                    ["parameter", "amplitude", "period"],
                ),
            }
        ),
        "seeds": _obj({"data": _int, "train": _int, "tune": _int}),
        "output_dir": {"type": "string"},
    },
    ["lattice", "generator", "sampling_ranges"],
)


class ConfigValidationError(ValueError):
    def __init__(self, msg: str, path: str = ""):
        super().__init__(msg)
        self.path = path


def validate(doc: dict) -> dict:
    """Raise :class:`ConfigValidationError` (with a JSON path) on schema failure."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigValidationError(exc.message, path) from None
    return doc


def load_config(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"invalid JSON: {exc}", "<root>") from None
    if not isinstance(doc, dict):
        raise ConfigValidationError("config must be a JSON object", "<root>")
    return validate(doc)


SHIPPED = ("fig6_errors", "fig8_local_vs_global", "fig9_10_dims", "fig11_unseen")


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("latent_scope") / "configs" / f"{name}.json"))


def load_shipped(name: str) -> dict:
    return load_config(shipped_config_path(name))


def merged(doc: dict, **overrides) -> dict:
    """Deep copy of ``doc`` with top-level sections updated key by key."""
    out = copy.deepcopy(doc)
    for section, values in overrides.items():
        if isinstance(values, dict) and isinstance(out.get(section), dict):
            out[section].update(values)
        else:
            out[section] = values
    return validate(out)
