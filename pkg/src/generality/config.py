"""Experiment configuration: YAML schema, validation, and content digest.

A config names one experiment kind, the datasets it runs over, the
architecture, the optimizer recipe, and the seeds. validate_config
normalizes (every default made explicit) and returns field-level error
messages, so the content digest is stable under key reordering and
omitted defaults. The digest excludes output_dir (where results land
does not change what is computed).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml

from .optimizer import OptimConfig, Schedule
from .synthetic import FAMILIES

EXPERIMENTS = ("train-base", "retrain", "curve", "class-gen", "subsample", "matrix")
ARCHES = ("char3conv", "img5conv")
PRECISIONS = ("f32", "f64")

# dataset roles each experiment expects under the data: mapping
ROLES = {
    "train-base": ("train",),
    "retrain": ("base", "retrain"),
    "curve": ("base", "retrain"),
    "class-gen": ("dataset",),
    "subsample": ("dataset",),
    "matrix": (),
}

DEFAULT_OPTIM = {
    "lr0": 0.01,
    "schedule": {"kind": "multiplicative", "gamma": 0.998},
    "momentum": {"lo": 0.5, "hi": 1.0, "ramp_epochs": 100},
    "l1": 0.0001,
    "l2": 0.0001,
    "max_epochs": 200,
    "batch_size": 500,
    "early_stop": {"enabled": True, "patience": 20},
    "rmsprop": {"rho": 0.9, "eps": 1e-8},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    normalized, errors = validate_config(raw, base_dir=path.parent)
    if errors:
        raise ConfigError(errors)
    return normalized


def validate_config(raw: dict, base_dir=None) -> tuple[dict, list[str]]:
    """Normalize and validate; returns (normalized config, error list)."""
    errors: list[str] = []
    base_dir = Path(base_dir) if base_dir else Path(".")
    cfg = dict(raw)

    experiment = cfg.get("experiment")
    if experiment not in EXPERIMENTS:
        errors.append(f"experiment: must be one of {list(EXPERIMENTS)}, got {experiment!r}")
        experiment = None

    arch = cfg.setdefault("arch", "char3conv")
    if arch not in ARCHES:
        errors.append(f"arch: must be one of {list(ARCHES)}, got {arch!r}")

    precision = cfg.setdefault("precision", "f64")
    if precision not in PRECISIONS:
        errors.append(f"precision: must be one of {list(PRECISIONS)}, got {precision!r}")

    seeds = cfg.setdefault("seeds", [1, 2, 3])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) for s in seeds)):
        errors.append(f"seeds: must be a non-empty list of integers, got {seeds!r}")

    cfg.setdefault("output_dir", None)
    cfg["optim"] = _normalize_optim(cfg.get("optim") or {}, errors)

    data = cfg.setdefault("data", {})
    if not isinstance(data, dict):
        errors.append("data: must be a mapping of role -> dataset reference")
        data = {}
        cfg["data"] = data
    if experiment:
        for role in ROLES[experiment]:
            if role not in data:
                errors.append(f"data.{role}: required for the {experiment} experiment")
        for role, ref in list(data.items()):
            if role == "datasets":
                continue
            data[role] = _normalize_dataset(ref, f"data.{role}", base_dir, errors)
        if experiment == "matrix":
            refs = data.get("datasets")
            if not isinstance(refs, list) or len(refs) < 2:
                errors.append("data.datasets: matrix needs a list of >= 2 dataset references")
            else:
                data["datasets"] = [
                    _normalize_dataset(r, f"data.datasets[{i}]", base_dir, errors)
                    for i, r in enumerate(refs)]

    if experiment == "retrain":
        fl = cfg.get("free_layers")
        if not isinstance(fl, int) or fl < 0:
            errors.append(f"free_layers: must be an integer >= 0, got {fl!r}")
    if experiment in ("class-gen", "subsample"):
        classes = cfg.get("base_classes")
        if (not isinstance(classes, list) or not classes
                or not all(isinstance(c, int) and c >= 0 for c in classes)):
            errors.append(f"base_classes: must be a non-empty list of class ids, got {classes!r}")
    if experiment == "subsample":
        counts = cfg.setdefault("per_class", [1, 3, 5, 10, 20, 30, 50])
        if (not isinstance(counts, list) or not counts
                or not all(isinstance(p, int) and p >= 1 for p in counts)):
            errors.append(f"per_class: must be a list of integers >= 1, got {counts!r}")

    known = {"experiment", "arch", "precision", "seeds", "output_dir", "optim",
             "data", "free_layers", "base_classes", "per_class"}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown configuration key")
    return cfg, errors


def _normalize_optim(section: dict, errors: list[str]) -> dict:
    if not isinstance(section, dict):
        errors.append("optim: must be a mapping")
        section = {}
    out = json.loads(json.dumps(DEFAULT_OPTIM))
    for key, value in section.items():
        if key not in DEFAULT_OPTIM:
            errors.append(f"optim.{key}: unknown optimizer key")
            continue
        if isinstance(DEFAULT_OPTIM[key], dict):
            if not isinstance(value, dict):
                errors.append(f"optim.{key}: must be a mapping")
                continue
            if key == "schedule":
                out[key] = value  # validated below, shape depends on kind
            else:
                bad = set(value) - set(DEFAULT_OPTIM[key])
                for b in sorted(bad):
                    errors.append(f"optim.{key}.{b}: unknown key")
                out[key] = {**DEFAULT_OPTIM[key], **{k: v for k, v in value.items()
                                                     if k not in bad}}
        else:
            out[key] = value

    sched = out["schedule"]
    kind = sched.get("kind") if isinstance(sched, dict) else None
    if kind == "multiplicative":
        out["schedule"] = {"kind": kind, "gamma": float(sched.get("gamma", 0.998))}
    elif kind == "subtractive":
        out["schedule"] = {"kind": kind, "delta": float(sched.get("delta", 0.0005)),
                           "floor": float(sched.get("floor", 1e-6))}
    elif kind == "piecewise":
        table = sched.get("table")
        if (not isinstance(table, dict) or not table
                or not all(isinstance(k, int) for k in table)):
            errors.append("optim.schedule.table: piecewise needs an {epoch: lr} mapping")
            table = {0: 0.001}
        out["schedule"] = {"kind": kind,
                           "table": sorted([int(k), float(v)] for k, v in table.items())}
    else:
        errors.append(f"optim.schedule.kind: must be multiplicative, subtractive, "
                      f"or piecewise, got {kind!r}")

    for field, check, what in (
            ("lr0", lambda v: isinstance(v, (int, float)) and v > 0, "a number > 0"),
            ("l1", lambda v: isinstance(v, (int, float)) and v >= 0, "a number >= 0"),
            ("l2", lambda v: isinstance(v, (int, float)) and v >= 0, "a number >= 0"),
            ("max_epochs", lambda v: isinstance(v, int) and v >= 0, "an integer >= 0"),
            ("batch_size", lambda v: isinstance(v, int) and v > 0, "an integer > 0")):
        if not check(out[field]):
            errors.append(f"optim.{field}: must be {what}, got {out[field]!r}")

    mom = out["momentum"]
    if not 0 <= mom.get("lo", 0) <= mom.get("hi", 1) <= 1:
        errors.append(f"optim.momentum: need 0 <= lo <= hi <= 1, got {mom}")
    return out


def _normalize_dataset(ref, path: str, base_dir: Path, errors: list[str]) -> dict:
    if not isinstance(ref, dict) or len(ref) != 1 or next(iter(ref)) not in ("synthetic", "idx"):
        errors.append(f"{path}: must be a mapping with exactly one of 'synthetic' or 'idx'")
        return ref if isinstance(ref, dict) else {}
    kind, body = next(iter(ref.items()))
    if not isinstance(body, dict):
        errors.append(f"{path}.{kind}: must be a mapping")
        return ref

    if kind == "synthetic":
        out = {"family": body.get("family"), "train": body.get("train", 512),
               "valid": body.get("valid", 128), "test": body.get("test", 256),
               "seed": body.get("seed", 0)}
        if out["family"] not in FAMILIES:
            errors.append(f"{path}.synthetic.family: must be one of {list(FAMILIES)}, "
                          f"got {out['family']!r}")
        for field in ("train", "valid", "test"):
            if not isinstance(out[field], int) or out[field] <= 0:
                errors.append(f"{path}.synthetic.{field}: must be a positive integer")
        for extra in set(body) - set(out):
            errors.append(f"{path}.synthetic.{extra}: unknown key")
        return {"synthetic": out}

    required = ("train_images", "train_labels", "test_images", "test_labels")
    out = {k: body.get(k) for k in required}
    out["name"] = body.get("name", "idx")
    out["valid_count"] = body.get("valid_count", 0)
    out["split_seed"] = body.get("split_seed", 0)
    for field in required:
        value = out[field]
        if not isinstance(value, str):
            errors.append(f"{path}.idx.{field}: required file path")
        elif not (base_dir / value).expanduser().exists():
            errors.append(f"{path}.idx.{field}: file not found: {base_dir / value}")
    if not isinstance(out["valid_count"], int) or out["valid_count"] < 0:
        errors.append(f"{path}.idx.valid_count: must be an integer >= 0")
    for extra in set(body) - set(out):
        errors.append(f"{path}.idx.{extra}: unknown key")
    return {"idx": out}


def config_digest(normalized: dict) -> str:
    """Content hash over everything that affects results."""
    doc = {k: v for k, v in normalized.items() if k != "output_dir"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def optim_from_config(normalized: dict) -> OptimConfig:
    o = normalized["optim"]
    s = o["schedule"]
    if s["kind"] == "multiplicative":
        schedule = Schedule(kind="multiplicative", gamma=s["gamma"])
    elif s["kind"] == "subtractive":
        schedule = Schedule(kind="subtractive", delta=s["delta"], floor=s["floor"])
    else:
        schedule = Schedule(kind="piecewise", table=tuple(tuple(x) for x in s["table"]))
    return OptimConfig(
        lr0=o["lr0"], schedule=schedule,
        momentum_lo=o["momentum"]["lo"], momentum_hi=o["momentum"]["hi"],
        momentum_ramp_epochs=o["momentum"]["ramp_epochs"],
        l1=o["l1"], l2=o["l2"], max_epochs=o["max_epochs"],
        batch_size=o["batch_size"],
        early_stop=o["early_stop"]["enabled"], patience=o["early_stop"]["patience"],
        rho=o["rmsprop"]["rho"], eps=o["rmsprop"]["eps"])
