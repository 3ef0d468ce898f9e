"""Run configuration: a TOML document with full defaults, strict validation, and
a resolved echo that reproduces the run byte-for-byte when fed back in."""

from __future__ import annotations

import sys
from copy import deepcopy

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import DynamicsConfig, init_dynamics
from .flow import FlowModel, TrainConfig
from .ode import SolverConfig

CONFIG_FORMAT = "permflow-config-v1"

# Network sizes default to the reference conditional-task settings: five layers of
# 200 units for both force nets, three 16-channel conv layers into a width-200
# embedding, time input enabled, batches of 100.
DEFAULTS: dict[str, dict] = {
    "meta": {"format": CONFIG_FORMAT},
    "task": {
        "name": "boxes-cond",  # boxes-cond | bbox
        "d3": False,  # append log-width as a third element feature
    },
    "model": {
        "single_layers": 5,
        "single_hidden": 200,
        "pair_layers": 5,
        "pair_hidden": 200,
        "embed_layers": 3,
        "embed_channels": 16,
        "embed_width": 200,
        "use_time": True,
        "condition_in_single": True,
        "condition_in_pair": True,
        "ablation": "full",
        "image_size": 32,
        "kernel": 3,
        "stride": 2,
        "seed": 0,
    },
    "solver": {
        "rtol": 1e-6,
        "atol": 1e-6,
        "n_steps": 16,
        "t0": 0.0,
        "t1": 1.0,
        "max_nfe": 100000,
    },
    "train": {
        "lambda_l2": 0.01,
        "lambda_l2div": 0.01,
        "lr": 1e-3,
        "batch_size": 100,
        "epochs": 50,
        "patience": 5,
        "seed": 0,
        "grad_mode": "adjoint",
        "ode_mode": "fixed",
        "max_seconds": 0.0,  # 0 disables the wall-clock budget
        "warmup_steps": 0,
    },
    "eval": {
        "samples_per_scene": 50,
        "max_scenes": 100,
        "n_perms": 10,
        "seed": 0,
    },
    "io": {
        "run_name": "run",
        "save_trajectories": False,
    },
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def resolve(user: dict) -> dict:
    """Overlay a parsed TOML document onto the defaults; all problems reported at once."""
    problems: list[str] = []
    out = deepcopy(DEFAULTS)
    for section, values in user.items():
        if section not in DEFAULTS:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(values, dict):
            problems.append(f"section [{section}] must be a table")
            continue
        for key, val in values.items():
            if key not in DEFAULTS[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            want = DEFAULTS[section][key]
            if isinstance(want, bool):
                if not isinstance(val, bool):
                    problems.append(f"{section}.{key} must be a boolean")
                    continue
            elif isinstance(want, int) and not isinstance(val, bool):
                if isinstance(val, float) and val.is_integer():
                    val = int(val)
                if not isinstance(val, int):
                    problems.append(f"{section}.{key} must be an integer")
                    continue
            elif isinstance(want, float):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    problems.append(f"{section}.{key} must be a number")
                    continue
                val = float(val)
            elif isinstance(want, str) and not isinstance(val, str):
                problems.append(f"{section}.{key} must be a string")
                continue
            out[section][key] = val
    problems.extend(_semantic_problems(out))
    if problems:
        raise ConfigError(problems)
    return out


def _semantic_problems(cfg: dict) -> list[str]:
    p = []
    if cfg["task"]["name"] not in ("boxes-cond", "bbox"):
        p.append("task.name must be boxes-cond or bbox")
    if cfg["model"]["ablation"] not in ("full", "single_only", "pair_only"):
        p.append("model.ablation must be full, single_only or pair_only")
    if cfg["train"]["grad_mode"] not in ("adjoint", "fixed_backprop"):
        p.append("train.grad_mode must be adjoint or fixed_backprop")
    if cfg["train"]["ode_mode"] not in ("fixed", "adaptive"):
        p.append("train.ode_mode must be fixed or adaptive")
    if cfg["train"]["grad_mode"] == "fixed_backprop" and cfg["train"]["ode_mode"] != "fixed":
        p.append("train.grad_mode=fixed_backprop requires train.ode_mode=fixed")
    if cfg["solver"]["rtol"] <= 0 or cfg["solver"]["atol"] <= 0:
        p.append("solver.rtol and solver.atol must be positive")
    if not cfg["solver"]["t0"] < cfg["solver"]["t1"]:
        p.append("solver.t0 must be below solver.t1")
    if cfg["solver"]["n_steps"] < 1:
        p.append("solver.n_steps must be >= 1")
    if cfg["train"]["batch_size"] < 1:
        p.append("train.batch_size must be >= 1")
    if cfg["train"]["epochs"] < 0:
        p.append("train.epochs must be >= 0")
    if cfg["train"]["lambda_l2"] < 0 or cfg["train"]["lambda_l2div"] < 0:
        p.append("train penalty weights must be >= 0")
    conditional = cfg["model"]["condition_in_single"] or cfg["model"]["condition_in_pair"]
    if conditional and cfg["model"]["embed_width"] < 1:
        p.append("model.embed_width must be >= 1 for a conditional model")
    for net in ("single", "pair"):
        if cfg["model"][f"{net}_layers"] < 1:
            p.append(f"model.{net}_layers must be >= 1")
        if cfg["model"][f"{net}_hidden"] < 1:
            p.append(f"model.{net}_hidden must be >= 1")
    return p


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"TOML parse error: {exc}"])
    return resolve(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def dump_config(cfg: dict) -> str:
    """Resolved config as TOML; feeding this back reproduces the run exactly."""
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            lines.append(f"{key} = {_toml_value(val)}")
        lines.append("")
    return "\n".join(lines)


def feature_dim(cfg: dict) -> int:
    return 3 if cfg["task"]["d3"] else 2


def build_model(cfg: dict) -> FlowModel:
    """Freshly initialized flow for this configuration (seeded)."""
    m = cfg["model"]
    dyn_cfg = DynamicsConfig(
        use_time=m["use_time"],
        condition_in_single=m["condition_in_single"],
        condition_in_pair=m["condition_in_pair"],
        embed_width=m["embed_width"] if (m["condition_in_single"] or m["condition_in_pair"]) else 0,
        ablation=m["ablation"],
    )
    rng = np.random.default_rng(m["seed"])
    params = init_dynamics(
        rng,
        feature_dim(cfg),
        dyn_cfg,
        image_shape=(1, m["image_size"], m["image_size"]),
        conv_channels=[m["embed_channels"]] * m["embed_layers"],
        pair_shape=(m["pair_layers"], m["pair_hidden"]),
        single_shape=(m["single_layers"], m["single_hidden"]),
        conv_kernel=m["kernel"],
        conv_stride=m["stride"],
        identity_start=True,
    )
    s = cfg["solver"]
    solver = SolverConfig(
        rtol=s["rtol"], atol=s["atol"], n_steps=s["n_steps"], t0=s["t0"], t1=s["t1"], max_nfe=s["max_nfe"]
    )
    return FlowModel(params=params, cfg=dyn_cfg, solver=solver, d=feature_dim(cfg), seed=m["seed"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lambda_l2=t["lambda_l2"],
        lambda_l2div=t["lambda_l2div"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        patience=t["patience"],
        seed=t["seed"],
        grad_mode=t["grad_mode"],
        ode_mode=t["ode_mode"],
        max_seconds=t["max_seconds"] or None,
        warmup_steps=t["warmup_steps"],
    )
