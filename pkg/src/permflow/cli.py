"""Command-line entry point: dataset generation, training, sampling, scoring,
evaluation, and SVG plot emission for offline experiments.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import evaluation as ev
from . import flow as flow_mod
from . import ode, plotting, tasks, training
from .config import ConfigError
from .flow import config_hash

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    pass


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_records(path: str):
    p = _require_file(path, "dataset")
    try:
        return tasks.load_records(p)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot parse dataset {p}: {exc}")


def _check_checkpoint_config(model_doc: dict, config_path: str | None) -> None:
    if config_path is None:
        return
    cfg = cfg_mod.load_config(_require_file(config_path, "config"))
    fresh = flow_mod.model_to_doc(cfg_mod.build_model(cfg))["model"]
    h_cfg = config_hash(fresh)
    h_ckpt = config_hash(model_doc)
    if h_cfg != h_ckpt:
        raise ConfigError(
            [
                "checkpoint does not match the given config",
                f"config model hash:     {h_cfg}",
                f"checkpoint model hash: {h_ckpt}",
            ]
        )


def cmd_gen_data(args) -> int:
    out = _outdir(args.out)
    records, manifest = tasks.generate_dataset(
        args.task, args.count, args.seed, args.n_min, args.n_max, n_prohibited=args.n_prohibited
    )
    tasks.save_records(out / "dataset.ndjson", records)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {len(records)} records to {out / 'dataset.ndjson'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = cfg_mod.load_config(_require_file(args.config, "config"))
    train_recs = _load_records(args.data)
    val_recs = _load_records(args.val)
    if not train_recs or not val_recs:
        raise DataError("training and validation datasets must be non-empty")
    out = _outdir(args.out)
    model = cfg_mod.build_model(cfg)
    tc = cfg_mod.train_config(cfg)
    conditional = model.cfg.conditional
    d3 = cfg["task"]["d3"]
    train_data = training.batch_from_records(train_recs, conditional, d3=d3)
    val_data = training.batch_from_records(val_recs, conditional, d3=d3)
    res = training.train(model, train_data, val_data, tc, log=lambda s: print(s, flush=True))
    flow_mod.save_checkpoint(res.model, out / "checkpoint.json")
    (out / "history.csv").write_text(training.history_to_csv(res.history))
    (out / "resolved_config.toml").write_text(cfg_mod.dump_config(cfg))
    print(f"best validation NLL: {res.best_val_nll:.4f} ({res.stopped_reason})")
    if res.aborted:
        print("training aborted on a numerical failure; best checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sample(args) -> int:
    doc = json.load(open(_require_file(args.checkpoint, "checkpoint")))
    model = flow_mod.model_from_doc(doc)
    _check_checkpoint_config(doc["model"], args.config)
    out = _outdir(args.out)
    rng = np.random.default_rng(args.seed)
    scenes = _load_records(args.data) if args.data else [None] * args.count
    rows = []
    for i, scene in enumerate(scenes[: args.count] if args.data else scenes):
        cond = None
        if scene is not None and model.cfg.conditional:
            cond = tasks.condition_image(scene)
        n = args.n or (scene.n if scene is not None else None)
        if n is None:
            raise DataError("--n is required when sampling without --data")
        s = flow_mod.sample(model, n, cond, rng, record_trajectory=args.trajectories)
        row = {
            "index": i,
            "sample": [[float(v) for v in r] for r in s.x],
            "log_prob": s.log_prob,
            "nfe": s.nfe,
        }
        if args.trajectories:
            row["trajectory"] = [
                {"t": t, "x": [[float(v) for v in r] for r in x]} for t, x in s.trajectory
            ]
        rows.append(row)
    with open(out / "samples.ndjson", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(rows)} samples to {out / 'samples.ndjson'}")
    return EXIT_OK


def cmd_logprob(args) -> int:
    doc = json.load(open(_require_file(args.checkpoint, "checkpoint")))
    model = flow_mod.model_from_doc(doc)
    _check_checkpoint_config(doc["model"], args.config)
    scenes = _load_records(args.data)
    out = _outdir(args.out)
    d3 = model.d == 3
    lines = ["index,n,log_prob,nfe"]
    for i, scene in enumerate(scenes):
        cond = tasks.condition_image(scene) if model.cfg.conditional else None
        lp, nfe = flow_mod.log_prob_with_nfe(model, scene.target_rows(d3=d3), cond)
        lines.append(f"{i},{scene.n},{lp:.8f},{nfe}")
    (out / "logprob.csv").write_text("\n".join(lines) + "\n")
    print(f"scored {len(scenes)} records into {out / 'logprob.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = json.load(open(_require_file(args.checkpoint, "checkpoint")))
    model = flow_mod.model_from_doc(doc)
    _check_checkpoint_config(doc["model"], args.config)
    scenes = _load_records(args.data)[: args.max_scenes]
    if not scenes:
        raise DataError("no scenes to evaluate")
    out = _outdir(args.out)
    rng = np.random.default_rng(args.seed)
    d3 = model.d == 3
    data = training.batch_from_records(scenes, model.cfg.conditional, d3=d3)

    acc = ev.eval_acceptance(model, scenes, args.samples_per_scene, rng)
    nll_mean, nll_stderr = ev.eval_nll(model, data)
    inv = ev.invariance_audit(model, data[: min(10, len(data))], n_perms=args.n_perms, rng=rng)
    iou = float("nan")
    if not scenes[0].prohibited:  # bbox-style task: targets are the condition
        iou = ev.eval_iou(model, scenes, args.samples_per_scene, rng, d3=d3)
    report = ev.EvalReport(
        nll_mean=nll_mean,
        nll_stderr=nll_stderr,
        acceptance_rate=acc["acceptance_rate"],
        overlap_rate=acc["overlap_rate"],
        region_rate=acc["region_rate"],
        iou_mean=iou,
        nfe_mean=acc["nfe_mean"],
        invariance_max_dev=inv,
        n_scenes=len(scenes),
        samples_per_scene=args.samples_per_scene,
        seed=args.seed,
    )
    (out / "eval_report.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_plot(args) -> int:
    scenes = _load_records(args.data)
    out = _outdir(args.out)
    model = None
    if args.checkpoint:
        doc = json.load(open(_require_file(args.checkpoint, "checkpoint")))
        model = flow_mod.model_from_doc(doc)
        _check_checkpoint_config(doc["model"], args.config)
    rng = np.random.default_rng(args.seed)
    count = min(args.count, len(scenes)) if scenes else 0
    for i in range(count):
        scene = scenes[i]
        samples = None
        trajectories = None
        if model is not None:
            cond = tasks.condition_image(scene) if model.cfg.conditional else None
            d3 = model.d == 3
            sample_boxes = []
            for _ in range(args.samples):
                s = flow_mod.sample(
                    model, scene.n, cond, rng, record_trajectory=args.trajectories
                )
                sample_boxes.append(tasks.decode_boxes(s.x, d3=d3))
                if args.trajectories and trajectories is None:
                    trajectories = s.trajectory
            samples = sample_boxes
        svg = plotting.render_scene_svg(scene, samples=samples, trajectories=trajectories)
        (out / f"scene_{i:03d}.svg").write_text(svg)
    print(f"wrote {count} SVG scene plots to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="permflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--task", choices=["boxes-cond", "bbox"], required=True)
    g.add_argument("--n-min", type=int, required=True)
    g.add_argument("--n-max", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-prohibited", type=int, default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a flow from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw sets from a trained flow")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--data", default=None, help="scenes providing conditions")
    s.add_argument("--n", type=int, default=None, help="set size (defaults to each scene's)")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trajectories", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    lp = sub.add_parser("logprob", help="score dataset records in nats per set")
    lp.add_argument("--checkpoint", required=True)
    lp.add_argument("--config", default=None)
    lp.add_argument("--data", required=True)
    lp.add_argument("--out", required=True)
    lp.set_defaults(fn=cmd_logprob)

    e = sub.add_parser("eval", help="metric suite on held-out scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--samples-per-scene", type=int, default=50)
    e.add_argument("--max-scenes", type=int, default=100)
    e.add_argument("--n-perms", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="render scenes (and samples/trajectories) as SVG")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectories", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ode.SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
