"""Command-line entry point.

Every subcommand resolves its options as flag > --config file > built-in
default and writes the resolved set to run.json in its output directory.
Passing that run.json back through --config reproduces the run.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

log = logging.getLogger("stacklab")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


TRAIN_DEFAULTS = {"epochs": 100, "min_steps": 3750, "learning_rate": 0.01, "batch_size": 8, "momentum": 0.9,
                  "mirror": True}

# built-in defaults per command; None means "required"
DEFAULTS = {
    "dataset build": {"groups": "all", "per_group": 200, "seed": 0, "out": None, "jobs": 1,
                      "wide_placements": 1.0, "safe_fraction": 0.25},
    "dataset stats": {"data": None, "out": "."},
    "train": {"data": None, "groups": "all", "out": None, "seed": 0, **TRAIN_DEFAULTS},
    "eval": {"data": None, "design": None, "groups": "all", "out": None, "seed": 0, "model": None,
             **TRAIN_DEFAULTS},
    "cam": {"data": None, "model": None, "scene": None, "out": None, "seed": 0, "summary": False},
    "plan": {"scene": None, "model": None, "out": None, "seed": 0, "attempts": 3, "noise_xy": 0.1,
             "noise_yaw_deg": 2.0, "allow_empty": False, "units_per_pixel": None},
    "oracle check": {"data": None, "groups": "all", "out": ".", "seed": 0, "count": None},
}


def _add_common(p, with_jobs=False):
    p.add_argument("--config", help="JSON file of option values (a previous run.json works)")
    p.add_argument("--seed", type=int, help="master seed (falls back to $STACKLAB_SEED)")
    p.add_argument("--out", help="output directory")
    if with_jobs:
        p.add_argument("--jobs", type=int, help="worker processes for scene-level work")


def _add_train_opts(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--min-steps", type=int, dest="min_steps", help="train at least this many updates")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--momentum", type=float)
    p.add_argument("--no-mirror", action="store_const", const=False, dest="mirror",
                   help="disable left-right flip augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stacklab", description="Visual stability of block stacks.")
    parser.add_argument("--version", action="version", version=f"stacklab {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build or summarize a labeled corpus")
    dsub = ds.add_subparsers(dest="action", required=True)
    b = dsub.add_parser("build", help="generate, simulate, label and render scenes")
    _add_common(b, with_jobs=True)
    b.add_argument("--groups", help="'all', 'simple', 'complex' or a comma list of group ids")
    b.add_argument("--per-group", type=int, dest="per_group")
    b.add_argument("--wide-placements", type=float, dest="wide_placements")
    b.add_argument("--safe-fraction", type=float, dest="safe_fraction")
    s = dsub.add_parser("stats", help="per-group label counts")
    _add_common(s)
    s.add_argument("--data", help="dataset directory")

    t = sub.add_parser("train", help="train one classifier on the train halves of some groups")
    _add_common(t)
    t.add_argument("--data")
    t.add_argument("--groups")
    _add_train_opts(t)

    e = sub.add_parser("eval", help="run an experiment design and write its CSV report")
    _add_common(e)
    e.add_argument("--data")
    e.add_argument("--design", choices=("intra", "cross", "generalization"))
    e.add_argument("--groups")
    e.add_argument("--model", help="evaluate this checkpoint instead of training (generalization only)")
    _add_train_opts(e)

    c = sub.add_parser("cam", help="class activation map of one scene")
    _add_common(c)
    c.add_argument("--data")
    c.add_argument("--model")
    c.add_argument("--scene", help="scene id as GROUP/INDEX, e.g. 4B-2D-Uni/17")
    c.add_argument("--summary", action="store_const", const=True,
                   help="also correlate CAM with displacement heat-maps over the test split")

    pl = sub.add_parser("plan", help="candidate placements on a structure")
    _add_common(pl)
    pl.add_argument("--scene", help="scene JSON, mask PBM, or 'scripted' for the six built-in structures")
    pl.add_argument("--model")
    pl.add_argument("--attempts", type=int)
    pl.add_argument("--noise-xy", type=float, dest="noise_xy")
    pl.add_argument("--noise-yaw-deg", type=float, dest="noise_yaw_deg")
    pl.add_argument("--units-per-pixel", type=float, dest="units_per_pixel",
                    help="scale of a mask input (required for masks)")
    pl.add_argument("--allow-empty", action="store_const", const=True, dest="allow_empty")

    o = sub.add_parser("oracle", help="compare dynamic labels with the equilibrium oracle")
    osub = o.add_subparsers(dest="action", required=True)
    oc = osub.add_parser("check")
    _add_common(oc)
    oc.add_argument("--data")
    oc.add_argument("--groups")
    oc.add_argument("--count", type=int, help="at most this many scenes per group")
    return parser


def resolve(args) -> dict:
    """Merge flag values over the config file over built-in defaults."""
    name = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
    defaults = DEFAULTS[name]
    from_file = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        from_file = from_file.get("options", from_file)
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for '{name}': {', '.join(sorted(unknown))}")
    opts = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            opts[key] = flag
        elif key in from_file:
            opts[key] = from_file[key]
        elif key == "seed" and os.environ.get("STACKLAB_SEED"):
            try:
                opts[key] = int(os.environ["STACKLAB_SEED"])
            except ValueError as exc:
                raise UsageError("STACKLAB_SEED must be an integer") from exc
        else:
            opts[key] = default
        if opts[key] is None and key not in ("model", "units_per_pixel", "count"):
            raise UsageError(f"'{name}' needs --{key.replace('_', '-')}")
    return {"command": name, "options": opts}


def _write_run(out: Path, run: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(dict(run, version=__version__), indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def _manifest(path):
    from .dataset import Manifest

    p = Path(path)
    if not (p / "manifest.jsonl").is_file() and not p.is_file():
        raise UsageError(f"no dataset manifest at {p}")
    return Manifest.read(p)


def _checkpoint(path):
    from .learning import load_checkpoint

    if path is None or not Path(path).is_file():
        raise UsageError(f"model checkpoint not found: {path}")
    return load_checkpoint(path)


def _train_config(o):
    from .learning import TrainConfig

    return TrainConfig(learning_rate=o["learning_rate"], momentum=o["momentum"], batch_size=o["batch_size"],
                       epochs=o["epochs"], min_steps=o["min_steps"], seed=o["seed"], mirror=bool(o["mirror"]))


def _print_rows(rows, fields):
    w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_dataset(run: dict) -> int:
    from .dataset import build_dataset, resolve_groups, stats
    from .scenegen import GenerationParams

    o = run["options"]
    out = Path(o["out"])
    if run["command"] == "dataset build":
        groups = resolve_groups(o["groups"])
        if o["per_group"] < 1 or o["jobs"] < 1:
            raise UsageError("--per-group and --jobs must be positive")
        params = GenerationParams(wide_placements=o["wide_placements"], safe_fraction=o["safe_fraction"])
        _write_run(out, run)
        t0 = time.time()

        def progress(done, total):
            if done % 50 == 0 or done == total:
                log.info("%d/%d scenes", done, total)

        m = build_dataset(groups, o["per_group"], o["seed"], out, jobs=o["jobs"], params=params, progress=progress)
        print(f"wrote {len(m)} records to {out / 'manifest.jsonl'} in {time.time() - t0:.1f}s")
        return EXIT_OK
    m = _manifest(o["data"])
    rows = stats(m)
    _write_run(out, run)
    fields = ("group", "scenes", "unstable", "stable", "unstable_fraction", "diverged", "retried")
    _print_rows(rows, fields)
    return EXIT_OK


def cmd_train(run: dict) -> int:
    from .dataset import resolve_groups, split_view
    from .learning import save_checkpoint, train

    o = run["options"]
    m = _manifest(o["data"])
    groups = resolve_groups(o["groups"])
    out = Path(o["out"])
    _write_run(out, run)
    model = train(split_view(m, groups, "train"), _train_config(o),
                  progress=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
    save_checkpoint(model, out / "model.ckpt")
    print(f"training accuracy {model.meta['train_accuracy']:.1f}% on {len(model.meta['train_keys'])} scenes; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(run: dict) -> int:
    from .dataset import resolve_groups, split_view
    from .learning import evaluate, report_rows, run_experiment, save_checkpoint, write_report_csv
    from .learning.experiments import CSV_FIELDS

    o = run["options"]
    m = _manifest(o["data"])
    out = Path(o["out"])
    if o["model"] is not None:
        if o["design"] != "generalization":
            raise UsageError("--model is only meaningful with --design generalization")
        model = _checkpoint(o["model"])
        _write_run(out, run)
        groups = resolve_groups(o["groups"])
        reports = [evaluate(model, split_view(m, groups, "test"), name="generalization")]
    else:
        _write_run(out, run)
        reports, models = run_experiment(o["design"], m, _train_config(o), o["groups"],
                                         progress=lambda k, acc: log.info("%s: %.1f%%", k, acc))
        for name, model in models.items():
            save_checkpoint(model, out / f"model_{name.replace('->', '_to_')}.ckpt")
    rows = report_rows(o["design"], reports)
    write_report_csv(out / f"{o['design']}.csv", rows)
    _print_rows(rows, CSV_FIELDS)
    return EXIT_OK


def _parse_scene_id(text):
    try:
        group, index = text.rsplit("/", 1)
        return group, int(index)
    except ValueError as exc:
        raise UsageError(f"scene id must look like GROUP/INDEX, got {text!r}") from exc


def cmd_cam(run: dict) -> int:
    from . import imaging
    from .learning import UNSTABLE, cam, cam_heat_correlation, forward, pearson, predict

    o = run["options"]
    m = _manifest(o["data"])
    model = _checkpoint(o["model"])
    group, index = _parse_scene_id(o["scene"])
    try:
        rec = m.find(group, index)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(o["out"])
    _write_run(out, run)
    mask = m.mask(rec).bits.astype(float)
    logits, _ = forward(model, mask)
    p_stable, cls = predict(model, mask)
    result = {"scene": o["scene"], "logits": [float(v) for v in logits], "p_stable": p_stable,
              "predicted_unstable": bool(cls == UNSTABLE), "label_unstable": bool(rec["unstable"])}
    for c, name in ((0, "stable"), (1, "unstable")):
        heat = cam(model, mask, c)
        span = heat.max() - heat.min()
        imaging.write_gray_pgm(out / f"cam_{name}.pgm", (heat - heat.min()) / span if span > 0 else heat * 0)
    result["pearson_unstable_vs_heat"] = pearson(cam(model, mask, UNSTABLE), m.heat(rec))
    if o["summary"]:
        test = [r for r in m.records if r["split"] == "test"]
        corr = cam_heat_correlation(model, m, test)
        (out / "cam_correlation.json").write_text(json.dumps(corr, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
        result["summary"] = corr["summary"]
    (out / "cam.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _load_plan_scenes(spec):
    from . import imaging
    from .scenegen import Scene
    from .planning import scripted_scenes

    if spec == "scripted":
        return [(f"scripted-{s.scene_index}", s) for s in scripted_scenes()], None
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"scene file not found: {path}")
    if path.suffix.lower() in (".pbm", ".pgm"):
        return None, imaging.read_mask_pgm(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not a scene JSON file ({exc})") from exc
    items = data if isinstance(data, list) else [data]
    try:
        return [(f"{path.stem}-{i}", Scene.from_dict(d)) for i, d in enumerate(items)], None
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: malformed scene ({exc})") from exc


def cmd_plan(run: dict) -> int:
    from .learning import STABLE, predict
    from .physics import SimConfig
    from .planning import (CANDIDATE_FIELDS, SUMMARY_FIELDS, NoSurface, SimExecutor, candidate_rows,
                           generate_candidates, ground_truth_candidates, manipulation_report, mask_candidates,
                           predict_candidates, summary_rows, write_csv)
    from .scenegen import derive_seed

    o = run["options"]
    if o["attempts"] < 1:
        raise UsageError("--attempts must be >= 1")
    model = _checkpoint(o["model"])
    scenes, mask = _load_plan_scenes(o["scene"])
    out = Path(o["out"])
    _write_run(out, run)
    if mask is not None:
        if o["units_per_pixel"] is None:
            raise UsageError("mask input needs --units-per-pixel")
        try:
            cands = mask_candidates(mask, o["units_per_pixel"])
        except NoSurface as exc:
            if not o["allow_empty"]:
                raise UsageError(str(exc)) from exc
            cands = []
        rows = []
        for orientation, k, m in cands:
            p, cls = predict(model, m.bits.astype(float))
            rows.append({"orientation": orientation, "slot": k, "p_stable": f"{p:.6f}",
                         "predicted_stable": int(cls == STABLE)})
        fields = ("orientation", "slot", "p_stable", "predicted_stable")
        write_csv(out / "candidates.csv", rows, fields)
        _print_rows(rows, fields)
        return EXIT_OK
    sim = SimConfig()
    all_rows, summaries, total = [], [], 0
    for name, scene in scenes:
        try:
            cands = generate_candidates(scene)
        except NoSurface as exc:
            if not o["allow_empty"]:
                raise UsageError(f"{name}: {exc}") from exc
            log.warning("%s: %s", name, exc)
            continue
        for orientation, reason in cands.deficient.items():
            log.warning("%s: no %s candidates (%s)", name, orientation, reason)
        total += len(cands)
        pred = predict_candidates(model, cands)
        gt = ground_truth_candidates(scene, cands, sim)
        ex = SimExecutor(scene, cands, o["noise_xy"], o["noise_yaw_deg"], sim,
                         seed=derive_seed(o["seed"], "executor", name))
        rep = manipulation_report(pred, gt, ex, o["attempts"], [c.orientation for c in cands])
        all_rows += candidate_rows(name, cands, rep)
        summaries += summary_rows(name, rep)
    write_csv(out / "candidates.csv", all_rows, CANDIDATE_FIELDS)
    write_csv(out / "summary.csv", summaries, SUMMARY_FIELDS)
    _print_rows(summaries, SUMMARY_FIELDS)
    print(f"total candidates: {total}")
    return EXIT_OK


def cmd_oracle(run: dict) -> int:
    from .dataset import select
    from .stability import Verdict, quasi_static_check

    o = run["options"]
    m = _manifest(o["data"])
    recs = select(m, o["groups"])
    if o["count"] is not None:
        per, kept = {}, []
        for r in recs:
            per[r["group_id"]] = per.get(r["group_id"], 0) + 1
            if per[r["group_id"]] <= o["count"]:
                kept.append(r)
        recs = kept
    out = Path(o["out"])
    _write_run(out, run)
    rows = []
    for r in recs:
        v = quasi_static_check(m.scene(r))
        rows.append({"group": r["group_id"], "scene_index": r["scene_index"], "dynamic_unstable": int(r["unstable"]),
                     "verdict": v.verdict.value, "margin": f"{v.margin:.6f}",
                     "agree": "" if v.verdict is Verdict.MARGINAL
                     else int((v.verdict is Verdict.UNSTABLE) == r["unstable"])})
    fields = ("group", "scene_index", "dynamic_unstable", "verdict", "margin", "agree")
    with (out / "oracle.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    decided = [r for r in rows if r["agree"] != ""]
    agree = sum(r["agree"] for r in decided)
    rate = 100.0 * agree / len(decided) if decided else float("nan")
    print(f"scenes {len(rows)}, non-marginal {len(decided)}, agreement {rate:.1f}%")
    return EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "cam": cmd_cam,
            "plan": cmd_plan, "oracle": cmd_oracle}


def main(argv=None) -> int:
    from .dataset import UnknownGroup
    from .learning import LeakageError, NonFiniteLoss, ShapeMismatch, UnknownDesign

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve(args)
        return COMMANDS[args.command](run)
    except (UsageError, UnknownGroup, UnknownDesign, LeakageError, ShapeMismatch, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"stacklab: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"stacklab: training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"stacklab: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
