"""The three train/test designs and the CAM-versus-displacement summary."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..dataset import resolve_groups, split_view
from .model import UNSTABLE, cam, predict
from .train import EXPERIMENT_CONFIG, EvalReport, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

DESIGNS = ("intra", "cross", "generalization")


class UnknownDesign(ValueError):
    pass


def _check_design(design: str) -> None:
    if design not in DESIGNS:
        raise UnknownDesign(f"unknown design {design!r}; choose from {', '.join(DESIGNS)}")


def _merge(name: str, view, report: EvalReport, train_groups) -> EvalReport:
    """Collapse a multi-group report into a single entry for the whole view."""
    conf = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for c in report.confusion.values():
        for k in conf:
            conf[k] += c[k]
    return EvalReport(name, {name: report.overall}, {name: conf}, list(train_groups),
                      list(report.test_groups), report.overall)


def run_experiment(design: str, manifest, cfg: TrainConfig = EXPERIMENT_CONFIG, groups="all",
                   progress=None) -> tuple:
    """Returns (reports, models); `models` maps a training-set label to its trained Model.

    intra: one report per group.  cross: exactly two reports, "simple->complex"
    and "complex->simple".  generalization: one model and a report keyed by
    every group of the manifest.
    """
    _check_design(design)
    reports, models = [], {}
    if design == "intra":
        for g in resolve_groups(groups):
            model = train(split_view(manifest, [g], "train"), cfg)
            rep = evaluate(model, split_view(manifest, [g], "test"), name=g)
            reports.append(rep)
            models[g] = model
            if progress:
                progress(g, rep.accuracy[g])
    elif design == "cross":
        simple, complex_ = resolve_groups("simple"), resolve_groups("complex")
        for name, src, dst in (("simple->complex", simple, complex_), ("complex->simple", complex_, simple)):
            model = train(split_view(manifest, src, "train"), cfg)
            test = split_view(manifest, dst, "test")
            rep = _merge(name, test, evaluate(model, test, name=name), src)
            reports.append(rep)
            models[name] = model
            if progress:
                progress(name, rep.overall)
    else:
        gs = resolve_groups(groups)
        model = train(split_view(manifest, gs, "train"), cfg)
        rep = evaluate(model, split_view(manifest, gs, "test"), name="generalization")
        reports.append(rep)
        models["all"] = model
        if progress:
            progress("all", rep.overall)
    return reports, models


def report_rows(design: str, reports) -> list:
    """Flat CSV rows: one per accuracy entry, with confusion counts and per-class recall."""
    _check_design(design)
    rows = []
    for rep in reports:
        for g, acc in rep.accuracy.items():
            c = rep.confusion[g]
            rs, ru = rep.recall(g)
            rows.append({
                "design": design,
                "train": "+".join(rep.train_groups) if design != "generalization" else "all",
                "test": g,
                "accuracy": f"{acc:.1f}",
                "n": rep.total(g),
                "tp": c["tp"], "tn": c["tn"], "fp": c["fp"], "fn": c["fn"],
                "recall_stable": "" if np.isnan(rs) else f"{rs:.1f}",
                "recall_unstable": "" if np.isnan(ru) else f"{ru:.1f}",
            })
    if design == "intra":
        for r in rows:
            r["train"] = r["test"]
    if design == "cross":
        for r, rep in zip(rows, reports):
            r["train"], r["test"] = rep.name.split("->")
    return rows


CSV_FIELDS = ("design", "train", "test", "accuracy", "n", "tp", "tn", "fp", "fn",
              "recall_stable", "recall_unstable")


def write_report_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else float("nan")


def cam_heat_correlation(model, manifest, records) -> dict:
    """Per-scene Pearson r between CAM(unstable) and the stored heat-map.

    Only scenes that are truly unstable and predicted unstable are scored.
    """
    per_scene = []
    for r in records:
        if not r["unstable"]:
            continue
        mask = manifest.mask(r).bits.astype(float)
        if predict(model, mask)[1] != UNSTABLE:
            continue
        rho = pearson(cam(model, mask, UNSTABLE), manifest.heat(r))
        per_scene.append({"group_id": r["group_id"], "scene_index": r["scene_index"], "pearson": rho})
    vals = np.array([s["pearson"] for s in per_scene if np.isfinite(s["pearson"])])
    summary = {"scenes": len(per_scene)}
    if len(vals):
        summary.update({"mean": float(vals.mean()), "median": float(np.median(vals)),
                        "fraction_positive": float(np.mean(vals > 0)),
                        "fraction_above_0.3": float(np.mean(vals > 0.3))})
    return {"summary": summary, "per_scene": per_scene}
