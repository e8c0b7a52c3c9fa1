"""Labeled corpus: build, persist (JSON lines + PBM/PGM files) and serve splits.

Layout::

    <out>/manifest.jsonl          header line, then one record per scene
    <out>/masks/<group>/<i>.pgm   archive-resolution P4 foreground mask
    <out>/heat/<group>/<i>.pgm    training-resolution P5 displacement heat-map
"""
from __future__ import annotations

import json
import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .physics import SimConfig, simulate
from .scenegen import DEFAULT_PARAMS, GenerationParams, Scene, SceneConfig, generate_indexed, group_ids
from .stability import TAU, displacement_map, label_stability

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "test")


class UnknownGroup(KeyError):
    pass


def split_of(scene_index: int) -> str:
    return "train" if scene_index % 2 == 0 else "test"


def resolve_groups(spec) -> list:
    """Accepts 'all', 'simple', 'complex', a comma list, or an iterable of ids."""
    valid = group_ids()
    if isinstance(spec, str):
        if spec == "all":
            return valid
        if spec == "simple":
            return [g for g in valid if int(g.split("B")[0]) in (4, 6)]
        if spec == "complex":
            return [g for g in valid if int(g.split("B")[0]) in (10, 14)]
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out = []
    for g in spec:
        if g not in valid:
            raise UnknownGroup(f"unknown group {g!r}; valid groups: {', '.join(valid)}")
        out.append(g)
    return out


@dataclass
class Manifest:
    header: dict
    records: list = field(default_factory=list)
    root: Path | None = None

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.header == other.header and self.records == other.records

    @property
    def groups(self) -> list:
        seen = []
        for r in self.records:
            if r["group_id"] not in seen:
                seen.append(r["group_id"])
        return seen

    @property
    def tau(self) -> float:
        return float(self.header["constants"]["tau"])

    def find(self, group_id: str, scene_index: int) -> dict:
        for r in self.records:
            if r["group_id"] == group_id and r["scene_index"] == scene_index:
                return r
        raise KeyError(f"{group_id}/{scene_index} not in manifest")

    def scene(self, record: dict) -> Scene:
        return Scene.from_dict(record["scene"])

    def mask(self, record: dict, resolution: int = imaging.TRAIN_RES) -> imaging.Mask:
        m = imaging.read_mask_pgm(self.root / record["mask"])
        if m.width == resolution:
            return m
        return imaging.downsample_majority(m, m.width // resolution)

    def heat(self, record: dict) -> np.ndarray:
        return imaging.read_gray_pgm(self.root / record["heat"])

    def write(self, path) -> None:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        with path.open(encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or "header" not in lines[0]:
            raise ValueError(f"{path}: missing manifest header")
        return cls(lines[0]["header"], lines[1:], path.parent)


def record_unstable(record: dict, tau: float) -> bool:
    """Label recomputed from stored displacements (None marks a diverged block)."""
    return any(d is None or d > tau for d in record["displacements"])


def _constants(params: GenerationParams, sim: SimConfig, tau: float) -> dict:
    return {
        "sigma": params.sigma, "delta": params.delta, "min_overlap": params.min_overlap,
        "friction_mu": sim.friction_mu, "tau": tau,
    }


def _process(job):
    """Generate, simulate, label and render one scene; returns its manifest record."""
    group_id, index, base_seed, params, sim, tau, out_dir = job
    scene = generate_indexed(SceneConfig.from_group_id(group_id), index, base_seed, params)
    trace = simulate(scene, sim)
    label = label_stability(trace, tau)
    dmap = displacement_map(scene, trace, tau)
    mask = imaging.render_mask(scene, imaging.frame_camera(scene, (imaging.ARCHIVE_RES,) * 2))
    heat = imaging.render_heatmap(scene, imaging.frame_camera(scene, (imaging.TRAIN_RES,) * 2),
                                  dmap.magnitudes)
    mask_rel = f"masks/{group_id}/{index}.pgm"
    heat_rel = f"heat/{group_id}/{index}.pgm"
    for rel in (mask_rel, heat_rel):
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
    try:
        imaging.write_mask_pgm(out_dir / mask_rel, mask)
        imaging.write_gray_pgm(out_dir / heat_rel, heat)
    except OSError as exc:
        raise OSError(f"cannot write scene files under {out_dir}: {exc}") from exc
    return {
        "group_id": group_id,
        "scene_index": index,
        "seed": scene.config.seed,
        "retries": scene.retries,
        "split": split_of(index),
        "unstable": label.unstable,
        "displacements": [None if not np.isfinite(d) else d for d in label.per_block_displacement],
        "diverged": trace.diverged,
        "onset_block": dmap.onset_block,
        "mask": mask_rel,
        "heat": heat_rel,
        "scene": scene.to_dict(),
        "constants": _constants(params, sim, tau),
    }


def build_dataset(groups, per_group: int, base_seed: int, out_dir, jobs: int = 1,
                  params: GenerationParams = DEFAULT_PARAMS, sim: SimConfig = SimConfig(),
                  tau: float = TAU, progress=None) -> Manifest:
    """Full pipeline for every (group, index); records are merged in deterministic order."""
    groups = resolve_groups(groups)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    work = [(g, i, int(base_seed), params, sim, float(tau), out_dir)
            for g in groups for i in range(per_group)]
    records = []
    if jobs > 1:
        ctx = mp.get_context("spawn")
        with ctx.Pool(jobs) as pool:
            for rec in pool.imap(_process, work, chunksize=4):
                records.append(rec)
                if progress:
                    progress(len(records), len(work))
    else:
        for job in work:
            records.append(_process(job))
            if progress:
                progress(len(records), len(work))
    for r in records:
        if r["retries"]:
            log.info("%s/%d generated after %d sub-seed retries", r["group_id"], r["scene_index"], r["retries"])
    header = {
        "format_version": FORMAT_VERSION,
        "groups": groups,
        "per_group": per_group,
        "base_seed": int(base_seed),
        "constants": _constants(params, sim, tau),
        "generation": params.as_dict(),
        "simulation": sim.as_dict(),
        "imaging": {"archive_resolution": imaging.ARCHIVE_RES, "train_resolution": imaging.TRAIN_RES,
                    "frame_margin": imaging.FRAME_MARGIN, "projection": "orthographic, view -y"},
        "split_rule": "even scene_index = train, odd = test",
    }
    manifest = Manifest(header, records, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def select(manifest: Manifest, groups, split: str | None = None) -> list:
    groups = set(resolve_groups(groups))
    present = set(manifest.groups)
    missing = groups - present
    if missing:
        raise UnknownGroup(f"groups not in manifest: {', '.join(sorted(missing))}")
    if split is not None and split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    return [r for r in manifest.records
            if r["group_id"] in groups and (split is None or r["split"] == split)]


@dataclass
class View:
    """Materialized (mask, label) pairs of one selection; label 1 means unstable."""
    records: list
    masks: np.ndarray  # (n, H, W) float
    labels: np.ndarray  # (n,) int
    split: str | None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(zip(self.masks, self.labels))

    @property
    def keys(self) -> set:
        return {(r["group_id"], r["scene_index"]) for r in self.records}


def split_view(manifest: Manifest, groups, split: str, resolution: int = imaging.TRAIN_RES) -> View:
    recs = select(manifest, groups, split)
    if recs:
        masks = np.stack([manifest.mask(r, resolution).bits for r in recs]).astype(float)
    else:
        masks = np.zeros((0, resolution, resolution))
    labels = np.array([int(r["unstable"]) for r in recs], dtype=np.int64)
    return View(recs, masks, labels, split)


def stats(manifest: Manifest) -> list:
    rows = []
    for g in manifest.groups:
        recs = [r for r in manifest.records if r["group_id"] == g]
        unstable = sum(r["unstable"] for r in recs)
        rows.append({"group": g, "scenes": len(recs), "unstable": unstable, "stable": len(recs) - unstable,
                     "unstable_fraction": round(unstable / len(recs), 4) if recs else 0.0,
                     "diverged": sum(r["diverged"] for r in recs),
                     "retried": sum(1 for r in recs if r["retries"])})
    return rows
