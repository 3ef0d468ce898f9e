"""Synthetic set-generation tasks: geometry, rejection-sampling generators, rasterizer.

Task "boxes-cond": place unit squares so they avoid each other and a prohibited
region of larger squares; the prohibited region (as a binary image) is the
condition. Task "bbox": place unit squares avoiding each other; the rendered
squares themselves are the condition and the flow must recover them.

Boundary convention throughout: touching edges do not overlap (open intervals).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RASTER_SIZE = 32
RASTER_HALF_EXTENT = 4.0  # scene domain [-4, 4]^2, covering +-3 sigma of the prior
TARGET_W = 1.0
PROHIBITED_W = 1.5
MAX_CONSECUTIVE_REJECTIONS = 10_000
DATASET_FORMAT = "permflow-dataset-v1"
MANIFEST_FORMAT = "permflow-dataset-manifest-v1"


@dataclass
class Box:
    cx: float
    cy: float
    w: float = TARGET_W

    def as_row(self) -> list[float]:
        return [self.cx, self.cy, self.w]


def overlap(a: Box, b: Box) -> bool:
    """Axis-aligned square overlap; touching edges count as clear."""
    thr = (a.w + b.w) / 2.0
    return abs(a.cx - b.cx) < thr and abs(a.cy - b.cy) < thr


@dataclass
class SceneRecord:
    prohibited: list[Box]
    targets: list[Box]

    @property
    def n(self) -> int:
        return len(self.targets)

    def validate(self) -> None:
        for i in range(len(self.targets)):
            for j in range(i + 1, len(self.targets)):
                if overlap(self.targets[i], self.targets[j]):
                    raise ValueError(f"targets {i} and {j} overlap")
            for k, p in enumerate(self.prohibited):
                if overlap(self.targets[i], p):
                    raise ValueError(f"target {i} overlaps prohibited box {k}")

    def target_rows(self, d3: bool = False) -> np.ndarray:
        """Flow-ready element rows: (cx, cy) or (cx, cy, log w)."""
        if d3:
            return np.array([[b.cx, b.cy, np.log(b.w)] for b in self.targets])
        return np.array([[b.cx, b.cy] for b in self.targets])


def decode_boxes(rows: np.ndarray, w: float = TARGET_W, d3: bool = False) -> list[Box]:
    rows = np.asarray(rows)
    if d3:
        return [Box(float(r[0]), float(r[1]), float(np.exp(r[2]))) for r in rows]
    return [Box(float(r[0]), float(r[1]), w) for r in rows]


def condition_image(record: SceneRecord) -> np.ndarray:
    """Raster condition: the prohibited region when present, else the targets (bbox task)."""
    boxes = record.prohibited if record.prohibited else record.targets
    return rasterize(boxes)


def rasterize(
    boxes: list[Box], size: int = RASTER_SIZE, half_extent: float = RASTER_HALF_EXTENT
) -> np.ndarray:
    """Binary (1, size, size) grid; a pixel is 1 iff its center lies inside any box."""
    centers = -half_extent + (np.arange(size) + 0.5) * (2 * half_extent / size)
    img = np.zeros((1, size, size))
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    for b in boxes:
        inside = (np.abs(gx - b.cx) < b.w / 2) & (np.abs(gy - b.cy) < b.w / 2)
        img[0][inside] = 1.0
    return img


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_task1(
    rng: np.random.Generator,
    n_targets: int,
    n_prohibited: int = 3,
    target_w: float = TARGET_W,
    prohibited_w: float = PROHIBITED_W,
) -> SceneRecord:
    """Sequential rejection sampling of targets around a fresh prohibited region.

    After 10k consecutive rejections the whole record restarts (prohibited
    region included) so pathological arrangements cannot hang the generator.
    """
    if n_targets < 1:
        raise ValueError("need n_targets >= 1")
    while True:
        prohibited = [Box(*rng.standard_normal(2), prohibited_w) for _ in range(n_prohibited)]
        targets: list[Box] = []
        rejections = 0
        while len(targets) < n_targets:
            cand = Box(*rng.standard_normal(2), target_w)
            if any(overlap(cand, p) for p in prohibited) or any(
                overlap(cand, t) for t in targets
            ):
                rejections += 1
                if rejections >= MAX_CONSECUTIVE_REJECTIONS:
                    break
                continue
            rejections = 0
            targets.append(cand)
        if len(targets) == n_targets:
            return SceneRecord(prohibited=prohibited, targets=targets)


def gen_task2(rng: np.random.Generator, n_objects: int, target_w: float = TARGET_W) -> SceneRecord:
    """Mutually non-overlapping squares; the condition renders the targets themselves."""
    rec = gen_task1(rng, n_objects, n_prohibited=0, target_w=target_w)
    return rec


# ---------------------------------------------------------------------------
# infractions and acceptance
# ---------------------------------------------------------------------------

def _pairwise_overlap_any(boxes: np.ndarray) -> np.ndarray:
    """boxes (S, N, 3) -> (S,) bool, any within-set overlap."""
    S, N = boxes.shape[0], boxes.shape[1]
    if N < 2:
        return np.zeros(S, dtype=bool)
    c = boxes[:, :, :2]
    w = boxes[:, :, 2]
    d = np.abs(c[:, :, None, :] - c[:, None, :, :])
    thr = (w[:, :, None] + w[:, None, :]) / 2.0
    hit = (d[..., 0] < thr) & (d[..., 1] < thr)
    iu = np.triu_indices(N, k=1)
    return hit[:, iu[0], iu[1]].any(axis=1)


def _region_overlap_any(boxes: np.ndarray, prohibited: list[Box]) -> np.ndarray:
    S = boxes.shape[0]
    if not prohibited:
        return np.zeros(S, dtype=bool)
    p = np.array([b.as_row() for b in prohibited])  # (P, 3)
    c = boxes[:, :, :2]
    w = boxes[:, :, 2]
    d = np.abs(c[:, :, None, :] - p[None, None, :, :2])
    thr = (w[:, :, None] + p[None, None, :, 2]) / 2.0
    hit = (d[..., 0] < thr) & (d[..., 1] < thr)
    return hit.any(axis=(1, 2))


def infraction_report(samples: np.ndarray, scene: SceneRecord, w: float = TARGET_W, d3: bool = False):
    """Per-sample infraction flags and aggregate rates.

    ``samples`` is (S, N, D) of element rows (one row per box). Returns a dict
    with overlap_rate (box-box), region_rate (box-prohibited), any_rate, and the
    per-sample boolean arrays.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    S, N, D = samples.shape
    if d3:
        boxes = np.concatenate([samples[:, :, :2], np.exp(samples[:, :, 2:3])], axis=2)
    else:
        boxes = np.concatenate([samples[:, :, :2], np.full((S, N, 1), w)], axis=2)
    overlap_flags = _pairwise_overlap_any(boxes)
    region_flags = _region_overlap_any(boxes, scene.prohibited)
    any_flags = overlap_flags | region_flags
    return {
        "overlap_rate": float(overlap_flags.mean()),
        "region_rate": float(region_flags.mean()),
        "any_rate": float(any_flags.mean()),
        "overlap_flags": overlap_flags,
        "region_flags": region_flags,
        "any_flags": any_flags,
    }


def measure_prior_acceptance(
    rng: np.random.Generator,
    n_targets: int,
    n_prohibited: int = 3,
    trials: int = 200_000,
    target_w: float = TARGET_W,
    prohibited_w: float = PROHIBITED_W,
    scenes: list[SceneRecord] | None = None,
) -> float:
    """Fraction of joint standard-normal draws of all targets that are infraction-free.

    With ``scenes`` given, prohibited regions cycle through those records;
    otherwise each trial draws a fresh prohibited region from the prior.
    """
    acc = 0
    done = 0
    chunk = 100_000
    while done < trials:
        m = min(chunk, trials - done)
        T = rng.standard_normal((m, n_targets, 2))
        boxes = np.concatenate([T, np.full((m, n_targets, 1), target_w)], axis=2)
        ok = ~_pairwise_overlap_any(boxes)
        if scenes is not None:
            for s in range(m):
                scene = scenes[(done + s) % len(scenes)]
                if ok[s]:
                    ok[s] = not _region_overlap_any(boxes[s : s + 1], scene.prohibited)[0]
        elif n_prohibited > 0:
            P = rng.standard_normal((m, n_prohibited, 2))
            d = np.abs(T[:, :, None, :] - P[:, None, :, :])
            thr = (target_w + prohibited_w) / 2.0
            hit = (d[..., 0] < thr) & (d[..., 1] < thr)
            ok &= ~hit.any(axis=(1, 2))
        acc += int(ok.sum())
        done += m
    return acc / trials


def clevr_box_size(z_i: float, d_z: float) -> float:
    """Bounding-box side estimate from object height and camera-axis distance."""
    if d_z <= 0:
        raise ValueError("camera-axis distance must be positive")
    return z_i / np.sqrt(d_z)


# ---------------------------------------------------------------------------
# dataset files (newline-delimited JSON plus a manifest sidecar)
# ---------------------------------------------------------------------------

def record_to_json(rec: SceneRecord) -> str:
    return json.dumps(
        {
            "prohibited": [b.as_row() for b in rec.prohibited],
            "targets": [b.as_row() for b in rec.targets],
        }
    )


def record_from_json(line: str) -> SceneRecord:
    doc = json.loads(line)
    return SceneRecord(
        prohibited=[Box(*row) for row in doc["prohibited"]],
        targets=[Box(*row) for row in doc["targets"]],
    )


def save_records(path, records: list[SceneRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            rec.validate()
            fh.write(record_to_json(rec) + "\n")


def load_records(path) -> list[SceneRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(line))
    return out


def generate_dataset(
    task: str,
    count: int,
    seed: int,
    n_min: int,
    n_max: int,
    n_prohibited: int = 3,
) -> tuple[list[SceneRecord], dict]:
    """Reproducible dataset plus its manifest; same seed gives identical records."""
    if task not in ("boxes-cond", "bbox"):
        raise ValueError(f"unknown task {task!r}")
    if count < 0 or n_min < 1 or n_max < n_min:
        raise ValueError("invalid count or cardinality range")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        n = int(rng.integers(n_min, n_max + 1)) if n_max > n_min else n_min
        if task == "boxes-cond":
            records.append(gen_task1(rng, n, n_prohibited=n_prohibited))
        else:
            records.append(gen_task2(rng, n))
    manifest = {
        "format": MANIFEST_FORMAT,
        "task": task,
        "seed": seed,
        "count": count,
        "n_min": n_min,
        "n_max": n_max,
        "n_prohibited": n_prohibited if task == "boxes-cond" else 0,
        "target_w": TARGET_W,
        "prohibited_w": PROHIBITED_W,
        "raster": {"size": RASTER_SIZE, "half_extent": RASTER_HALF_EXTENT},
    }
    return records, manifest
