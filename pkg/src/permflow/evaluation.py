"""Evaluation metrics: NLL, infraction/acceptance rates, matched IOU, invariance audit,
per-integration cost, and the non-invariant full-covariance Gaussian comparator."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import flow as flow_mod
from . import ode
from .flow import FlowModel
from .tasks import Box, SceneRecord, condition_image, infraction_report

EVAL_REPORT_FORMAT = "permflow-eval-report-v1"


@dataclass
class EvalReport:
    nll_mean: float = float("nan")
    nll_stderr: float = float("nan")
    acceptance_rate: float = float("nan")
    overlap_rate: float = float("nan")
    region_rate: float = float("nan")
    iou_mean: float = float("nan")
    nfe_mean: float = float("nan")
    invariance_max_dev: float = float("nan")
    n_scenes: int = 0
    samples_per_scene: int = 0
    seed: int = 0

    def to_json(self) -> str:
        doc = {"format": EVAL_REPORT_FORMAT}
        doc.update(asdict(self))
        return json.dumps(doc, indent=2)


def _scene_condition(model: FlowModel, scene: SceneRecord):
    return condition_image(scene) if model.cfg.conditional else None


def eval_acceptance(model, scenes: list[SceneRecord], samples_per_scene: int, rng, sampler=None) -> dict:
    """Sample each scene and aggregate infraction rates over all drawn sets.

    ``sampler(scene, count, rng) -> (sets (count, n, d), nfe)`` overrides the
    flow sampler (used to score oracles and raw prior draws with the same
    bookkeeping). Solver failures are counted as invalid samples (with a
    warning) rather than aborting the evaluation.
    """
    overlap = []
    region = []
    bad = []
    nfes = []
    for scene in scenes:
        try:
            if sampler is not None:
                xs, nfe = sampler(scene, samples_per_scene, rng)
            else:
                cond = _scene_condition(model, scene)
                xs, _, nfe = flow_mod.sample_batch(model, scene.n, cond, samples_per_scene, rng)
        except ode.SolverError as exc:
            warnings.warn(f"solver failure while sampling a scene: {exc}")
            overlap.append(np.ones(samples_per_scene, dtype=bool))
            region.append(np.ones(samples_per_scene, dtype=bool))
            bad.append(np.ones(samples_per_scene, dtype=bool))
            nfes.append(model.solver.max_nfe)
            continue
        rep = infraction_report(xs, scene)
        overlap.append(rep["overlap_flags"])
        region.append(rep["region_flags"])
        bad.append(rep["any_flags"])
        nfes.append(nfe)
    overlap = np.concatenate(overlap)
    region = np.concatenate(region)
    bad = np.concatenate(bad)
    return {
        "overlap_rate": float(overlap.mean()),
        "region_rate": float(region.mean()),
        "any_rate": float(bad.mean()),
        "acceptance_rate": float(1.0 - bad.mean()),
        "nfe_mean": float(np.mean(nfes)),
    }


def box_iou(a: Box, b: Box) -> float:
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.w / 2, b.cy + b.w / 2) - max(a.cy - a.w / 2, b.cy - b.w / 2)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.w * a.w + b.w * b.w - inter
    return inter / union if union > 0 else 0.0


def greedy_match_iou(samples: list[Box], truths: list[Box]) -> list[float]:
    """Repeatedly pair the globally best remaining (sample, truth) box pair."""
    if not samples or not truths:
        return []
    M = np.array([[box_iou(s, t) for t in truths] for s in samples])
    matched = []
    free_s = set(range(len(samples)))
    free_t = set(range(len(truths)))
    for _ in range(min(len(samples), len(truths))):
        best = None
        for i in free_s:
            for j in free_t:
                if best is None or M[i, j] > M[best[0], best[1]]:
                    best = (i, j)
        matched.append(float(M[best[0], best[1]]))
        free_s.discard(best[0])
        free_t.discard(best[1])
    return matched


def eval_iou(model, scenes: list[SceneRecord], samples_per_scene: int, rng, d3=False) -> float:
    """Mean matched IOU pooled over all sampled sets and scenes (bbox task)."""
    from .tasks import decode_boxes

    ious = []
    for scene in scenes:
        cond = _scene_condition(model, scene)
        xs, _, _ = flow_mod.sample_batch(model, scene.n, cond, samples_per_scene, rng)
        for s in range(xs.shape[0]):
            boxes = decode_boxes(xs[s], d3=d3)
            ious.extend(greedy_match_iou(boxes, scene.targets))
    return float(np.mean(ious)) if ious else 0.0


def eval_nll(model, data) -> tuple[float, float]:
    """Adaptive-solver per-set NLL mean and standard error over (x, cond) pairs."""
    vals = []
    for x, cond in data:
        vals.append(-flow_mod.log_prob(model, x, cond))
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0


def invariance_audit(model, data, n_perms: int, rng) -> float:
    """Worst |log_prob(perm(x)) - log_prob(x)| across datapoints and permutations."""
    worst = 0.0
    for x, cond in data:
        lp = flow_mod.log_prob(model, x, cond)
        n = x.shape[0]
        for _ in range(n_perms):
            sigma = rng.permutation(n)
            dev = abs(flow_mod.log_prob(model, x[sigma], cond) - lp)
            worst = max(worst, dev)
    return worst


# ---------------------------------------------------------------------------
# trivial Gaussian comparator (not permutation invariant)
# ---------------------------------------------------------------------------

@dataclass
class GaussianBaseline:
    mean: np.ndarray  # (N*D,)
    cov: np.ndarray  # (N*D, N*D)
    n: int
    d: int

    def log_prob(self, x: np.ndarray) -> float:
        v = np.asarray(x, dtype=np.float64).reshape(-1) - self.mean
        k = v.size
        sign, logdet = np.linalg.slogdet(self.cov)
        sol = np.linalg.solve(self.cov, v)
        return float(-0.5 * (k * np.log(2 * np.pi) + logdet + v @ sol))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.cov)
        z = rng.standard_normal(self.mean.size)
        return (self.mean + L @ z).reshape(self.n, self.d)


def gaussian_baseline(data) -> GaussianBaseline:
    """Full-covariance normal fit on flattened fixed-cardinality sets (stored order)."""
    xs = [np.asarray(x, dtype=np.float64) for x, _ in data]
    n, d = xs[0].shape
    if any(x.shape != (n, d) for x in xs):
        raise ValueError("the Gaussian comparator needs fixed-cardinality sets")
    flat = np.stack([x.reshape(-1) for x in xs])
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / len(xs)
    # ridge keeps the fit usable when the sample covariance is singular
    jitter = 1e-6
    while np.linalg.slogdet(cov)[0] <= 0:
        cov = cov + jitter * np.eye(cov.shape[0])
        jitter *= 10
    return GaussianBaseline(mean=mean, cov=cov, n=n, d=d)


def gaussian_baseline_report(
    baseline: GaussianBaseline, data, scenes: list[SceneRecord], samples_per_scene: int, rng
) -> EvalReport:
    vals = np.array([-baseline.log_prob(x) for x, _ in data])
    overlap = []
    region = []
    bad = []
    for scene in scenes:
        xs = np.stack([baseline.sample(rng) for _ in range(samples_per_scene)])
        rep = infraction_report(xs, scene)
        overlap.append(rep["overlap_flags"])
        region.append(rep["region_flags"])
        bad.append(rep["any_flags"])
    bad = np.concatenate(bad)
    return EvalReport(
        nll_mean=float(vals.mean()),
        nll_stderr=float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0,
        acceptance_rate=float(1.0 - bad.mean()),
        overlap_rate=float(np.concatenate(overlap).mean()),
        region_rate=float(np.concatenate(region).mean()),
        n_scenes=len(scenes),
        samples_per_scene=samples_per_scene,
    )
