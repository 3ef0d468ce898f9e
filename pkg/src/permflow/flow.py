"""The conditional permutation-invariant flow: base density, sampling, scoring, objective.

Transport runs the equivariant dynamics forward in time to sample (base noise into
data space) and backward to score. The log-density channel integrates the exact
divergence; two squared-norm regularization channels ride along for the training
penalty. The base distribution is an i.i.d. standard normal per element coordinate,
which is exchangeable across set elements, so densities inherit permutation
invariance from the equivariant transport.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import ode
from .autodiff import Tape, Var
from .dynamics import DynamicsConfig, DynamicsParams
from .nets import ConvEmbedParams, MLPParams, conv_embed, params_from_doc, params_to_doc
from .ode import SolverConfig

CHECKPOINT_FORMAT = "permflow-checkpoint-v1"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowModel:
    params: DynamicsParams
    cfg: DynamicsConfig
    solver: SolverConfig
    d: int
    seed: int = 0

    def named_leaves(self):
        return dyn.named_leaves(self.params)


@dataclass
class ScoredSample:
    x: np.ndarray
    log_prob: float
    nfe: int = 0
    trajectory: list | None = None


@dataclass
class TrainConfig:
    lambda_l2: float = 0.01
    lambda_l2div: float = 0.01
    lr: float = 1e-3
    batch_size: int = 100
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    grad_mode: str = "adjoint"  # adjoint | fixed_backprop
    ode_mode: str = "fixed"  # integration scheme while training: fixed | adaptive
    max_seconds: float | None = None
    warmup_steps: int = 0  # linear learning-rate ramp over the first optimizer steps

    def validate(self) -> None:
        if self.lambda_l2 < 0 or self.lambda_l2div < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_mode not in ("adjoint", "fixed_backprop"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.ode_mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown ode_mode {self.ode_mode!r}")
        if self.grad_mode == "fixed_backprop" and self.ode_mode != "fixed":
            raise ValueError("fixed_backprop requires ode_mode='fixed'")


def base_log_prob(z: np.ndarray) -> float:
    """Standard-normal log density of a whole set (nats)."""
    z = np.asarray(z)
    return -0.5 * z.size * LOG_2PI - 0.5 * float(np.sum(z * z))


def _base_log_prob_rows(z: np.ndarray, B: int, N: int, d: int) -> np.ndarray:
    sq = np.sum(z.reshape(B, N * d) ** 2, axis=1)
    return -0.5 * N * d * LOG_2PI - 0.5 * sq


def embed_condition(model: FlowModel, images: np.ndarray | None):
    """Embedding rows (B, h) for a stack of condition images, or None when unconditioned."""
    if not model.cfg.conditional:
        return None
    if images is None:
        raise ValueError("conditional model needs a condition image")
    with ad.stop_taping():
        return conv_embed(model.params.embed, images).value


def _numeric_field(model: FlowModel, B: int, N: int, emb_values: np.ndarray | None):
    emb_var = None if emb_values is None else Var(emb_values)

    def field(t, y):
        with Tape():
            xv = Var(y[0])
            terms = dyn.dynamics_terms(model.params, model.cfg, xv, (B, N), t, emb_var)
            return (
                terms.velocity.value,
                terms.divergence.value,
                terms.l2.value,
                terms.l2div.value,
            )

    return field


def _augmented_y0(x: np.ndarray, B: int) -> tuple:
    return (x, np.zeros(B), np.zeros(B), np.zeros(B))


def sample(
    model: FlowModel,
    n: int,
    cond: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    record_trajectory: bool = False,
) -> ScoredSample:
    """Draw one set of n elements; log_prob comes from the divergence integral."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = rng or np.random.default_rng()
    emb = embed_condition(model, None if cond is None else np.asarray(cond)[None])
    z = rng.standard_normal((n, model.d))
    field = _numeric_field(model, 1, n, emb)
    res = ode.integrate(
        field, _augmented_y0(z, 1), model.solver, "forward", record_trajectory=record_trajectory
    )
    x, dlp = res.final[0], res.final[1][0]
    traj = None
    if record_trajectory:
        traj = [(t, y[0].copy()) for t, y in res.trajectory]
    return ScoredSample(x=x, log_prob=base_log_prob(z) - dlp, nfe=res.nfe, trajectory=traj)


def sample_batch(
    model: FlowModel,
    n: int,
    cond: np.ndarray | None,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw ``count`` sets of size n sharing one condition, jointly integrated.

    Returns (xs (count, n, d), log_probs (count,), nfe of the joint integration).
    """
    emb = embed_condition(model, None if cond is None else np.asarray(cond)[None])
    if emb is not None:
        emb = np.repeat(emb, count, axis=0)
    z = rng.standard_normal((count * n, model.d))
    field = _numeric_field(model, count, n, emb)
    res = ode.integrate(field, _augmented_y0(z, count), model.solver, "forward")
    xs = res.final[0].reshape(count, n, model.d)
    dlp = res.final[1]
    base = _base_log_prob_rows(z, count, n, model.d)
    return xs, base - dlp, res.nfe


def log_prob(model: FlowModel, x: np.ndarray, cond: np.ndarray | None = None) -> float:
    lp, _ = log_prob_with_nfe(model, x, cond)
    return lp


def log_prob_with_nfe(model: FlowModel, x: np.ndarray, cond: np.ndarray | None = None):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_prob input must be finite")
    n = x.shape[0]
    emb = embed_condition(model, None if cond is None else np.asarray(cond)[None])
    field = _numeric_field(model, 1, n, emb)
    res = ode.integrate(field, _augmented_y0(x, 1), model.solver, "backward")
    z, dlp = res.final[0], res.final[1][0]
    return base_log_prob(z) + dlp, res.nfe


def roundtrip(model: FlowModel, x: np.ndarray, cond: np.ndarray | None = None) -> float:
    """Max-abs reconstruction error of forward(backward(x))."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    emb = embed_condition(model, None if cond is None else np.asarray(cond)[None])
    field = _numeric_field(model, 1, n, emb)
    back = ode.integrate(field, _augmented_y0(x, 1), model.solver, "backward")
    fwd = ode.integrate(field, _augmented_y0(back.final[0], 1), model.solver, "forward")
    return float(np.max(np.abs(fwd.final[0] - x)))


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

def _var_params(params: DynamicsParams):
    """Clone the parameter tree with Var leaves; returns (tree, ordered leaf Vars)."""
    leaf_vars: list[Var] = []

    def mlp(p: MLPParams) -> MLPParams:
        layers = []
        for W, b in p.layers:
            wv, bv = Var(W), Var(b)
            leaf_vars.extend([wv, bv])
            layers.append((wv, bv))
        return MLPParams(layers)

    pair = mlp(params.pair)
    single = mlp(params.single)
    embed = None
    if params.embed is not None:
        convs = []
        for k, b in params.embed.convs:
            kv, bv = Var(k), Var(b)
            leaf_vars.extend([kv, bv])
            convs.append((kv, bv))
        wv, bv = Var(params.embed.dense[0]), Var(params.embed.dense[1])
        leaf_vars.extend([wv, bv])
        embed = ConvEmbedParams(convs, (wv, bv), params.embed.stride, params.embed.in_shape)
    return DynamicsParams(pair=pair, single=single, embed=embed), leaf_vars


def _group_by_cardinality(batch):
    groups: dict[int, list[int]] = {}
    for idx, (x, _) in enumerate(batch):
        groups.setdefault(x.shape[0], []).append(idx)
    return dict(sorted(groups.items()))


def nll_loss(model: FlowModel, batch, tc: TrainConfig):
    """Mean NLL plus trajectory-integrated penalties; returns (loss, grads, stats).

    ``batch`` is a list of (x (N,D), cond image or None); set sizes may be mixed,
    scenes are grouped by cardinality and each group is integrated jointly.
    grads is a list of arrays aligned with model.named_leaves().
    """
    tc.validate()
    if not batch:
        raise ValueError("empty batch")
    groups = _group_by_cardinality(batch)
    total = len(batch)
    n_leaves = len(dyn.named_leaves(model.params))
    grad_total = [None] * n_leaves
    loss_total = 0.0
    nll_sum = 0.0
    l2_sum = 0.0
    l2div_sum = 0.0
    nfe_total = 0

    for N, idxs in groups.items():
        xs = np.stack([np.asarray(batch[i][0], dtype=np.float64) for i in idxs])
        conds = None
        if model.cfg.conditional:
            conds = np.stack([np.asarray(batch[i][1]) for i in idxs])
        w = len(idxs) / total
        if tc.grad_mode == "fixed_backprop":
            loss, grads, stats = _group_loss_backprop(model, xs, conds, tc)
        else:
            loss, grads, stats = _group_loss_adjoint(model, xs, conds, tc)
        loss_total += w * loss
        nll_sum += stats["nll_sum"]
        l2_sum += stats["l2_sum"]
        l2div_sum += stats["l2div_sum"]
        nfe_total += stats["nfe"]
        for k in range(n_leaves):
            g = grads[k]
            if g is None:
                continue
            grad_total[k] = w * g if grad_total[k] is None else grad_total[k] + w * g

    named = dyn.named_leaves(model.params)
    grads_out = [
        np.zeros_like(arr) if g is None else g for (_, arr), g in zip(named, grad_total)
    ]
    if not np.isfinite(loss_total):
        raise FloatingPointError("loss is not finite")
    stats = {
        "nll_mean": nll_sum / total,
        "l2_mean": l2_sum / total,
        "l2div_mean": l2div_sum / total,
        "nfe": nfe_total,
    }
    return loss_total, grads_out, stats


def _group_loss_backprop(model, xs, conds, tc: TrainConfig):
    B, N, d = xs.shape
    var_params, leaf_vars = _var_params(model.params)
    with Tape() as tape:
        emb = None
        if conds is not None:
            emb = conv_embed(var_params.embed, conds)

        def field(t, y):
            terms = dyn.dynamics_terms(var_params, model.cfg, y[0], (B, N), t, emb)
            return (terms.velocity, terms.divergence, terms.l2, terms.l2div)

        x0 = Var(xs.reshape(B * N, d))
        y0 = (x0, Var(np.zeros(B)), Var(np.zeros(B)), Var(np.zeros(B)))
        y = ode.rk4_fixed(field, y0, model.solver.t1, model.solver.t0, model.solver.n_steps)
        z, dlp, l2, l2d = y
        zsq = ad.sum_axis(ad.reshape(ad.mul(z, z), (B, N * d)), axis=1)
        base = -0.5 * N * d * LOG_2PI + (-0.5) * zsq
        logp = ad.add(base, dlp)
        # backward-time run: accumulators end negative; penalties are their negations
        per_set = ad.add(
            ad.neg(logp),
            ad.add(tc.lambda_l2 * ad.neg(l2), tc.lambda_l2div * ad.neg(l2d)),
        )
        loss = (1.0 / B) * ad.sum_all(per_set)
    grads = ad.vjp(tape, loss, 1.0, leaf_vars)
    stats = {
        "nll_sum": float(np.sum(-(logp.value))),
        "l2_sum": float(np.sum(-l2.value)),
        "l2div_sum": float(np.sum(-l2d.value)),
        "nfe": 4 * model.solver.n_steps,
    }
    return float(loss.value), grads, stats


def _group_loss_adjoint(model, xs, conds, tc: TrainConfig):
    B, N, d = xs.shape
    var_params, leaf_vars = _var_params(model.params)
    n_dyn_leaves = len(leaf_vars)

    conv_tape = None
    emb_var = None
    conv_leaf_count = 0
    if conds is not None:
        # the embedder's leaves are the tail of leaf_vars (pair, single, then embed)
        conv_leaf_count = 2 * len(model.params.embed.convs) + 2
        conv_tape = Tape()
        with conv_tape:
            emb_var = conv_embed(var_params.embed, conds)
    dyn_leaf_vars = leaf_vars[: n_dyn_leaves - conv_leaf_count]

    def field(t, y):
        with Tape():
            xv = Var(y[0])
            terms = dyn.dynamics_terms(model.params, model.cfg, xv, (B, N), t,
                                       None if emb_var is None else Var(emb_var.value))
            return (terms.velocity.value, terms.divergence.value, terms.l2.value, terms.l2div.value)

    # emb_var was recorded on conv_tape; inside the per-evaluation tapes below it
    # acts as a leaf, so the adjoint accumulates d loss / d embedding directly on it.

    method = "rk4" if tc.ode_mode == "fixed" else "dopri5"
    y0 = _augmented_y0(xs.reshape(B * N, d), B)
    res = ode.integrate(field, y0, model.solver, "backward", method=method)
    z, dlp, l2, l2d = res.final
    base = _base_log_prob_rows(z, B, N, d)
    logp = base + dlp
    loss = float(np.mean(-logp - tc.lambda_l2 * l2 - tc.lambda_l2div * l2d))

    # cotangents of the loss at the end of the scoring run
    ct_x = z.reshape(B * N, d) / B  # d(-base)/dz = z, averaged
    ct_dlp = np.full(B, -1.0 / B)
    ct_l2 = np.full(B, -tc.lambda_l2 / B)
    ct_l2d = np.full(B, -tc.lambda_l2div / B)

    adj_leaves = dyn_leaf_vars + ([emb_var] if emb_var is not None else [])

    def field_vjp(t, y, a):
        with Tape() as tape:
            xv = Var(y[0])
            terms = dyn.dynamics_terms(var_params, model.cfg, xv, (B, N), t, emb_var)
            outs = [terms.velocity, terms.divergence, terms.l2, terms.l2div]
        grads = ad.vjp(tape, outs, list(a), [xv] + adj_leaves)
        dy = tuple(o.value for o in outs)
        gx = grads[0] if grads[0] is not None else np.zeros_like(y[0])
        gy = (gx, np.zeros(B), np.zeros(B), np.zeros(B))
        gl = [
            g if g is not None else np.zeros(lv.value.shape)
            for g, lv in zip(grads[1:], adj_leaves)
        ]
        return dy, gy, gl

    leaf_shapes = [lv.value.shape for lv in adj_leaves]
    a_start, g_leaves, adj_nfe = ode.adjoint_gradients(
        field_vjp,
        res.final,
        (ct_x, ct_dlp, ct_l2, ct_l2d),
        len(adj_leaves),
        leaf_shapes,
        model.solver,
        model.solver.t1,
        model.solver.t0,
        method=method,
    )
    grads = list(g_leaves[: len(dyn_leaf_vars)])
    if emb_var is not None:
        g_emb = g_leaves[len(dyn_leaf_vars)]
        conv_grads = ad.vjp(conv_tape, emb_var, g_emb, leaf_vars[len(dyn_leaf_vars):])
        grads += [g if g is not None else np.zeros_like(lv.value)
                  for g, lv in zip(conv_grads, leaf_vars[len(dyn_leaf_vars):])]
    stats = {
        "nll_sum": float(np.sum(-logp)),
        "l2_sum": float(np.sum(-l2)),
        "l2div_sum": float(np.sum(-l2d)),
        "nfe": res.nfe + adj_nfe,
    }
    return loss, grads, stats


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_to_doc(model: FlowModel) -> dict:
    m = {
        "d": model.d,
        "seed": model.seed,
        "dynamics": {
            "use_time": model.cfg.use_time,
            "condition_in_single": model.cfg.condition_in_single,
            "condition_in_pair": model.cfg.condition_in_pair,
            "embed_width": model.cfg.embed_width,
            "ablation": model.cfg.ablation,
        },
        "solver": {
            "rtol": model.solver.rtol,
            "atol": model.solver.atol,
            "n_steps": model.solver.n_steps,
            "t0": model.solver.t0,
            "t1": model.solver.t1,
            "max_nfe": model.solver.max_nfe,
        },
    }
    if model.params.embed is not None:
        m["embed_input"] = {
            "in_shape": list(model.params.embed.in_shape),
            "stride": model.params.embed.stride,
        }
    return {
        "format": CHECKPOINT_FORMAT,
        "model": m,
        "params": params_to_doc(model.named_leaves()),
    }


def save_checkpoint(model: FlowModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_doc(model), fh)


def _mlp_from_arrays(arrs: dict, prefix: str) -> MLPParams:
    layers = []
    i = 0
    while f"{prefix}.{i}.W" in arrs:
        layers.append((arrs[f"{prefix}.{i}.W"], arrs[f"{prefix}.{i}.b"]))
        i += 1
    if not layers:
        raise ValueError(f"checkpoint holds no layers for {prefix!r}")
    return MLPParams(layers)


def model_from_doc(doc: dict) -> FlowModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    m = doc["model"]
    arrs = params_from_doc(doc["params"])
    cfg = DynamicsConfig(**m["dynamics"])
    pair = _mlp_from_arrays(arrs, "pair")
    single = _mlp_from_arrays(arrs, "single")
    embed = None
    if cfg.conditional:
        convs = []
        i = 0
        while f"embed.conv{i}.k" in arrs:
            convs.append((arrs[f"embed.conv{i}.k"], arrs[f"embed.conv{i}.b"]))
            i += 1
        ei = m["embed_input"]
        embed = ConvEmbedParams(
            convs,
            (arrs["embed.dense.W"], arrs["embed.dense.b"]),
            ei["stride"],
            tuple(ei["in_shape"]),
        )
    params = DynamicsParams(pair=pair, single=single, embed=embed)
    model = FlowModel(
        params=params,
        cfg=cfg,
        solver=SolverConfig(**m["solver"]),
        d=m["d"],
        seed=m.get("seed", 0),
    )
    dyn.validate_widths(model.params, model.cfg, model.d)
    return model


def load_checkpoint(path) -> FlowModel:
    with open(path) as fh:
        return model_from_doc(json.load(fh))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
