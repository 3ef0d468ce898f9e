"""Adam optimization with early stopping on a held-out set.

Training minimizes the mean negative log-likelihood plus the trajectory
penalties. Batches are shuffled each epoch with a seeded generator, so a run is
fully reproducible from its seed. The best-validation parameters are kept and
restored at the end (also after a non-finite loss abort).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import flow as flow_mod
from . import ode
from .flow import FlowModel, TrainConfig
from .tasks import SceneRecord, condition_image


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0


def adam_init(leaves: list[np.ndarray], lr: float, warmup_steps: int = 0) -> OptimizerState:
    return OptimizerState(
        m=[np.zeros_like(a) for a in leaves],
        v=[np.zeros_like(a) for a in leaves],
        lr=lr,
        warmup_steps=warmup_steps,
    )


def adam_step(state: OptimizerState, leaves: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place update; ``leaves`` must alias the model's parameter arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    lr = state.lr
    if state.warmup_steps > 0 and state.step < state.warmup_steps:
        lr *= state.step / state.warmup_steps
    for p, g, m, v in zip(leaves, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def batch_from_records(records: list[SceneRecord], conditional: bool, d3: bool = False):
    """(x rows, condition image or None) pairs ready for the loss."""
    out = []
    for rec in records:
        cond = condition_image(rec) if conditional else None
        out.append((rec.target_rows(d3=d3), cond))
    return out


def dataset_nll(model: FlowModel, data, tc: TrainConfig) -> float:
    """Mean NLL over (x, cond) pairs using the training-time integration scheme."""
    zero_pen = TrainConfig(
        lambda_l2=0.0,
        lambda_l2div=0.0,
        grad_mode="adjoint",
        ode_mode=tc.ode_mode,
    )
    groups = flow_mod._group_by_cardinality(data)
    total = 0.0
    for N, idxs in groups.items():
        xs = np.stack([np.asarray(data[i][0], dtype=np.float64) for i in idxs])
        conds = None
        if model.cfg.conditional:
            conds = np.stack([np.asarray(data[i][1]) for i in idxs])
        B, _, d = xs.shape
        emb = None
        if conds is not None:
            emb = flow_mod.embed_condition(model, conds)
        f = flow_mod._numeric_field(model, B, N, emb)
        method = "rk4" if zero_pen.ode_mode == "fixed" else "dopri5"
        res = ode.integrate(
            f, flow_mod._augmented_y0(xs.reshape(B * N, d), B), model.solver, "backward", method=method
        )
        z, dlp = res.final[0], res.final[1]
        base = flow_mod._base_log_prob_rows(z, B, N, d)
        total += float(np.sum(-(base + dlp)))
    return total / len(data)


def mean_eval_nfe(model: FlowModel, data, cap: int = 32) -> float:
    """Mean adaptive-solver NFE for scoring a few held-out points (cost proxy)."""
    subset = data[: min(cap, len(data))]
    nfes = []
    for x, cond in subset:
        try:
            _, nfe = flow_mod.log_prob_with_nfe(model, x, cond)
        except ode.SolverError:
            nfe = model.solver.max_nfe
        nfes.append(nfe)
    return float(np.mean(nfes)) if nfes else 0.0


@dataclass
class TrainResult:
    model: FlowModel
    history: list[dict]
    best_val_nll: float
    stopped_reason: str
    aborted: bool = False


def train(
    model: FlowModel,
    train_data,
    val_data,
    tc: TrainConfig,
    log=None,
    track_eval_nfe: bool = True,
) -> TrainResult:
    """Adam over shuffled minibatches; stops early when validation stalls.

    ``train_data``/``val_data`` are lists of (x rows, condition image or None).
    The returned model carries the best-validation parameters seen.
    """
    tc.validate()
    if not train_data or not val_data:
        raise ValueError("need non-empty train and validation sets")
    rng = np.random.default_rng(tc.seed)
    named = model.named_leaves()
    leaves = [arr for _, arr in named]
    opt = adam_init(leaves, tc.lr, warmup_steps=tc.warmup_steps)
    best = [a.copy() for a in leaves]
    best_val = dataset_nll(model, val_data, tc)
    history: list[dict] = []
    patience_left = tc.patience
    stopped = "epochs"
    aborted = False
    t_start = time.time()

    for epoch in range(tc.epochs):
        order = rng.permutation(len(train_data))
        train_nll_accum = 0.0
        seen = 0
        try:
            for lo in range(0, len(order), tc.batch_size):
                idxs = order[lo : lo + tc.batch_size]
                batch = [train_data[i] for i in idxs]
                loss, grads, stats = flow_mod.nll_loss(model, batch, tc)
                adam_step(opt, leaves, grads)
                train_nll_accum += stats["nll_mean"] * len(batch)
                seen += len(batch)
        except (FloatingPointError, ode.SolverError) as exc:
            aborted = True
            stopped = f"aborted: {exc}"
            break
        train_nll = train_nll_accum / max(seen, 1)
        val_nll = dataset_nll(model, val_data, tc)
        nfe_mean = mean_eval_nfe(model, val_data) if track_eval_nfe else 0.0
        history.append(
            {"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll, "nfe_mean": nfe_mean}
        )
        if log is not None:
            log(
                f"epoch {epoch}: train_nll={train_nll:.4f} val_nll={val_nll:.4f} "
                f"nfe={nfe_mean:.1f}"
            )
        if val_nll < best_val - 1e-12:
            best_val = val_nll
            best = [a.copy() for a in leaves]
            patience_left = tc.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                stopped = "early_stop"
                break
        if tc.max_seconds is not None and time.time() - t_start > tc.max_seconds:
            stopped = "time_budget"
            break

    for arr, saved in zip(leaves, best):
        arr[...] = saved
    return TrainResult(
        model=model, history=history, best_val_nll=best_val, stopped_reason=stopped, aborted=aborted
    )


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,train_nll,val_nll,nfe_mean"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_nll']:.6f},{row['val_nll']:.6f},{row['nfe_mean']:.2f}"
        )
    return "\n".join(lines) + "\n"
