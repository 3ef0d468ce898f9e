"""Adaptive Dormand-Prince 4(5) and fixed-step RK4 integration over state tuples.

State is a tuple of arrays ("tree"); the same stepping code runs on numpy arrays
for plain integration and on autodiff Vars for backprop-through-the-solver (the
leaves only need +, scalar *, so both work). The adaptive loop is numpy-only and
controls the step with the standard PI controller; its error norm spans every
component of the augmented state, so log-density and regularization channels are
integrated to the same accuracy as the state itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SolverConfig",
    "IntegrationResult",
    "SolverError",
    "NfeLimitError",
    "NonFiniteError",
    "integrate",
    "rk4_fixed",
    "adjoint_gradients",
    "tree_map",
]


class SolverError(RuntimeError):
    pass


class NfeLimitError(SolverError):
    pass


class NonFiniteError(SolverError):
    pass


@dataclass
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    n_steps: int = 16
    t0: float = 0.0
    t1: float = 1.0
    max_nfe: int = 100_000

    def validate(self) -> None:
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not self.t0 < self.t1:
            raise ValueError("need t0 < t1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass
class IntegrationResult:
    final: tuple
    nfe: int
    accepted: int
    rejected: int
    trajectory: list | None = None


def tree_map(f, *trees):
    return tuple(f(*leaves) for leaves in zip(*trees))


def _axpy(y, h, k):
    """y + h*k over trees; works for numpy leaves and Var leaves alike."""
    return tree_map(lambda a, b: a + h * b, y, k)


def _combine(y, h, coeffs, ks):
    out = y
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        out = _axpy(out, h * c, k)
    return out


# Dormand-Prince (1980) coefficients; fifth-order propagation, embedded fourth order.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def _rms_scaled(tree, scales):
    total = 0.0
    count = 0
    for v, s in zip(tree, scales):
        q = np.asarray(v) / s
        total += float(np.sum(q * q))
        count += q.size
    return math.sqrt(total / count) if count else 0.0


def _scales(y0, y1, atol, rtol):
    return tuple(
        atol + rtol * np.maximum(np.abs(np.asarray(a)), np.abs(np.asarray(b)))
        for a, b in zip(y0, y1)
    )


def _tree_finite(tree) -> bool:
    return all(np.all(np.isfinite(np.asarray(v))) for v in tree)


def _initial_step(field, ta, y0, f0, sign, span, atol, rtol):
    scales = _scales(y0, y0, atol, rtol)
    d0 = _rms_scaled(y0, scales)
    d1 = _rms_scaled(f0, scales)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = _axpy(y0, sign * h0, f0)
    f1 = field(ta + sign * h0, y1)
    d2 = _rms_scaled(tree_map(lambda a, b: a - b, f1, f0), scales) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def integrate(
    dynamics,
    y0,
    cfg: SolverConfig,
    direction: str = "forward",
    method: str = "dopri5",
    record_trajectory: bool = False,
) -> IntegrationResult:
    """Integrate dy/dt = dynamics(t, y) across [t0, t1] in the given direction.

    ``forward`` runs t0 -> t1, ``backward`` runs t1 -> t0. ``dopri5`` adapts the
    step; ``rk4`` takes cfg.n_steps equal steps. Raises NfeLimitError past
    cfg.max_nfe and NonFiniteError when the state stops being finite.
    """
    cfg.validate()
    if direction == "forward":
        ta, tb = cfg.t0, cfg.t1
    elif direction == "backward":
        ta, tb = cfg.t1, cfg.t0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    y0 = tuple(np.asarray(v, dtype=np.float64) for v in y0)
    if not _tree_finite(y0):
        raise NonFiniteError("initial state is not finite")

    if method == "rk4":
        traj = [(ta, y0)] if record_trajectory else None
        nfe = 0
        y = y0
        h = (tb - ta) / cfg.n_steps
        t = ta
        for _ in range(cfg.n_steps):
            y = _rk4_step(dynamics, t, y, h)
            nfe += 4
            t += h
            if not _tree_finite(y):
                raise NonFiniteError(f"state became non-finite at t={t:.6g}")
            if traj is not None:
                traj.append((t, y))
        return IntegrationResult(final=y, nfe=nfe, accepted=cfg.n_steps, rejected=0, trajectory=traj)
    if method != "dopri5":
        raise ValueError(f"unknown method {method!r}")

    sign = 1.0 if tb >= ta else -1.0
    span = abs(tb - ta)
    t = ta
    y = y0
    nfe = 1
    k1 = dynamics(t, y)
    if not _tree_finite(k1):
        raise NonFiniteError("dynamics not finite at the initial state")
    h = _initial_step(dynamics, ta, y, k1, sign, span, cfg.atol, cfg.rtol)
    if not (h > 0 and math.isfinite(h)):
        h = 1e-3 * span
    nfe += 1

    traj = [(ta, y0)] if record_trajectory else None
    accepted = rejected = 0
    safety, beta = 0.9, 0.04
    expo1 = 0.2 - beta * 0.75
    facold = 1e-4
    last_rejected = False
    remaining = span

    while remaining > 1e-14 * max(1.0, span):
        h = min(h, remaining)
        ks = [k1]
        for s in range(1, 7):
            ys = _combine(y, sign * h, _A[s], ks)
            ks.append(dynamics(t + sign * h * _C[s], ys))
            nfe += 1
            if nfe > cfg.max_nfe:
                raise NfeLimitError(
                    f"exceeded max_nfe={cfg.max_nfe} at t={t:.6g}, h={h:.3e} "
                    f"(accepted={accepted}, rejected={rejected})"
                )
        y_new = _combine(y, sign * h, _B5, ks)
        err_tree = _combine(tree_map(np.zeros_like, y), sign * h, _E, ks)
        finite = _tree_finite(y_new)
        if finite:
            scales = _scales(y, y_new, cfg.atol, cfg.rtol)
            err = _rms_scaled(err_tree, scales)
        else:
            err = float("inf")

        if err <= 1.0:
            accepted += 1
            t += sign * h
            remaining -= h
            y = y_new
            k1 = ks[6]  # FSAL: last stage evaluates at (t+h, y_new)
            if traj is not None:
                traj.append((t, y))
            fac11 = err**expo1 if err > 0 else 0.0
            fac = fac11 / (facold**beta)
            fac = max(0.1, min(5.0, fac / safety))
            h_new = h / fac
            if last_rejected:
                h_new = min(h_new, h)
            facold = max(err, 1e-4)
            h = h_new
            last_rejected = False
        else:
            rejected += 1
            last_rejected = True
            if not finite:
                h *= 0.5
                if h < 1e-14 * max(1.0, span):
                    raise NonFiniteError(f"state became non-finite at t={t:.6g}")
            else:
                fac11 = err**expo1
                h = h / min(5.0, fac11 / safety)

    return IntegrationResult(final=y, nfe=nfe, accepted=accepted, rejected=rejected, trajectory=traj)


def _rk4_step(field, t, y, h):
    k1 = field(t, y)
    k2 = field(t + 0.5 * h, _axpy(y, 0.5 * h, k1))
    k3 = field(t + 0.5 * h, _axpy(y, 0.5 * h, k2))
    k4 = field(t + h, _axpy(y, h, k3))
    inc = tree_map(lambda a, b, c, d: a + 2.0 * b + 2.0 * c + d, k1, k2, k3, k4)
    return _axpy(y, h / 6.0, inc)


def rk4_fixed(field, y0, ta: float, tb: float, n_steps: int):
    """Fixed-step classic RK4 from ta to tb over a tree of numpy arrays or Vars.

    With Var leaves inside an active Tape this records the whole integration,
    giving exact gradients of the discrete solution (backprop through the solver).
    """
    y = tuple(y0)
    h = (tb - ta) / n_steps
    t = ta
    for _ in range(n_steps):
        y = _rk4_step(field, t, y, h)
        t += h
    return y


def adjoint_gradients(
    field_vjp,
    y_end,
    ct_end,
    n_leaves: int,
    leaf_shapes,
    cfg: SolverConfig,
    t_from: float,
    t_to: float,
    method: str = "dopri5",
):
    """Continuous adjoint for a run that went t_from -> t_to and ended at y_end.

    ``field_vjp(t, y_tree, a_tree)`` must return (dy_tree, grad_y_tree,
    grad_leaves) where the gradient entries are the vjp of the dynamics with
    cotangent ``a_tree``. Returns (grad wrt y at t_from, accumulated leaf
    gradients, nfe). The state is re-simulated backward jointly with the
    adjoint, so no forward storage is needed.
    """
    k = len(y_end)
    zeros_g = tuple(np.zeros(s) for s in leaf_shapes)

    def aug(t, s):
        y = s[:k]
        a = s[k : 2 * k]
        dy, gy, gl = field_vjp(t, y, a)
        return (
            tuple(dy)
            + tuple(-np.asarray(g) for g in gy)
            + tuple(-np.asarray(g) for g in gl)
        )

    s0 = tuple(y_end) + tuple(ct_end) + zeros_g
    sub = SolverConfig(
        rtol=cfg.rtol,
        atol=cfg.atol,
        n_steps=cfg.n_steps,
        t0=min(t_from, t_to),
        t1=max(t_from, t_to),
        max_nfe=cfg.max_nfe,
    )
    direction = "backward" if t_to > t_from else "forward"
    res = integrate(aug, s0, sub, direction=direction, method=method)
    a_start = res.final[k : 2 * k]
    g_leaves = res.final[2 * k :]
    return a_start, g_leaves, res.nfe
