"""Permutation-equivariant set dynamics built from a pairwise force and a single-element force.

The velocity of element i is the sum of a learned pair interaction over all other
elements plus a learned per-element term. Its divergence is exact: for each input
coordinate one forward-tangent sweep (seeded only through the *first* argument of
the pair force) yields the diagonal Jacobian contributions, which also provide the
squared-Jacobian regularization density. All quantities are recorded on the active
tape, so they stay differentiable with respect to the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .nets import ConvEmbedParams, MLPParams, conv_named_leaves, mlp_forward, mlp_named_leaves

ABLATIONS = ("full", "single_only", "pair_only")


@dataclass
class DynamicsConfig:
    use_time: bool = True
    condition_in_single: bool = False
    condition_in_pair: bool = False
    embed_width: int = 0
    ablation: str = "full"

    @property
    def conditional(self) -> bool:
        return self.condition_in_single or self.condition_in_pair

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {self.ablation!r}")
        if self.conditional and self.embed_width <= 0:
            raise ValueError("conditional dynamics need embed_width > 0")


@dataclass
class DynamicsParams:
    pair: MLPParams
    single: MLPParams
    embed: ConvEmbedParams | None = None


@dataclass
class Terms:
    """Velocity field plus per-set scalar densities, as taped Vars."""

    velocity: Var
    divergence: Var | None
    l2: Var | None
    l2div: Var | None


def init_dynamics(
    rng: np.random.Generator,
    d: int,
    cfg: DynamicsConfig,
    hidden: int = 64,
    n_layers: int = 3,
    image_shape: tuple[int, int, int] = (1, 32, 32),
    conv_channels: list[int] | None = None,
    pair_shape: tuple[int, int] | None = None,
    single_shape: tuple[int, int] | None = None,
    conv_kernel: int = 3,
    conv_stride: int = 2,
    identity_start: bool = False,
) -> DynamicsParams:
    """Networks sized for feature dimension ``d`` under ``cfg``'s input scheme.

    ``pair_shape``/``single_shape`` override (n_layers, hidden) per force net.
    ``identity_start`` zeroes both output layers so the initial flow is the
    identity transport (training then starts from the base-density likelihood).
    """
    from .nets import conv_embed_init, mlp_init

    cfg.validate()
    t_extra = 1 if cfg.use_time else 0

    def build(in_w: int, inject: bool, shape: tuple[int, int]) -> MLPParams:
        layers, width = shape
        if layers < 2 and inject:
            raise ValueError("condition injection needs at least two layers")
        ws = [in_w] + [width] * (layers - 1) + [d]
        p = mlp_init(rng, ws)
        if inject and len(p.layers) >= 2:
            W, b = p.layers[1]
            grown = _glorot_cols(rng, W, cfg.embed_width)
            p.layers[1] = (grown, b)
        if identity_start:
            W_out, b_out = p.layers[-1]
            p.layers[-1] = (np.zeros_like(W_out), b_out)
        return p

    pair = build(2 * d + t_extra, cfg.condition_in_pair, pair_shape or (n_layers, hidden))
    single = build(d + t_extra, cfg.condition_in_single, single_shape or (n_layers, hidden))
    embed = None
    if cfg.conditional:
        embed = conv_embed_init(
            rng,
            image_shape,
            conv_channels or [8, 16],
            embed_width=cfg.embed_width,
            kernel=conv_kernel,
            stride=conv_stride,
        )
    return DynamicsParams(pair=pair, single=single, embed=embed)


def _glorot_cols(rng: np.random.Generator, W: np.ndarray, extra_rows: int) -> np.ndarray:
    """Widen a weight matrix's fan-in by ``extra_rows`` freshly initialized rows."""
    fan_in, fan_out = W.shape[0] + extra_rows, W.shape[1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    add = rng.uniform(-bound, bound, size=(extra_rows, fan_out))
    return np.concatenate([W, add], axis=0)


def validate_widths(params: DynamicsParams, cfg: DynamicsConfig, d: int) -> None:
    cfg.validate()
    t_extra = 1 if cfg.use_time else 0
    want_pair = 2 * d + t_extra
    want_single = d + t_extra
    if params.pair.in_width != want_pair:
        raise ValueError(f"pair net expects in width {params.pair.in_width}, config implies {want_pair}")
    if params.single.in_width != want_single:
        raise ValueError(
            f"single net expects in width {params.single.in_width}, config implies {want_single}"
        )
    for name, net, inject in (
        ("pair", params.pair, cfg.condition_in_pair),
        ("single", params.single, cfg.condition_in_single),
    ):
        if len(net.layers) >= 2:
            w1_out = net.layers[0][0].shape[1]
            w2_in = net.layers[1][0].shape[0]
            want = w1_out + (cfg.embed_width if inject else 0)
            if w2_in != want:
                raise ValueError(f"{name} net layer-2 fan-in {w2_in} != {want}")
        elif inject:
            raise ValueError(f"{name} net has one layer; cannot inject the condition")
    if params.embed is not None and params.embed.embed_width != cfg.embed_width:
        raise ValueError("embedder output width does not match cfg.embed_width")


# ---------------------------------------------------------------------------
# index and tangent-seed caches (constant across evaluations)
# ---------------------------------------------------------------------------

_PAIR_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
_ONEHOT_CACHE: dict[tuple[int, int, int], Var] = {}


def _pair_indices(B: int, N: int):
    """Row indices (i, j) for all ordered within-scene pairs, grouped by (scene, i)."""
    key = (B, N)
    hit = _PAIR_CACHE.get(key)
    if hit is not None:
        return hit
    i_idx = np.empty(B * N * (N - 1), dtype=np.intp)
    j_idx = np.empty_like(i_idx)
    scene = np.empty_like(i_idx)
    pos = 0
    for b in range(B):
        base = b * N
        for i in range(N):
            for j in range(N):
                if j == i:
                    continue
                i_idx[pos] = base + i
                j_idx[pos] = base + j
                scene[pos] = b
                pos += 1
    _PAIR_CACHE[key] = (i_idx, j_idx, scene)
    return i_idx, j_idx, scene


def _onehot(rows: int, d: int, col: int) -> Var:
    key = (rows, d, col)
    hit = _ONEHOT_CACHE.get(key)
    if hit is None:
        arr = np.zeros((rows, d))
        arr[:, col] = 1.0
        hit = Var(arr)
        _ONEHOT_CACHE[key] = hit
    return hit


# ---------------------------------------------------------------------------
# core evaluation
# ---------------------------------------------------------------------------

def dynamics_terms(
    params: DynamicsParams,
    cfg: DynamicsConfig,
    x: Var,
    batch: tuple[int, int],
    t: float,
    emb: Var | None,
    need_densities: bool = True,
) -> Terms:
    """Evaluate velocity (and optionally divergence / regularization densities).

    ``x`` holds B stacked scenes of N rows each, shape (B*N, D). ``emb`` is one
    embedding row per scene, (B, embed_width). Must run inside an active Tape
    when densities are requested (the tangent sweeps need the recorded graph).
    """
    B, N = batch
    R, D = x.value.shape
    if R != B * N:
        raise ValueError(f"state has {R} rows, expected {B}*{N}")
    if cfg.conditional and emb is None:
        raise ValueError("conditional dynamics require an embedding")
    if not cfg.conditional and emb is not None:
        raise ValueError("embedding passed to unconditional dynamics")

    tape = ad._active_tape()
    if need_densities and tape is None:
        raise RuntimeError("divergence needs an active Tape for the tangent sweeps")

    use_pair = cfg.ablation in ("full", "pair_only") and N > 1
    use_single = cfg.ablation in ("full", "single_only")

    row_scene = np.repeat(np.arange(B, dtype=np.intp), N)

    pair_out = xi = None
    if use_pair:
        i_idx, j_idx, pair_scene = _pair_indices(B, N)
        xi = ad.gather_rows(x, i_idx)
        xj = ad.gather_rows(x, j_idx)
        feats = [xi, xj]
        if cfg.use_time:
            feats.append(ad.lift(np.full((len(i_idx), 1), t)))
        pair_in = ad.concat(feats, axis=1)
        inject = ad.gather_rows(emb, pair_scene) if cfg.condition_in_pair else None
        pair_out = mlp_forward(params.pair, pair_in, inject=inject)

    single_out = xg = None
    if use_single:
        xg = ad.gather_rows(x, np.arange(R, dtype=np.intp))  # alias node: g's own input
        feats = [xg]
        if cfg.use_time:
            feats.append(ad.lift(np.full((R, 1), t)))
        single_in = ad.concat(feats, axis=1)
        inject = ad.gather_rows(emb, row_scene) if cfg.condition_in_single else None
        single_out = mlp_forward(params.single, single_in, inject=inject)

    v = None
    if pair_out is not None:
        v = ad.sum_axis(ad.reshape(pair_out, (R, N - 1, D)), axis=1)
    if single_out is not None:
        v = single_out if v is None else ad.add(v, single_out)
    if v is None:  # pair_only with N == 1
        v = ad.lift(np.zeros((R, D)))

    if not need_densities:
        return Terms(velocity=v, divergence=None, l2=None, l2div=None)

    l2 = ad.sum_axis(ad.reshape(ad.mul(v, v), (B, N * D)), axis=1)

    div = None
    l2div = None
    for col in range(D):
        seeds = []
        targets = []
        if pair_out is not None:
            seeds.append((xi, _onehot(xi.value.shape[0], D, col)))
            targets.append(pair_out)
        if single_out is not None:
            seeds.append((xg, _onehot(R, D, col)))
            targets.append(single_out)
        tangents = ad.jvp_sweep(tape, seeds, targets)
        for base, tan in zip(targets, tangents):
            if tan is None:
                continue
            rows = base.value.shape[0]
            per_scene = rows // B
            dcol = ad.slice_axis(tan, 1, col, col + 1)
            dpart = ad.sum_axis(ad.reshape(dcol, (B, per_scene)), axis=1)
            div = dpart if div is None else ad.add(div, dpart)
            sq = ad.sum_axis(ad.reshape(ad.mul(tan, tan), (B, per_scene * D)), axis=1)
            l2div = sq if l2div is None else ad.add(l2div, sq)

    if div is None:
        div = ad.lift(np.zeros(B))
        l2div = ad.lift(np.zeros(B))
    return Terms(velocity=v, divergence=div, l2=l2, l2div=l2div)


# ---------------------------------------------------------------------------
# single-set convenience wrappers
# ---------------------------------------------------------------------------

def _single_set(params, cfg, x, t, emb, need_densities=True):
    x = np.asarray(x, dtype=np.float64)
    emb_var = None
    if emb is not None:
        emb_var = ad.lift(np.asarray(emb, dtype=np.float64).reshape(1, -1))
    with Tape():
        xv = Var(x)
        return dynamics_terms(
            params, cfg, xv, (1, x.shape[0]), t, emb_var, need_densities=need_densities
        )


def velocity(params, cfg, x, t=0.0, emb=None) -> np.ndarray:
    """Velocity rows for one set; row i sums pair forces from all j != i plus the single force."""
    return _single_set(params, cfg, x, t, emb, need_densities=False).velocity.value


def divergence(params, cfg, x, t=0.0, emb=None) -> float:
    return float(_single_set(params, cfg, x, t, emb).divergence.value[0])


def reg_densities(params, cfg, x, t=0.0, emb=None) -> tuple[float, float]:
    terms = _single_set(params, cfg, x, t, emb)
    return float(terms.l2.value[0]), float(terms.l2div.value[0])


def named_leaves(params: DynamicsParams) -> list[tuple[str, np.ndarray]]:
    out = mlp_named_leaves("pair", params.pair) + mlp_named_leaves("single", params.single)
    if params.embed is not None:
        out += conv_named_leaves("embed", params.embed)
    return out


def set_leaves(params: DynamicsParams, values: dict[str, np.ndarray]) -> DynamicsParams:
    """Rebuild a DynamicsParams with the same structure and the given leaf values."""
    def mlp_from(prefix: str, p: MLPParams) -> MLPParams:
        return MLPParams([
            (values[f"{prefix}.{i}.W"], values[f"{prefix}.{i}.b"]) for i in range(len(p.layers))
        ])

    embed = None
    if params.embed is not None:
        e = params.embed
        convs = [
            (values[f"embed.conv{i}.k"], values[f"embed.conv{i}.b"]) for i in range(len(e.convs))
        ]
        dense = (values["embed.dense.W"], values["embed.dense.b"])
        embed = ConvEmbedParams(convs, dense, e.stride, e.in_shape)
    return DynamicsParams(
        pair=mlp_from("pair", params.pair), single=mlp_from("single", params.single), embed=embed
    )
