"""Taped reverse-mode / forward-mode automatic differentiation on dense float64 arrays.

Values are numpy arrays wrapped in :class:`Var` nodes. Operations executed while a
:class:`Tape` is active are recorded in execution order, which is also a topological
order of the computation graph. Two transformations are supported:

* ``vjp`` — reverse accumulation over a tape (gradients of a scalar-ish output).
* ``jvp_sweep`` — forward tangent propagation over an already-recorded tape.

Tangent propagation is itself expressed through recorded primitives, so a tangent
swept while the tape is still active can later be differentiated in reverse
(reverse-over-forward), which is how second-order quantities are obtained here.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "lift",
    "stop_taping",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "sigmoid",
    "silu",
    "sum_all",
    "sum_axis",
    "reshape",
    "broadcast_to",
    "concat",
    "slice_axis",
    "pad_axis",
    "gather_rows",
    "scatter_add_rows",
    "im2col",
    "col2im",
    "vjp",
    "jvp_sweep",
    "jvp",
]

# Active tape stack. ``None`` entries disable recording (see stop_taping).
_TAPE_STACK: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


class stop_taping:
    """Context manager that suspends recording (used by the default vjp pass)."""

    def __enter__(self) -> None:
        _TAPE_STACK.append(None)

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


class Var:
    """A float64 array value, optionally recorded on a tape with its local rules.

    ``vjp_rule(ct)`` maps an output cotangent to a tuple of parent cotangents.
    ``jvp_rule(*parent_tangents)`` maps parent tangents (``None`` meaning zero)
    to the output tangent. Both rules compute with Var primitives so their own
    work can be taped when higher-order derivatives are wanted.
    """

    __slots__ = ("value", "parents", "vjp_rule", "jvp_rule")

    def __init__(self, value) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Var, ...] = ()
        self.vjp_rule = None
        self.jvp_rule = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    # Operator sugar; scalars and arrays are lifted to constants.
    def __add__(self, other):
        return add(self, lift(other))

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, lift(other))

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, lift(other))

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, lift(other))


def lift(x) -> Var:
    """Wrap a raw array/scalar as a constant Var (no-op on Vars)."""
    if isinstance(x, Var):
        return x
    return Var(x)


def _record(out: Var, parents: tuple[Var, ...], vjp_rule, jvp_rule) -> Var:
    tape = _active_tape()
    if tape is not None:
        out.parents = parents
        out.vjp_rule = vjp_rule
        out.jvp_rule = jvp_rule
        tape.nodes.append(out)
    return out


def _unbroadcast(g: Var, shape: tuple[int, ...]) -> Var:
    """Reduce a cotangent back to ``shape`` after numpy broadcasting."""
    if g.value.shape == shape:
        return g
    # Sum away leading axes added by broadcasting.
    while g.value.ndim > len(shape):
        g = sum_axis(g, 0)
    # Sum over axes that were expanded from extent 1.
    for ax, n in enumerate(shape):
        if n == 1 and g.value.shape[ax] != 1:
            g = sum_axis(g, ax, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    out = Var(a.value + b.value)

    def vjp_rule(ct):
        return _unbroadcast(ct, a.value.shape), _unbroadcast(ct, b.value.shape)

    def jvp_rule(ta, tb):
        if ta is None:
            return broadcast_to(tb, out.value.shape) if tb.value.shape != out.value.shape else tb
        if tb is None:
            return broadcast_to(ta, out.value.shape) if ta.value.shape != out.value.shape else ta
        return add(ta, tb)

    return _record(out, (a, b), vjp_rule, jvp_rule)


def sub(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    out = Var(a.value - b.value)

    def vjp_rule(ct):
        return _unbroadcast(ct, a.value.shape), _unbroadcast(neg(ct), b.value.shape)

    def jvp_rule(ta, tb):
        if ta is None:
            t = neg(tb)
            return broadcast_to(t, out.value.shape) if t.value.shape != out.value.shape else t
        if tb is None:
            return broadcast_to(ta, out.value.shape) if ta.value.shape != out.value.shape else ta
        return sub(ta, tb)

    return _record(out, (a, b), vjp_rule, jvp_rule)


def neg(a: Var) -> Var:
    a = lift(a)
    out = Var(-a.value)
    return _record(out, (a,), lambda ct: (neg(ct),), lambda ta: neg(ta))


def mul(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    out = Var(a.value * b.value)

    def vjp_rule(ct):
        return _unbroadcast(mul(ct, b), a.value.shape), _unbroadcast(mul(ct, a), b.value.shape)

    def jvp_rule(ta, tb):
        if ta is None:
            return mul(a, tb)
        if tb is None:
            return mul(ta, b)
        return add(mul(ta, b), mul(a, tb))

    return _record(out, (a, b), vjp_rule, jvp_rule)


def matmul(a: Var, b: Var) -> Var:
    a, b = lift(a), lift(b)
    out = Var(a.value @ b.value)

    def vjp_rule(ct):
        return matmul(ct, transpose(b)), matmul(transpose(a), ct)

    def jvp_rule(ta, tb):
        if ta is None:
            return matmul(a, tb)
        if tb is None:
            return matmul(ta, b)
        return add(matmul(ta, b), matmul(a, tb))

    return _record(out, (a, b), vjp_rule, jvp_rule)


def transpose(a: Var) -> Var:
    a = lift(a)
    out = Var(a.value.T)
    return _record(out, (a,), lambda ct: (transpose(ct),), lambda ta: transpose(ta))


def sigmoid(a: Var) -> Var:
    a = lift(a)
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct 0/1
        out = Var(1.0 / (1.0 + np.exp(-a.value)))

    # d sigma = sigma * (1 - sigma); expressed via the recorded output node so
    # reverse-over-forward sees the dependence on the input.
    def vjp_rule(ct):
        return (mul(ct, mul(out, sub(lift(1.0), out))),)

    def jvp_rule(ta):
        return mul(ta, mul(out, sub(lift(1.0), out)))

    return _record(out, (a,), vjp_rule, jvp_rule)


def silu(x: Var) -> Var:
    """Sigmoid-linear unit x * sigma(x)."""
    x = lift(x)
    return mul(x, sigmoid(x))


def sum_all(a: Var) -> Var:
    a = lift(a)
    out = Var(a.value.sum())

    def vjp_rule(ct):
        return (broadcast_to(ct, a.value.shape),)

    def jvp_rule(ta):
        return sum_all(ta)

    return _record(out, (a,), vjp_rule, jvp_rule)


def sum_axis(a: Var, axis: int, keepdims: bool = False) -> Var:
    a = lift(a)
    out = Var(a.value.sum(axis=axis, keepdims=keepdims))
    kshape = list(a.value.shape)
    kshape[axis] = 1
    kshape = tuple(kshape)

    def vjp_rule(ct):
        g = ct if keepdims else reshape(ct, kshape)
        return (broadcast_to(g, a.value.shape),)

    def jvp_rule(ta):
        return sum_axis(ta, axis, keepdims)

    return _record(out, (a,), vjp_rule, jvp_rule)


def reshape(a: Var, shape) -> Var:
    a = lift(a)
    shape = tuple(shape)
    out = Var(a.value.reshape(shape))
    src = a.value.shape

    def vjp_rule(ct):
        return (reshape(ct, src),)

    def jvp_rule(ta):
        return reshape(ta, shape)

    return _record(out, (a,), vjp_rule, jvp_rule)


def broadcast_to(a: Var, shape) -> Var:
    a = lift(a)
    shape = tuple(shape)
    out = Var(np.broadcast_to(a.value, shape).copy())
    src = a.value.shape

    def vjp_rule(ct):
        return (_unbroadcast(ct, src),)

    def jvp_rule(ta):
        return broadcast_to(ta, shape)

    return _record(out, (a,), vjp_rule, jvp_rule)


def concat(vs, axis: int) -> Var:
    vs = [lift(v) for v in vs]
    out = Var(np.concatenate([v.value for v in vs], axis=axis))
    sizes = [v.value.shape[axis] for v in vs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp_rule(ct):
        return tuple(
            slice_axis(ct, axis, int(offsets[i]), int(offsets[i + 1])) for i in range(len(vs))
        )

    def jvp_rule(*tangents):
        parts = []
        for v, t in zip(vs, tangents):
            parts.append(t if t is not None else lift(np.zeros_like(v.value)))
        return concat(parts, axis)

    return _record(out, tuple(vs), vjp_rule, jvp_rule)


def slice_axis(a: Var, axis: int, start: int, stop: int) -> Var:
    a = lift(a)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Var(a.value[idx].copy())
    n = a.value.shape[axis]

    def vjp_rule(ct):
        return (pad_axis(ct, axis, start, n - stop),)

    def jvp_rule(ta):
        return slice_axis(ta, axis, start, stop)

    return _record(out, (a,), vjp_rule, jvp_rule)


def pad_axis(a: Var, axis: int, before: int, after: int) -> Var:
    a = lift(a)
    pads = [(0, 0)] * a.value.ndim
    pads[axis] = (before, after)
    out = Var(np.pad(a.value, pads))
    stop = before + a.value.shape[axis]

    def vjp_rule(ct):
        return (slice_axis(ct, axis, before, stop),)

    def jvp_rule(ta):
        return pad_axis(ta, axis, before, after)

    return _record(out, (a,), vjp_rule, jvp_rule)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Select rows (axis 0) by an integer index array; repeats allowed."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Var(a.value[idx])
    n = a.value.shape[0]

    def vjp_rule(ct):
        return (scatter_add_rows(ct, idx, n),)

    def jvp_rule(ta):
        return gather_rows(ta, idx)

    return _record(out, (a,), vjp_rule, jvp_rule)


def scatter_add_rows(a: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Inverse of gather_rows: add row i of ``a`` into output row idx[i]."""
    a = lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    val = np.zeros((n_rows,) + a.value.shape[1:], dtype=np.float64)
    np.add.at(val, idx, a.value)
    out = Var(val)

    def vjp_rule(ct):
        return (gather_rows(ct, idx),)

    def jvp_rule(ta):
        return scatter_add_rows(ta, idx, n_rows)

    return _record(out, (a,), vjp_rule, jvp_rule)


def _patch_view(value: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, H, W, C) -> (B, oh, ow, k, k, C) window view, stride applied.
    win = np.lib.stride_tricks.sliding_window_view(value, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, oh, ow, C, k, k)
    return np.ascontiguousarray(np.moveaxis(win, 3, 5))  # (B, oh, ow, k, k, C)


def im2col(a: Var, k: int, stride: int) -> Var:
    """Extract k x k patches of a (B, H, W, C) image into (B*oh*ow, k*k*C) rows."""
    a = lift(a)
    B, H, W, C = a.value.shape
    oh = (H - k) // stride + 1
    ow = (W - k) // stride + 1
    patches = _patch_view(a.value, k, stride)
    out = Var(patches.reshape(B * oh * ow, k * k * C))
    shape = (B, H, W, C)

    def vjp_rule(ct):
        return (col2im(ct, shape, k, stride),)

    def jvp_rule(ta):
        return im2col(ta, k, stride)

    return _record(out, (a,), vjp_rule, jvp_rule)


def col2im(a: Var, img_shape, k: int, stride: int) -> Var:
    """Scatter patch rows back into a (B, H, W, C) image (adjoint of im2col)."""
    a = lift(a)
    B, H, W, C = img_shape
    oh = (H - k) // stride + 1
    ow = (W - k) // stride + 1
    cols = a.value.reshape(B, oh, ow, k, k, C)
    img = np.zeros((B, H, W, C), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            img[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride, :] += cols[
                :, :, :, di, dj, :
            ]
    out = Var(img)
    shape = tuple(img_shape)

    def vjp_rule(ct):
        return (im2col(ct, k, stride),)

    def jvp_rule(ta):
        return col2im(ta, shape, k, stride)

    return _record(out, (a,), vjp_rule, jvp_rule)


# ---------------------------------------------------------------------------
# transformations
# ---------------------------------------------------------------------------

def vjp(tape: Tape, outputs, cotangents, leaves, taped: bool = False):
    """Reverse accumulation over ``tape``.

    outputs/cotangents are parallel lists (single Vars accepted); returns one
    gradient per leaf (numpy array, or None where the output does not depend
    on the leaf). With ``taped=True``, the reverse pass records its own
    operations on the active tape and Vars are returned instead.
    """
    if isinstance(outputs, Var):
        outputs = [outputs]
        cotangents = [cotangents]
    if len(outputs) != len(cotangents):
        raise ValueError("outputs and cotangents must pair up")

    grads: dict[int, Var] = {}
    ctx = _NullCtx() if taped else stop_taping()
    with ctx:
        for o, c in zip(outputs, cotangents):
            c = lift(c)
            if c.value.shape != o.value.shape:
                raise ValueError(
                    f"cotangent shape {c.value.shape} does not match output {o.value.shape}"
                )
            prev = grads.get(id(o))
            grads[id(o)] = c if prev is None else add(prev, c)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.vjp_rule is None:
                continue
            parent_grads = node.vjp_rule(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else add(acc, pg)
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            out.append(None)
        else:
            out.append(g if taped else g.value)
    return out


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


def jvp_sweep(tape: Tape, seeds, targets):
    """Propagate tangents forward over an already-recorded tape.

    ``seeds`` is a list of (var, tangent Var) pairs; tangents of unseeded
    leaves are treated as zero. Returns the tangent of each target (None when
    independent of all seeds). Tangent arithmetic is recorded on the active
    tape, so a later reverse pass can differentiate through it.
    """
    tangents: dict[int, Var] = {}
    for v, t in seeds:
        t = lift(t)
        if t.value.shape != v.value.shape:
            raise ValueError(f"tangent shape {t.value.shape} does not match input {v.value.shape}")
        tangents[id(v)] = t
    nodes = tape.nodes[: len(tape.nodes)]  # snapshot; rules may append
    for node in nodes:
        if id(node) in tangents or node.jvp_rule is None:
            continue
        ts = [tangents.get(id(p)) for p in node.parents]
        if all(t is None for t in ts):
            continue
        tangents[id(node)] = node.jvp_rule(*ts)
    return [tangents.get(id(t)) for t in targets]


def jvp(fn, inputs, tangents):
    """Directional derivative of ``fn`` (a Var -> Var function of positional Vars).

    Traces ``fn`` on a private tape and sweeps the given input tangents through
    it. Returns (output values, output tangent values).
    """
    in_vars = [lift(x) for x in inputs]
    with Tape() as tape:
        out = fn(*in_vars)
        single = isinstance(out, Var)
        outs = [out] if single else list(out)
        ts = jvp_sweep(tape, list(zip(in_vars, [lift(t) for t in tangents])), outs)
    out_vals = [o.value for o in outs]
    t_vals = [np.zeros_like(o.value) if t is None else t.value for o, t in zip(outs, ts)]
    if single:
        return out_vals[0], t_vals[0]
    return out_vals, t_vals
