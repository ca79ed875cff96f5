"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations take ``Var`` or plain arrays and return ``Var``.  When any input
belongs to a ``Tape`` the operation is recorded with a closure producing the
input gradients; otherwise only the value is computed.  Gradients of
parameter leaves accumulate into their ``ParameterBlock``.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, NumericalError, TapeStateError
from .mathkit import INV_4PI


class ParameterBlock:
    """Named dense parameters with a same-shaped gradient accumulator."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"ParameterBlock({self.name!r}, shape={self.shape})"


class Var:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value, tape=None, id=-1):
        self.value = value
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Records operations in execution order; ``backward`` replays them reversed."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._fns: list = []
        self._blocks: dict[int, ParameterBlock] = {}
        self._leaf_grads: dict[int, np.ndarray] = {}
        self._watch: set[int] = set()
        self.consumed = False

    def __len__(self):
        return len(self._fns)

    def _new(self, value, parents, fn) -> Var:
        if self.consumed:
            raise TapeStateError("cannot record on a tape after backward")
        self._parents.append(parents)
        self._fns.append(fn)
        return Var(value, self, len(self._fns) - 1)

    def param(self, block: ParameterBlock) -> Var:
        v = self._new(block.value, (), None)
        self._blocks[v.id] = block
        return v

    def input(self, value) -> Var:
        """A leaf whose gradient is kept and readable via ``grad`` after backward."""
        v = self._new(np.asarray(value), (), None)
        self._watch.add(v.id)
        return v

    def backward(self, output: Var, grad=None) -> None:
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward")
        if output.tape is not self:
            raise TapeStateError("output was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {
            output.id: np.ones_like(output.value) if grad is None
            else np.asarray(grad, dtype=output.value.dtype).reshape(output.value.shape)}
        for i in range(output.id, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            fn = self._fns[i]
            if fn is None:
                if i in self._blocks:
                    self._blocks[i].grad += g
                if i in self._watch:
                    self._leaf_grads[i] = g
                continue
            for pid, pg in zip(self._parents[i], fn(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        self._fns = []
        self._parents = []

    def grad(self, v: Var) -> np.ndarray:
        if v.id not in self._watch:
            raise TapeStateError("gradient requested for an unwatched variable")
        return self._leaf_grads.get(v.id, np.zeros_like(v.value))


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeStateError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _pid(x, tape):
    return x.id if isinstance(x, Var) and x.tape is tape else None


def _record(out, inputs, fn) -> Var:
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(out)
    return tape._new(out, tuple(_pid(x, tape) for x in inputs), fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitive operations

def add(a, b) -> Var:
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def matmul(a, b) -> Var:
    """2-D matrix product, or a broadcast (K, C) @ (P, C, D) batch product."""
    av, bv = value(a), value(b)

    def fn(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(av @ bv, (a, b), fn)


def linear(x, w, b) -> Var:
    """x @ w + b as one recorded op."""
    xv, wv, bv = value(x), value(w), value(b)
    return _record(xv @ wv + bv, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


_kink_logs: list[list] = []


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every rectifier input evaluated inside the block."""
    log: list = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.remove(log)


def relu(x) -> Var:
    xv = value(x)
    mask = xv > 0
    for log in _kink_logs:
        log.append(mask.copy())
    # np.maximum keeps NaN visible so a poisoned network is caught downstream
    return _record(np.maximum(xv, 0).astype(xv.dtype, copy=False), (x,), lambda g: (g * mask,))


def softplus(x) -> Var:
    xv = value(x)
    out = np.logaddexp(0.0, xv).astype(xv.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * _sigmoid(xv),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Var:
    out = _sigmoid(value(x))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Var:
    out = np.tanh(value(x))
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Var:
    out = np.exp(value(x))
    return _record(out, (x,), lambda g: (g * out,))


def opacity(x) -> Var:
    """1 - exp(-x), accurate for small optical depths."""
    xv = value(x)
    out = -np.expm1(-xv)
    return _record(out, (x,), lambda g: (g * (1.0 - out),))


def square(x) -> Var:
    xv = value(x)
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def reciprocal_one_plus(x) -> Var:
    """x / (1 + x)."""
    xv = value(x)
    den = 1.0 + xv
    return _record(xv / den, (x,), lambda g: (g / (den * den),))


def sum(x, axis=None, keepdims=False) -> Var:  # noqa: A001
    xv = value(x)
    shape = xv.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(xv, axis=axis, keepdims=keepdims), (x,), fn)


def exclusive_cumsum(x, axis=-1) -> Var:
    """Running sum excluding the current element."""
    xv = value(x)
    out = np.cumsum(xv, axis=axis) - xv

    def fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g,)

    return _record(out, (x,), fn)


def concat(xs, axis=-1) -> Var:
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(np.concatenate(vals, axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(x, shape) -> Var:
    xv = value(x)
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def getitem(x, idx) -> Var:
    xv = value(x)

    basic = all(isinstance(i, (slice, int)) or i is None or i is Ellipsis
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def fn(g):
        out = np.zeros_like(xv)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(xv[idx], (x,), fn)


def scatter_rows(x, rows, base) -> Var:
    """Copy of constant ``base`` with ``base[rows]`` replaced by ``x``."""
    out = np.array(base, dtype=value(x).dtype)
    out[rows] = value(x)
    return _record(out, (x,), lambda g: (g[rows],))


def stop_gradient(x) -> Var:
    """Identity forward; contributes no gradient backward."""
    return Var(value(x))


def where(cond, a, b) -> Var:
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(np.where(cond, av, bv), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                              _unbroadcast(np.where(cond, 0, g), sb)))


def hg_phase(cos_theta, g) -> Var:
    """Henyey-Greenstein value, differentiable in the asymmetry ``g``."""
    c = value(cos_theta)
    gv = value(g)
    den = 1.0 + gv * gv + 2.0 * gv * c
    rs = 1.0 / (den * np.sqrt(den))
    out = INV_4PI * (1.0 - gv * gv) * rs

    def fn(gr):
        d_g = INV_4PI * (-2.0 * gv * rs - 1.5 * (1.0 - gv * gv) * rs / den * (2.0 * gv + 2.0 * c))
        d_c = INV_4PI * (-1.5 * (1.0 - gv * gv) * rs / den * 2.0 * gv)
        return _unbroadcast(gr * d_c, np.shape(c)), _unbroadcast(gr * d_g, np.shape(gv))

    return _record(out, (cos_theta, g), fn)


# --------------------------------------------------------------------------
# MLPs

@dataclass(frozen=True)
class MlpSpec:
    """Hidden FC-ReLU layers of the given widths, then an optional linear head."""

    in_dim: int
    hidden: tuple
    out_dim: int | None = None

    def __post_init__(self):
        widths = list(self.hidden) + ([self.out_dim] if self.out_dim is not None else [])
        if self.in_dim < 1 or not widths or min(widths) < 1:
            raise DomainError("MLP needs positive widths and at least one layer")

    @property
    def layer_dims(self):
        dims = [self.in_dim] + list(self.hidden)
        if self.out_dim is not None:
            dims.append(self.out_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def output_dim(self) -> int:
        return self.out_dim if self.out_dim is not None else self.hidden[-1]


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str, dtype=np.float32):
    """Glorot-uniform weights, zero biases."""
    blocks = []
    for i, (fi, fo) in enumerate(spec.layer_dims):
        lim = math.sqrt(6.0 / (fi + fo))
        blocks.append(ParameterBlock(f"{prefix}.{i}.w", rng.uniform(-lim, lim, (fi, fo)).astype(dtype)))
        blocks.append(ParameterBlock(f"{prefix}.{i}.b", np.zeros(fo, dtype=dtype)))
    return blocks


def mlp_forward(spec: MlpSpec, params, x, tape: Tape | None = None) -> Var:
    """Affine + rectifier per hidden layer, affine output head when present."""
    xv = value(x)
    if np.shape(xv)[-1] != spec.in_dim:
        raise DomainError(f"MLP expects {spec.in_dim} inputs, got {np.shape(xv)[-1]}")
    if len(params) != 2 * len(spec.layer_dims):
        raise DomainError("parameter list does not match the MLP layout")
    for k, (fi, fo) in enumerate(spec.layer_dims):
        w, b = params[2 * k], params[2 * k + 1]
        if w.shape != (fi, fo) or b.shape != (fo,):
            raise DomainError(f"layer {k} expects weights {(fi, fo)}, got {w.shape}")
    h = x if isinstance(x, Var) else Var(np.atleast_2d(np.asarray(x)))
    n_hidden = len(spec.hidden)
    for k in range(len(spec.layer_dims)):
        w, b = params[2 * k], params[2 * k + 1]
        wv = tape.param(w) if tape is not None else Var(w.value)
        bv = tape.param(b) if tape is not None else Var(b.value)
        h = linear(h, wv, bv)
        if k < n_hidden:
            h = relu(h)
    return h


# --------------------------------------------------------------------------
# optimisation

def lr_at(iteration: int, total: int = 200_000, lr0: float = 1e-4, lr1: float = 1e-5) -> float:
    """Geometric decay from lr0 at 0 to lr1 at ``total`` (held afterwards)."""
    if iteration < 0:
        raise DomainError("iteration must be >= 0")
    frac = min(iteration / total, 1.0) if total > 0 else 1.0
    return lr0 * (lr1 / lr0) ** frac


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8, t: int | None = None) -> AdamState:
    """Bias-corrected Adam update in place; rejects non-finite gradients untouched."""
    params = list(params)
    grads = list(grads)
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {p.name}; step rejected")
    t = state.t + 1 if t is None else t
    if t < 1:
        raise DomainError("Adam step counter must be >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)
    state.t = t
    return state


def new_adam_state() -> AdamState:
    return AdamState({}, {}, 0)


def grad_check(blocks, loss_fn, h: float = 1e-4, max_per_block: int | None = None,
               rng: np.random.Generator | None = None, exclude_kinks: bool = True,
               floor: float = 1e-7):
    """Compare tape gradients with central differences.

    ``loss_fn(tape)`` must build a scalar loss (recording on ``tape`` when it
    is not None).  Entries whose perturbation flips any rectifier input sign
    are skipped.  Returns (max relative error, number checked, number skipped);
    relative error is |a - n| / max(|a|, |n|, floor).
    """
    blocks = list(blocks)
    for b in blocks:
        b.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    worst, checked, skipped = 0.0, 0, 0
    rng = rng or np.random.default_rng(0)
    for b in blocks:
        n = b.value.size
        picks = np.arange(n) if max_per_block is None or n <= max_per_block else rng.choice(
            n, max_per_block, replace=False)
        flat = b.value.reshape(-1)
        gflat = b.grad.reshape(-1)
        with record_kinks() as base_kinks:
            float(value(loss_fn(None)))
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            with record_kinks() as kp:
                lp = float(value(loss_fn(None)))
            flat[i] = orig - h
            with record_kinks() as km:
                lm = float(value(loss_fn(None)))
            flat[i] = orig
            if exclude_kinks and not (_same(kp, base_kinks) and _same(km, base_kinks)):
                skipped += 1
                continue
            num = (lp - lm) / (2.0 * h)
            ana = float(gflat[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"NMCKPT01"
CKPT_VERSION = 1


def save_checkpoint(path, blocks, state: AdamState | None, iteration: int) -> None:
    """Binary little-endian container: header, then per block name/shape/values/moments."""
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<IQII", CKPT_VERSION, iteration, state.t if state else 0, len(blocks))
    for b in blocks:
        name = b.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", b.value.ndim) + struct.pack(f"<{b.value.ndim}I", *b.value.shape)
        out += np.ascontiguousarray(b.value, dtype="<f4").tobytes()
        has = state is not None and b.name in state.m
        out += struct.pack("<B", int(has))
        if has:
            out += np.ascontiguousarray(state.m[b.name], dtype="<f4").tobytes()
            out += np.ascontiguousarray(state.v[b.name], dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (dict name -> array, AdamState, iteration)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    try:
        off = 8
        version, iteration, adam_t, nblocks = struct.unpack_from("<IQII", raw, off)
        off += struct.calcsize("<IQII")
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        values, state = {}, AdamState({}, {}, adam_t)
        for _ in range(nblocks):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode("utf-8")
            off += ln
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            count = int(np.prod(shape, dtype=np.int64))

            def take():
                nonlocal off
                if off + 4 * count > len(raw):
                    raise DataError(f"{path}: truncated checkpoint")
                arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
                off += 4 * count
                return arr.astype(np.float32)

            values[name] = take()
            (has,) = struct.unpack_from("<B", raw, off)
            off += 1
            if has:
                state.m[name] = take()
                state.v[name] = take()
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    return values, state, iteration
