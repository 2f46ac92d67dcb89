"""Dense float64 matrices with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  When a :class:`Tape` is active
(``with Tape() as tape:``) every op appends a record of its kind, inputs,
output and whatever it saved for the backward pass; ``tape.backward(loss)``
then walks those records in reverse.  Outside a tape the same functions are
plain numpy forward evaluation, which is what inference and finite
differences use.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Gradients",
    "ParamStore",
    "GradCheckReport",
    "BACKWARD",
    "matmul",
    "add",
    "add_row",
    "scale",
    "relu",
    "softmax_rows",
    "concat_cols",
    "block_sum",
    "block_mix",
    "relation_aggregate",
    "gather_rows",
    "sum_all",
    "masked_cross_entropy",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """Row-major ``rows x cols`` matrix of float64."""

    __slots__ = ("data", "node_id")

    def __init__(self, data, copy: bool = False):
        if not copy and type(data) is np.ndarray and data.ndim == 2 and data.dtype == np.float64:
            self.data = data
            self.node_id: int | None = None
            return
        arr = np.array(data, dtype=np.float64, copy=True) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.node_id: int | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols})"


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    saved: dict


class _Local(threading.local):
    def __init__(self):
        self.stack: list = []


_local = _Local()


def _active() -> "Tape | None":
    stack = _local.stack
    return stack[-1] if stack else None


class Tape:
    """Ordered list of recorded ops.  Thread-local; nestable."""

    def __init__(self):
        self.records: list[_Record] = []
        self._tensors: list[Tensor] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def node(self, t: Tensor) -> int:
        key = id(t)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._tensors)
            self._tensors.append(t)
            self._index[key] = idx
        return idx

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, saved: dict) -> None:
        ins = tuple(self.node(t) for t in inputs)
        out.node_id = self.node(out)
        self.records.append(_Record(kind, ins, out.node_id, saved))

    def backward(self, loss: Tensor) -> "Gradients":
        """Reverse sweep from ``loss``; does not mutate the tape, so repeated
        calls return identical gradients."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        if id(loss) not in self._index:
            raise ValueError("loss was not produced on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._tensors)
        grads[self._index[id(loss)]] = np.ones((1, 1))
        for rec in reversed(self.records):
            g = grads[rec.output]
            if g is None:
                continue
            ins = [self._tensors[i].data for i in rec.inputs]
            out = self._tensors[rec.output].data
            for idx, gi in zip(rec.inputs, BACKWARD[rec.kind](rec.saved, ins, out, g)):
                if gi is None:
                    continue
                prev = grads[idx]
                grads[idx] = gi if prev is None else prev + gi
        return Gradients(self, grads)


class Gradients:
    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        idx = self._tape._index.get(id(t))
        g = None if idx is None else self._grads[idx]
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        idx = self._tape._index.get(id(t))
        return idx is not None and self._grads[idx] is not None


def _emit(kind: str, inputs: Sequence[Tensor], out: Tensor, **saved) -> Tensor:
    stack = _local.stack
    if stack:
        stack[-1].record(kind, inputs, out, saved)
    return out


# --------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    return _emit("matmul", (a, b), Tensor(a.data @ b.data))


def _matmul_bw(saved, ins, out, g):
    a, b = ins
    return g @ b.T, a.T @ g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.rows}x{a.cols} + {b.rows}x{b.cols}")
    return _emit("add", (a, b), Tensor(a.data + b.data))


def _add_bw(saved, ins, out, g):
    return g, g


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """``a + bias`` with a 1 x cols bias broadcast down the rows."""
    if bias.data.shape != (1, a.data.shape[1]):
        raise ShapeError(f"add_row needs a 1x{a.cols} bias, got {bias.rows}x{bias.cols}")
    return _emit("add_row", (a, bias), Tensor(a.data + bias.data))


def _add_row_bw(saved, ins, out, g):
    return g, g.sum(axis=0, keepdims=True)


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), Tensor(a.data * c), c=float(c))


def _scale_bw(saved, ins, out, g):
    return (g * saved["c"],)


def relu(x: Tensor) -> Tensor:
    return _emit("relu", (x,), Tensor(np.maximum(x.data, 0.0)))


def _relu_bw(saved, ins, out, g):
    # subgradient at exactly 0 is 0
    return (g * (ins[0] > 0.0),)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    return _emit("softmax_rows", (x,), Tensor(_softmax(x.data)))


def _softmax_bw(saved, ins, out, g):
    s = out
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.shape[0] != rows:
            raise ShapeError(
                "concat_cols row mismatch: " + ", ".join(f"{q.rows}x{q.cols}" for q in parts)
            )
    if len(parts) == 1:
        out = Tensor(parts[0].data.copy())
    else:
        out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    return _emit("concat_cols", tuple(parts), out, widths=tuple(p.data.shape[1] for p in parts))


def _concat_bw(saved, ins, out, g):
    grads = []
    start = 0
    for w in saved["widths"]:
        grads.append(g[:, start:start + w])
        start += w
    return grads


def block_sum(x: Tensor, blocks: int) -> Tensor:
    """Sum of ``blocks`` equal-width column blocks: n x (k*d) -> n x d."""
    if x.cols % blocks:
        raise ShapeError(f"block_sum: {x.cols} columns do not split into {blocks} blocks")
    d = x.cols // blocks
    out = x.data.reshape(x.rows, blocks, d).sum(axis=1)
    return _emit("block_sum", (x,), Tensor(out), blocks=blocks)


def _block_sum_bw(saved, ins, out, g):
    return (np.tile(g, (1, saved["blocks"])),)


def block_mix(x: Tensor, weights: Tensor) -> Tensor:
    """Row-wise weighted sum of column blocks.

    ``x`` is n x (k*d), ``weights`` is n x k; row i of the result is
    sum_k weights[i, k] * x[i, block k].
    """
    n, k = weights.data.shape
    rows, cols = x.data.shape
    if n != rows or cols % k:
        raise ShapeError(f"block_mix shape mismatch: {rows}x{cols} with weights {n}x{k}")
    xb = x.data.reshape(n, k, cols // k)
    out = (weights.data[:, None, :] @ xb)[:, 0, :]
    return _emit("block_mix", (x, weights), Tensor(out))


def _block_mix_bw(saved, ins, out, g):
    x, w = ins
    n, k = w.shape
    xb = x.reshape(n, k, -1)
    gx = (w[:, :, None] * g[:, None, :]).reshape(n, -1)
    gw = (xb @ g[:, :, None])[:, :, 0]
    return gx, gw


def relation_aggregate(x: Tensor, adj: np.ndarray) -> Tensor:
    """Per-block neighbourhood aggregation.

    ``adj`` is a constant k x n x n stack; block k of the output is
    ``adj[k] @ x[:, block k]``.
    """
    k, n, m = adj.shape
    rows, cols = x.data.shape
    if n != rows or m != rows or cols % k:
        raise ShapeError(f"relation_aggregate: adjacency {adj.shape} vs features {x.rows}x{x.cols}")
    xb = x.data.reshape(n, k, -1).transpose(1, 0, 2)
    out = (adj @ xb).transpose(1, 0, 2).reshape(n, -1)
    return _emit("relation_aggregate", (x,), Tensor(out), adj=adj)


def _relation_aggregate_bw(saved, ins, out, g):
    adj = saved["adj"]
    k, n, _ = adj.shape
    gb = g.reshape(n, k, -1).transpose(1, 0, 2)
    return ((adj.transpose(0, 2, 1) @ gb).transpose(1, 0, 2).reshape(n, -1),)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    return _emit("gather_rows", (table,), Tensor(table.data[index]), index=index)


def _gather_rows_bw(saved, ins, out, g):
    gt = np.zeros_like(ins[0])
    np.add.at(gt, saved["index"], g)
    return (gt,)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", (x,), Tensor(np.array([[x.data.sum()]])))


def _sum_all_bw(saved, ins, out, g):
    return (np.full_like(ins[0], g[0, 0]),)


def masked_cross_entropy(logits: Tensor, labels: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows where ``mask`` is set."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    if mask.shape != (logits.rows,) or labels.shape != (logits.rows,):
        raise ShapeError(f"labels/mask must have length {logits.rows}")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("no supervised nodes")
    y = labels[rows].astype(np.intp)
    if np.any(y < 0) or np.any(y >= logits.cols):
        raise ValueError("label out of range for a supervised row")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(rows.size), y]
    out = Tensor(np.array([[nll.mean()]]))
    return _emit("masked_ce", (logits,), out, rows=rows, y=y)


def _masked_ce_bw(saved, ins, out, g):
    rows, y = saved["rows"], saved["y"]
    p = _softmax(ins[0][rows])
    p[np.arange(rows.size), y] -= 1.0
    grad = np.zeros_like(ins[0])
    grad[rows] = p * (g[0, 0] / rows.size)
    return (grad,)


BACKWARD: dict[str, Callable] = {
    "matmul": _matmul_bw,
    "add": _add_bw,
    "add_row": _add_row_bw,
    "scale": _scale_bw,
    "relu": _relu_bw,
    "softmax_rows": _softmax_bw,
    "concat_cols": _concat_bw,
    "block_sum": _block_sum_bw,
    "block_mix": _block_mix_bw,
    "relation_aggregate": _relation_aggregate_bw,
    "gather_rows": _gather_rows_bw,
    "sum_all": _sum_all_bw,
    "masked_ce": _masked_ce_bw,
}


# --------------------------------------------------------------------------
# parameters

class ParamStore:
    """Named parameters, iterated in lexicographic name order.

    Parameter arrays live as views into one flat buffer so optimizers can
    update everything with a handful of vector ops.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._flat: np.ndarray | None = None

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, copy=True)
        self._params[name] = t
        self._flat = None
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def flat(self) -> np.ndarray:
        """Flat float64 buffer backing every parameter (lexicographic order)."""
        if self._flat is None:
            items = self.items()
            buf = np.concatenate([t.data.ravel() for _, t in items]) if items else np.zeros(0)
            start = 0
            for _, t in items:
                r, c = t.shape
                t.data = buf[start:start + r * c].reshape(r, c)
                start += r * c
            self._flat = buf
        return self._flat

    def flat_grad(self, grads: Gradients) -> np.ndarray:
        return np.concatenate([grads[t].ravel() for t in self.tensors()])

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self.items():
            other.add(name, t.data)
        return other

    def assign(self, other: "ParamStore") -> None:
        if self.names() != other.names():
            raise KeyError("parameter names differ")
        for name, t in self.items():
            src = other[name].data
            if src.shape != t.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {t.shape}")
            t.data[...] = src

    def equals(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(t.data, other[n].data) for n, t in self.items()
        )

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "params": {
                name: {"rows": t.rows, "cols": t.cols, "data": [float(v) for v in t.data.ravel()]}
                for name, t in self.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamStore":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported parameter store version {doc.get('version')!r}")
        store = cls()
        for name in sorted(doc["params"]):
            entry = doc["params"][name]
            r, c = int(entry["rows"]), int(entry["cols"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != r * c:
                raise ShapeError(f"{name}: {data.size} values for a {r}x{c} matrix")
            store.add(name, data.reshape(r, c))
        return store

    def dumps(self) -> str:
        # json writes floats with repr(), the shortest string that round-trips
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "ParamStore":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, int] | None
    checked: int
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Iterable[str] | None = None,
    floor: float = 1e-6,
    batch_f: Callable[[str, np.ndarray], np.ndarray] | None = None,
    chunk: int = 256,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` reads its parameters from ``params`` and returns a scalar tensor.
    Relative error per entry is |a - n| / max(|a|, |n|, floor).

    ``batch_f(name, stack)``, when given, evaluates the same loss for a whole
    stack of replacement values for one parameter (shape B x rows x cols) and
    returns the B losses; entries are then perturbed ``chunk`` at a time.
    """
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    worst = 0.0
    worst_name = None
    worst_idx = None
    checked = 0
    per_param = {}
    for name in names if names is not None else params.names():
        t = params[name]
        analytic = grads[t]
        numeric = _numeric_grad(f, t, h) if batch_f is None else _numeric_grad_batched(batch_f, name, t, h, chunk)
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        checked += err.size
        pmax = float(err.max()) if err.size else 0.0
        per_param[name] = pmax
        if pmax > worst:
            r, c = np.unravel_index(int(np.argmax(err)), err.shape)
            worst, worst_name, worst_idx = pmax, name, (int(r), int(c))
    return GradCheckReport(worst, worst_name, worst_idx, checked, tol, per_param)


def _numeric_grad(f, t: Tensor, h: float) -> np.ndarray:
    data = t.data
    out = np.zeros_like(data)
    for r in range(t.rows):
        for c in range(t.cols):
            orig = data[r, c]
            data[r, c] = orig + h
            fp = f().item()
            data[r, c] = orig - h
            fm = f().item()
            data[r, c] = orig
            out[r, c] = (fp - fm) / (2.0 * h)
    return out


def _numeric_grad_batched(batch_f, name: str, t: Tensor, h: float, chunk: int) -> np.ndarray:
    base = t.data
    flat = np.zeros(base.size)
    for start in range(0, base.size, chunk):
        idx = np.arange(start, min(start + chunk, base.size))
        stack = np.repeat(base.ravel()[None], 2 * idx.size, axis=0)
        k = np.arange(idx.size)
        stack[2 * k, idx] = base.ravel()[idx] + h
        stack[2 * k + 1, idx] = base.ravel()[idx] - h
        losses = np.asarray(batch_f(name, stack.reshape(-1, *base.shape)), dtype=np.float64)
        flat[idx] = (losses[0::2] - losses[1::2]) / (2.0 * h)
    return flat.reshape(base.shape)
