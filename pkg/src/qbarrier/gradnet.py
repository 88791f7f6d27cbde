"""Small dense-network core: a reverse-mode tape over numpy arrays.

Parameters live in :class:`ParamStore` as float32 arrays. Every forward pass
upcasts to float64 and gradients are accumulated in float64, so finite
difference checks stay tight while checkpoints stay compact.

Typical use::

    tape = Tape()
    out = mlp_forward(store, spec, x, prefix="enc", tape=tape)
    loss = mean(square(out))
    grads = backward(tape, loss, params=store)
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Shapes or layer specs that do not line up."""


class TapeUsageError(RuntimeError):
    """A tape was replayed after its backward pass consumed it."""


class NonFiniteGradientError(FloatingPointError):
    """NaN or Inf found in gradients handed to the optimizer."""

    def __init__(self, bad: Mapping[str, int]):
        self.bad = dict(bad)
        detail = ", ".join(f"{k} ({n} entries)" for k, n in sorted(self.bad.items()))
        super().__init__(f"non-finite gradient in: {detail}")


# ---------------------------------------------------------------------------
# Parameter storage


class ParamStore:
    """Ordered mapping of parameter name -> float32 array, plus a version tag."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, version: int = 0):
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.version = version
        for name, value in (arrays or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values written to parameter {name!r}")
        self._arrays[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def n_params(self) -> int:
        return int(np.sum([a.size for a in self._arrays.values()], dtype=np.int64))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()}, version=self.version)

    def subset(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(prefixes)
        return ParamStore(
            {k: v.copy() for k, v in self._arrays.items() if k.startswith(prefixes)},
            version=self.version,
        )

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._arrays.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self._arrays.items():
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.astype("<f4").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore) or self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self._arrays)

    def __repr__(self) -> str:
        return f"ParamStore({len(self)} tensors, {self.n_params()} params, version={self.version})"


# ---------------------------------------------------------------------------
# Tape and tensors


class Tensor:
    """A node on a :class:`Tape`. ``value`` is always a float64 ndarray."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "requires_grad", "name", "stop")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor operator

    def __init__(self, value, tape: "Tape", parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.stop = False

    @property
    def shape(self):
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records forward operations so :func:`backward` can replay them in reverse."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: "OrderedDict[str, Tensor]" = OrderedDict()
        self._leaf_owner: dict[str, int] = {}
        self.consumed = False

    def param(self, store: ParamStore, name: str, frozen: bool = False) -> Tensor:
        """Bind ``store[name]``. Frozen bindings are constants (no gradient)."""
        if frozen:
            return self.constant(store[name])
        if name in self.leaves:
            if self._leaf_owner[name] != id(store):
                raise ConfigurationError(f"parameter name {name!r} bound from two different stores")
            return self.leaves[name]
        leaf = Tensor(store[name], self, requires_grad=True, name=name)
        self.leaves[name] = leaf
        self._leaf_owner[name] = id(store)
        return leaf

    def constant(self, value) -> Tensor:
        return Tensor(value, self)

    def _record(self, value, parents, backward_fn) -> Tensor:
        if self.consumed:
            raise TapeUsageError("tape already consumed by backward(); start a new Tape")
        needs = any(p.requires_grad for p in parents)
        out = Tensor(value, self, parents if needs else (), backward_fn if needs else None, requires_grad=needs)
        if needs:
            self.nodes.append(out)
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ConfigurationError("operation needs at least one Tensor argument")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# Operations


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def bw(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(out.grad, b.shape))

    return tape._record(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def bw(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(-out.grad, b.shape))

    return tape._record(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)

    def bw(out):
        _acc(a, _unbroadcast(out.grad * b.value, a.shape))
        _acc(b, _unbroadcast(out.grad * a.value, b.shape))

    return tape._record(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(out):
        g = out.grad
        if a.requires_grad:
            _acc(a, g @ b.value.T)
        if b.requires_grad:
            av = a.value if a.value.ndim > 1 else a.value[None, :]
            gg = g if g.ndim > 1 else g[None, :]
            _acc(b, av.T @ gg)

    return tape._record(a.value @ b.value, (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)

    def bw(out):
        _acc(x, out.grad * (1.0 - y * y))

    return x.tape._record(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)

    def bw(out):
        _acc(x, out.grad * y)

    return x.tape._record(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(out):
        _acc(x, out.grad / x.value)

    return x.tape._record(np.log(x.value), (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(out):
        _acc(x, out.grad * 2.0 * x.value)

    return x.tape._record(x.value * x.value, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside."""
    inside = (x.value > lo) & (x.value < hi)

    def bw(out):
        _acc(x, out.grad * inside)

    return x.tape._record(np.clip(x.value, lo, hi), (x,), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape))

    return x.tape._record(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(out):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _acc(x, out.grad[tuple(sl)])

    return tape._record(np.concatenate([x.value for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]

    def bw(out):
        for i, x in enumerate(xs):
            _acc(x, np.take(out.grad, i, axis=axis))

    return tape._record(np.stack([x.value for x in xs], axis=axis), xs, bw)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(out):
        g = np.zeros_like(x.value)
        np.add.at(g, idx, out.grad)
        _acc(x, g)

    return x.tape._record(x.value[idx], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(out):
        _acc(x, out.grad.reshape(x.shape))

    return x.tape._record(x.value.reshape(shape), (x,), bw)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along ``axis``; ties route the gradient to the first maximizer."""
    idx = np.argmax(x.value, axis=axis)

    def bw(out):
        g = np.zeros_like(x.value)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        _acc(x, g)

    return x.tape._record(np.max(x.value, axis=axis), (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(out):
        g = out.grad
        _acc(x, g - p * np.sum(g, axis=axis, keepdims=True))

    return x.tape._record(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def stop_gradient(x: Tensor) -> Tensor:
    """sg(x): same value, gradient barrier."""
    out = Tensor(x.value, x.tape)
    out.stop = True
    return out


# ---------------------------------------------------------------------------
# Backward pass


def backward(tape: Tape, loss: Tensor, loss_grad=None, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; returns float64 gradients per bound parameter.

    When ``params`` is given, every parameter of that store gets an entry,
    zero-filled for parameters the loss never reached.
    """
    if tape.consumed:
        raise TapeUsageError("tape already consumed by a previous backward()")
    tape.consumed = True
    grads: dict[str, np.ndarray] = {}
    if params is not None:
        for name in params.names():
            grads[name] = np.zeros(params[name].shape, dtype=np.float64)
    if not loss.requires_grad:
        return grads

    seed = np.ones_like(loss.value) if loss_grad is None else np.asarray(loss_grad, dtype=np.float64)
    if seed.shape != loss.value.shape:
        seed = np.broadcast_to(seed, loss.value.shape).copy()
    loss.grad = seed.copy()
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        node.backward_fn(node)
    for name, leaf in tape.leaves.items():
        if leaf.grad is not None:
            grads[name] = leaf.grad
        elif name not in grads:
            grads[name] = np.zeros(leaf.shape, dtype=np.float64)
    return grads


# ---------------------------------------------------------------------------
# Dense networks


@dataclass(frozen=True)
class LayerSpec:
    """Widths ``[in, h1, ..., out]``; ``activation`` on hidden layers, ``out_activation`` on the last."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    out_activation: str | None = None

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("a layer spec needs at least input and output widths")
        for act in (self.activation, self.out_activation):
            if act not in _ACTIVATIONS:
                raise ConfigurationError(f"unknown nonlinearity {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def n_params(self) -> int:
        return int(np.sum([a * b + b for a, b in zip(self.widths[:-1], self.widths[1:])]))


_ACTIVATIONS: dict[str | None, Callable | None] = {None: None, "tanh": tanh}


def init_mlp(store: ParamStore, spec: LayerSpec, prefix: str, rng: np.random.Generator, zero_last: bool = False) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        last = i == spec.n_layers - 1
        if last and zero_last:
            store[f"{prefix}.W{i}"] = np.zeros((fan_in, fan_out))
            store[f"{prefix}.b{i}"] = np.zeros(fan_out)
        else:
            store[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            store[f"{prefix}.b{i}"] = rng.uniform(-bound, bound, size=fan_out)


def mlp_forward(params: ParamStore, spec: LayerSpec, x, prefix: str, tape: Tape | None = None, frozen: bool = False):
    """Apply the network ``prefix`` to ``x`` (1-D vector or 2-D batch).

    Returns ``(output, tape)``; pass an existing tape to chain networks.
    """
    tape = tape if tape is not None else Tape()
    h = _lift(x, tape)
    if h.value.shape[-1] != spec.widths[0]:
        raise ConfigurationError(
            f"{prefix}: input width {h.value.shape[-1]} does not match layer spec {spec.widths[0]}"
        )
    for i in range(spec.n_layers):
        W = tape.param(params, f"{prefix}.W{i}", frozen=frozen)
        b = tape.param(params, f"{prefix}.b{i}", frozen=frozen)
        if W.shape != (spec.widths[i], spec.widths[i + 1]):
            raise ConfigurationError(f"{prefix}.W{i} has shape {W.shape}, spec wants {(spec.widths[i], spec.widths[i + 1])}")
        h = add(matmul(h, W), b)
        act = _ACTIVATIONS[spec.activation if i < spec.n_layers - 1 else spec.out_activation]
        if act is not None:
            h = act(h)
    return h, tape


def mlp_apply(params: ParamStore, spec: LayerSpec, x: np.ndarray, prefix: str) -> np.ndarray:
    """Tape-free forward pass for inference; same arithmetic as :func:`mlp_forward`."""
    h = np.asarray(x, dtype=np.float64)
    for i in range(spec.n_layers):
        h = h @ params[f"{prefix}.W{i}"].astype(np.float64) + params[f"{prefix}.b{i}"].astype(np.float64)
        act = spec.activation if i < spec.n_layers - 1 else spec.out_activation
        if act == "tanh":
            h = np.tanh(h)
    return h


# ---------------------------------------------------------------------------
# Optimisation


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(np.sum([float(np.sum(g * g)) for g in grads.values()])))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Adaptive-moment optimizer; moments are stored float32 for exact resumes."""

    def __init__(self, lr: float = 3e-4, betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = ParamStore()
        self.v = ParamStore()

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> ParamStore:
        bad = {k: int(np.sum(~np.isfinite(g))) for k, g in grads.items() if not np.all(np.isfinite(g))}
        if bad:
            raise NonFiniteGradientError(bad)
        missing = set(grads) - set(params.names())
        if missing:
            raise ConfigurationError(f"gradients for unknown parameters: {sorted(missing)}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in params.names():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != params[name].shape:
                raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            m = self.m[name].astype(np.float64) if name in self.m else np.zeros(g.shape)
            v = self.v[name].astype(np.float64) if name in self.v else np.zeros(g.shape)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = params[name].astype(np.float64) - update
            self.m[name] = m
            self.v[name] = v
        params.version += 1
        return params

    def state_stores(self) -> dict[str, ParamStore]:
        return {"adam.m": self.m, "adam.v": self.v}

    def state_meta(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t}

    @classmethod
    def from_state(cls, meta: Mapping, m: ParamStore, v: ParamStore) -> "Adam":
        opt = cls(lr=meta["lr"], betas=tuple(meta["betas"]), eps=meta["eps"])
        opt.t = int(meta["t"])
        opt.m, opt.v = m, v
        return opt


def polyak_update(target: ParamStore, online: ParamStore, tau: float) -> ParamStore:
    """target <- (1 - tau) * target + tau * online, for every name in ``target``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    for name in target.names():
        if name not in online or online[name].shape != target[name].shape:
            raise ConfigurationError(f"polyak: online parameter {name!r} missing or misshapen")
        if tau == 1.0:
            target[name] = online[name].copy()
        elif tau != 0.0:
            target[name] = (1.0 - tau) * target[name].astype(np.float64) + tau * online[name].astype(np.float64)
    target.version += 1
    return target


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one little-endian float32 blob

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT_VERSION = 1


def save_checkpoint(path, stores: Mapping[str, ParamStore], meta: Mapping | None = None) -> str:
    """Write all stores under directory ``path``; returns the checkpoint digest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for store_name, store in stores.items():
        for name, arr in store.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {
                    "store": store_name,
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "dtype": "<f4",
                    "version": store.version,
                }
            )
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_VERSION,
        "tensors": entries,
        "meta": dict(meta or {}),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return checkpoint_digest(path)


def load_checkpoint(path) -> tuple[dict[str, ParamStore], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {manifest.get('format')}")
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ConfigurationError("checkpoint blob does not match its manifest digest")
    stores: dict[str, ParamStore] = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=e["dtype"], count=count, offset=e["offset"]).reshape(e["shape"])
        store = stores.setdefault(e["store"], ParamStore(version=e["version"]))
        store[e["name"]] = arr.astype(np.float32)
    return stores, manifest["meta"]


def checkpoint_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / BLOB).read_bytes())
    return h.hexdigest()
