"""Stacked LSTM dynamics with a linear readout.

Each layer ``l`` updates

    c(t+1) = sigmoid(W_f x + U_f h + b_f) * c(t)
             + sigmoid(W_i x + U_i h + b_i) * tanh(W_c x + U_c h + b_c)
    h(t+1) = sigmoid(W_o x + U_o h + b_o) * tanh(c(t+1))

where ``x`` is the external input for the first layer and the *new* hidden
state of the previous layer otherwise.  The output is ``y = U_y h_L + b_y``.

Everything here is plain numpy on float64.  Parameter containers are frozen
dataclasses; nothing mutates its arguments.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GATES = ("f", "i", "c", "o")
LAYER_FIELDS = tuple(f"W_{g}" for g in GATES) + tuple(f"U_{g}" for g in GATES) + tuple(
    f"b_{g}" for g in GATES
)


class ShapeError(ValueError):
    """Raised when parameter or state shapes are inconsistent."""


class InputBoundWarning(UserWarning):
    """Emitted when an input leaves the box [-x_max, x_max]."""


def sigmoid(z):
    """Numerically stable logistic function (branches on the sign of ``z``)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    return m


def _as_vector(a, name: str) -> np.ndarray:
    v = np.array(a, dtype=float)
    if v.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class LstmLayerParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    U_f: np.ndarray
    U_i: np.ndarray
    U_c: np.ndarray
    U_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        for name in LAYER_FIELDS:
            conv = _as_vector if name.startswith("b") else _as_matrix
            arr = conv(getattr(self, name), name)
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}: non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n_c, n_in = self.W_f.shape
        for g in GATES:
            W, U, b = self.W(g), self.U(g), self.b(g)
            if W.shape != (n_c, n_in):
                raise ShapeError(f"W_{g}: expected {(n_c, n_in)}, got {W.shape}")
            if U.shape != (n_c, n_c):
                raise ShapeError(f"U_{g}: expected {(n_c, n_c)}, got {U.shape}")
            if b.shape != (n_c,):
                raise ShapeError(f"b_{g}: expected {(n_c,)}, got {b.shape}")

    @property
    def n_c(self) -> int:
        return self.W_f.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_f.shape[1]

    def W(self, gate: str) -> np.ndarray:
        return getattr(self, f"W_{gate}")

    def U(self, gate: str) -> np.ndarray:
        return getattr(self, f"U_{gate}")

    def b(self, gate: str) -> np.ndarray:
        return getattr(self, f"b_{gate}")

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in LAYER_FIELDS}

    @classmethod
    def zeros(cls, n_in: int, n_c: int) -> "LstmLayerParams":
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = np.zeros((n_c, n_in))
            kw[f"U_{g}"] = np.zeros((n_c, n_c))
            kw[f"b_{g}"] = np.zeros(n_c)
        return cls(**kw)


@dataclass(frozen=True)
class LstmParams:
    layers: tuple
    U_y: np.ndarray
    b_y: np.ndarray
    x_max: float = 1.0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("an LSTM needs at least one layer")
        object.__setattr__(self, "layers", layers)
        for l in range(1, len(layers)):
            prev, cur = layers[l - 1], layers[l]
            if cur.n_in != prev.n_c:
                raise ShapeError(
                    f"layer {l + 1}: input size {cur.n_in} does not match "
                    f"hidden size {prev.n_c} of layer {l}"
                )
        U_y = _as_matrix(self.U_y, "U_y")
        b_y = _as_vector(self.b_y, "b_y")
        if U_y.shape[1] != layers[-1].n_c:
            raise ShapeError(f"U_y: expected {layers[-1].n_c} columns, got shape {U_y.shape}")
        if b_y.shape != (U_y.shape[0],):
            raise ShapeError(f"b_y: expected {(U_y.shape[0],)}, got {b_y.shape}")
        if not (np.all(np.isfinite(U_y)) and np.all(np.isfinite(b_y))):
            raise ShapeError("readout: non-finite entries")
        U_y.setflags(write=False)
        b_y.setflags(write=False)
        object.__setattr__(self, "U_y", U_y)
        object.__setattr__(self, "b_y", b_y)
        x_max = float(self.x_max)
        if not (x_max > 0 and np.isfinite(x_max)):
            raise ShapeError(f"x_max must be positive, got {x_max}")
        object.__setattr__(self, "x_max", x_max)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_x(self) -> int:
        return self.layers[0].n_in

    @property
    def n_y(self) -> int:
        return self.U_y.shape[0]

    def layer_x_max(self, l: int) -> float:
        """Input bound seen by layer ``l`` (0-based); deeper layers see hidden states."""
        return self.x_max if l == 0 else 1.0

    def to_dict(self) -> dict:
        return {
            "x_max": self.x_max,
            "layers": [layer.to_dict() for layer in self.layers],
            "U_y": self.U_y.tolist(),
            "b_y": self.b_y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, source: str = "model") -> "LstmParams":
        if not isinstance(d, dict):
            raise ShapeError(f"{source}: expected a JSON object")
        # "meta" carries provenance (e.g. the training config) and is ignored here
        unknown = set(d) - {"x_max", "layers", "U_y", "b_y", "meta"}
        if unknown:
            raise ShapeError(f"{source}: unknown keys {sorted(unknown)}")
        for key in ("x_max", "layers", "U_y", "b_y"):
            if key not in d:
                raise ShapeError(f"{source}: missing field '{key}'")
        layers = []
        for idx, ld in enumerate(d["layers"]):
            missing = [k for k in LAYER_FIELDS if k not in ld]
            if missing:
                raise ShapeError(f"{source}: layers[{idx}] missing {missing}")
            extra = set(ld) - set(LAYER_FIELDS)
            if extra:
                raise ShapeError(f"{source}: layers[{idx}] unknown keys {sorted(extra)}")
            try:
                layers.append(LstmLayerParams(**{k: ld[k] for k in LAYER_FIELDS}))
            except (ShapeError, ValueError) as exc:
                raise ShapeError(f"{source}: layers[{idx}]: {exc}") from exc
        try:
            return cls(layers=tuple(layers), U_y=d["U_y"], b_y=d["b_y"], x_max=d["x_max"])
        except (ShapeError, ValueError, TypeError) as exc:
            raise ShapeError(f"{source}: {exc}") from exc

    @classmethod
    def zeros(cls, n_x: int, n_c: int | Sequence[int], n_y: int, x_max: float = 1.0) -> "LstmParams":
        sizes = [n_c] if isinstance(n_c, int) else list(n_c)
        layers, n_in = [], n_x
        for size in sizes:
            layers.append(LstmLayerParams.zeros(n_in, size))
            n_in = size
        return cls(tuple(layers), np.zeros((n_y, n_in)), np.zeros(n_y), x_max)


def load_params(path) -> LstmParams:
    path = Path(path)
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ShapeError(f"{path}: invalid JSON ({exc})") from exc
    return LstmParams.from_dict(d, source=str(path))


def save_params(params: LstmParams, path, meta: dict | None = None) -> None:
    from .io_utils import atomic_write_text

    d = params.to_dict()
    if meta is not None:
        d["meta"] = meta
    atomic_write_text(path, json.dumps(d, indent=1))


@dataclass(frozen=True)
class LstmState:
    c: tuple
    h: tuple

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(np.array(v, dtype=float) for v in self.c))
        object.__setattr__(self, "h", tuple(np.array(v, dtype=float) for v in self.h))
        if len(self.c) != len(self.h):
            raise ShapeError("state: c and h must have one entry per layer")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([c, h]) for c, h in zip(self.c, self.h)])


def zero_state(params: LstmParams) -> LstmState:
    return LstmState(
        c=tuple(np.zeros(layer.n_c) for layer in params.layers),
        h=tuple(np.zeros(layer.n_c) for layer in params.layers),
    )


def _check_state(params: LstmParams, state: LstmState) -> None:
    if len(state.c) != params.n_layers:
        raise ShapeError(f"state has {len(state.c)} layers, model has {params.n_layers}")
    for l, layer in enumerate(params.layers):
        for name, v in (("c", state.c[l]), ("h", state.h[l])):
            if v.shape != (layer.n_c,):
                raise ShapeError(f"layer {l + 1}: {name} expected shape {(layer.n_c,)}, got {v.shape}")


def layer_step(layer: LstmLayerParams, c: np.ndarray, h: np.ndarray, x: np.ndarray):
    """One update of a single layer; returns ``(c_next, h_next)``."""
    f = sigmoid(layer.W_f @ x + layer.U_f @ h + layer.b_f)
    i = sigmoid(layer.W_i @ x + layer.U_i @ h + layer.b_i)
    g = np.tanh(layer.W_c @ x + layer.U_c @ h + layer.b_c)
    o = sigmoid(layer.W_o @ x + layer.U_o @ h + layer.b_o)
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return c_next, h_next


def readout(params: LstmParams, h_last: np.ndarray) -> np.ndarray:
    return params.U_y @ h_last + params.b_y


def _check_input(params: LstmParams, x: np.ndarray, t: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (params.n_x,):
        raise ShapeError(f"layer 1: input expected shape {(params.n_x,)}, got {x.shape}")
    if np.any(np.abs(x) > params.x_max):
        where = "" if t is None else f" at t={t}"
        warnings.warn(
            f"input{where} exceeds x_max={params.x_max} (max |x| = {np.max(np.abs(x)):.4g})",
            InputBoundWarning,
            stacklevel=3,
        )
    return x


def step(params: LstmParams, state: LstmState, x) -> tuple[LstmState, np.ndarray]:
    """Advance every layer one step and return ``(next_state, y)``.

    ``y`` is read from the new top-layer hidden state.
    """
    _check_state(params, state)
    inp = _check_input(params, x)
    cs, hs = [], []
    for l, layer in enumerate(params.layers):
        c_next, h_next = layer_step(layer, state.c[l], state.h[l], inp)
        cs.append(c_next)
        hs.append(h_next)
        inp = h_next
    return LstmState(tuple(cs), tuple(hs)), readout(params, hs[-1])


@dataclass(frozen=True)
class Trace:
    """Inputs, post-step states and outputs of a simulation.

    ``states[t]`` and ``outputs[t]`` are the state and output after consuming
    ``inputs[t]``.  ``c[l]`` / ``h[l]`` hold the per-layer arrays of shape
    ``(T, n_c)`` for vectorised access.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    c: tuple = field(repr=False)
    h: tuple = field(repr=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def state(self, t: int) -> LstmState:
        return LstmState(tuple(c[t] for c in self.c), tuple(h[t] for h in self.h))

    @property
    def states(self) -> list:
        return [self.state(t) for t in range(len(self))]


def simulate(params: LstmParams, s0: LstmState, xs: Iterable) -> Trace:
    """Run the network over ``xs``; equivalent to repeated :func:`step` calls."""
    _check_state(params, s0)
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1 and params.n_x == 1:
        xs = xs[:, None]
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ShapeError(f"simulate: expected a non-empty (T, {params.n_x}) input array, got {xs.shape}")
    if xs.shape[1] != params.n_x:
        raise ShapeError(f"layer 1: input expected {params.n_x} columns, got {xs.shape[1]}")
    if np.any(np.abs(xs) > params.x_max):
        t_bad = int(np.argmax(np.any(np.abs(xs) > params.x_max, axis=1)))
        warnings.warn(
            f"input exceeds x_max={params.x_max} first at t={t_bad}", InputBoundWarning, stacklevel=2
        )
    T = xs.shape[0]
    cs = [np.empty((T, layer.n_c)) for layer in params.layers]
    hs = [np.empty((T, layer.n_c)) for layer in params.layers]
    outputs = np.empty((T, params.n_y))
    c = list(s0.c)
    h = list(s0.h)
    for t in range(T):
        inp = xs[t]
        for l, layer in enumerate(params.layers):
            c[l], h[l] = layer_step(layer, c[l], h[l], inp)
            cs[l][t] = c[l]
            hs[l][t] = h[l]
            inp = h[l]
        # per-step readout keeps results bit-identical to repeated step() calls
        outputs[t] = readout(params, h[-1])
    return Trace(inputs=xs.copy(), outputs=outputs, c=tuple(cs), h=tuple(hs))


def random_params(
    rng: np.random.Generator,
    n_x: int,
    n_c: int,
    n_y: int,
    *,
    W_range=(-1.0, 1.0),
    U_range=(-1.0, 1.0),
    b_range=(-1.0, 1.0),
    Uy_range=(-1.0, 1.0),
    by_range=(0.0, 0.0),
    x_max: float = 1.0,
    n_layers: int = 1,
) -> LstmParams:
    """Draw every entry independently and uniformly from the given ranges."""
    layers, n_in = [], n_x
    for _ in range(n_layers):
        kw = {}
        for g in GATES:
            kw[f"W_{g}"] = rng.uniform(*W_range, size=(n_c, n_in))
            kw[f"U_{g}"] = rng.uniform(*U_range, size=(n_c, n_c))
            kw[f"b_{g}"] = rng.uniform(*b_range, size=n_c)
        layers.append(LstmLayerParams(**kw))
        n_in = n_c
    return LstmParams(
        tuple(layers),
        rng.uniform(*Uy_range, size=(n_y, n_c)),
        rng.uniform(*by_range, size=n_y),
        x_max,
    )
