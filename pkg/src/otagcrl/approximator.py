"""Value and logit approximators over (state, goal) pairs.

Two families share one interface: ``predict(s_idx, g_idx)`` on index arrays,
``gradient(s_idx, g_idx, upstream)`` returning the gradient of
``sum_i upstream_i * output_i`` with respect to the parameters, and a flat
``params`` vector that optimizers and target copies operate on.

Tabular tables return a :class:`SparseGradient`; SGD on a tabular table moves each
touched entry by ``lr`` times the mean per-sample gradient of the samples that hit
it, so an entry's step size does not depend on how often it was drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .maze import GridMaze, load_layout, BUNDLED_LAYOUTS

CKPT_HEADER = "OTAGCRL-CKPT v1"
FEATURE_MODES = ("onehot-pair", "normalized-coords")


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or weight stops being finite."""


# -- features ------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    mode: str = "normalized-coords"

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ValueError(f"feature mode must be one of {FEATURE_MODES}, got {self.mode!r}")

    def dim(self, maze: GridMaze) -> int:
        return 2 * maze.n_free if self.mode == "onehot-pair" else 6

    def encode(self, maze: GridMaze, s_idx, g_idx) -> np.ndarray:
        """Dense (B, dim) features. One-hot pairs are only materialized here for
        inspection; the MLP consumes them as row lookups."""
        s_idx = np.asarray(s_idx)
        g_idx = np.asarray(g_idx)
        if self.mode == "onehot-pair":
            F = maze.n_free
            x = np.zeros((len(s_idx), 2 * F))
            x[np.arange(len(s_idx)), s_idx] = 1.0
            x[np.arange(len(s_idx)), F + g_idx] = 1.0
            return x
        scale = np.array([max(maze.width - 1, 1), max(maze.height - 1, 1)], dtype=np.float64)
        s = maze.cell_xy[s_idx] / scale
        g = maze.cell_xy[g_idx] / scale
        return np.concatenate([s, g, g - s], axis=1)


@dataclass
class SparseGradient:
    index: np.ndarray      # flat parameter indices, unique
    values: np.ndarray     # summed gradient per index
    counts: np.ndarray     # samples contributing per index
    batch_size: int = 1    # samples in the batch that produced it


# -- tabular -------------------------------------------------------------------

class TabularValue:
    """Dense table over (state index, goal index), zero-initialized.

    ``out_dim > 1`` stores a vector per pair (used for tabular policy logits).
    """

    kind = "tabular"

    def __init__(self, maze: GridMaze, out_dim: int = 1, role: str = "value"):
        self.maze = maze
        self.out_dim = out_dim
        self.role = role
        F = maze.n_free
        shape = (F, F) if out_dim == 1 else (F, F, out_dim)
        self.values = np.zeros(shape)

    @property
    def params(self) -> np.ndarray:
        return self.values.reshape(-1)

    @params.setter
    def params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.values.size:
            raise ValueError(f"expected {self.values.size} parameters, got {flat.size}")
        self.values = flat.reshape(self.values.shape).copy()

    @property
    def n_params(self) -> int:
        return self.values.size

    def predict(self, s_idx, g_idx) -> np.ndarray:
        return self.values[np.asarray(s_idx), np.asarray(g_idx)]

    def evaluate(self, s, g) -> float:
        return float(self.values[self.maze.index_of(s), self.maze.index_of(g)]) \
            if self.out_dim == 1 else self.values[self.maze.index_of(s), self.maze.index_of(g)].copy()

    def set(self, s, g, value) -> None:
        self.values[self.maze.index_of(s), self.maze.index_of(g)] = value

    def gradient(self, s_idx, g_idx, upstream) -> SparseGradient:
        F = self.maze.n_free
        pair = np.asarray(s_idx, dtype=np.int64) * F + np.asarray(g_idx, dtype=np.int64)
        upstream = np.asarray(upstream, dtype=np.float64)
        uniq, inv, counts = np.unique(pair, return_inverse=True, return_counts=True)
        if self.out_dim == 1:
            sums = np.bincount(inv, weights=upstream, minlength=len(uniq))
            return SparseGradient(uniq, sums, counts, len(pair))
        sums = np.zeros((len(uniq), self.out_dim))
        np.add.at(sums, inv, upstream)
        index = (uniq[:, None] * self.out_dim + np.arange(self.out_dim)).ravel()
        return SparseGradient(index, sums.ravel(), np.repeat(counts, self.out_dim), len(pair))

    def copy(self) -> "TabularValue":
        other = TabularValue.__new__(TabularValue)
        other.maze, other.out_dim, other.role = self.maze, self.out_dim, self.role
        other.values = self.values.copy()
        return other

    def descriptor(self) -> dict:
        return {"kind": "tabular", "role": self.role, "layout": self.maze.layout_id,
                "shape": ",".join(map(str, self.values.shape))}


# -- MLP -----------------------------------------------------------------------

class MlpValue:
    """ReLU MLP on (state, goal) features with a linear output layer.

    ``hidden`` lists the hidden widths; ``out_dim`` is 1 for a value head.
    Parameters live in one flat vector laid out as W1, b1, W2, b2, ...
    with each ``W`` stored (fan_in, fan_out) row-major.
    """

    kind = "mlp"

    def __init__(self, maze: GridMaze, hidden=(256, 256), features: FeatureSpec | str = "normalized-coords",
                 out_dim: int = 1, rng: np.random.Generator | None = None, role: str = "value",
                 zero_init: bool = False):
        self.maze = maze
        self.features = features if isinstance(features, FeatureSpec) else FeatureSpec(features)
        self.out_dim = out_dim
        self.role = role
        self.layer_sizes = [self.features.dim(maze), *map(int, hidden), out_dim]
        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._shapes.append((offset, fan_in, fan_out))
            offset += fan_in * fan_out + fan_out
        self._params = np.zeros(offset)
        if not zero_init:
            rng = rng if rng is not None else np.random.default_rng(0)
            for li, (W, b) in enumerate(self._layers()):
                # torch-style default init; the one-hot input layer sees 2 active rows
                fan_in = 2 if (li == 0 and self.features.mode == "onehot-pair") else W.shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                W[...] = rng.uniform(-bound, bound, size=W.shape)
                b[...] = rng.uniform(-bound, bound, size=b.shape)
        self._cache = None

    # parameters -------------------------------------------------------------

    def _layers(self):
        out = []
        for offset, fan_in, fan_out in self._shapes:
            W = self._params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            b = self._params[offset + fan_in * fan_out:offset + fan_in * fan_out + fan_out]
            out.append((W, b))
        return out

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self._params.shape:
            raise ValueError(f"expected {self._params.size} parameters, got {flat.size}")
        self._params[...] = flat

    @property
    def n_params(self) -> int:
        return self._params.size

    # forward / backward -----------------------------------------------------

    def _forward(self, s_idx, g_idx, keep: bool):
        layers = self._layers()
        s_idx = np.asarray(s_idx, dtype=np.int64)
        g_idx = np.asarray(g_idx, dtype=np.int64)
        W, b = layers[0]
        if self.features.mode == "onehot-pair":
            x = None
            z = W[s_idx] + W[self.maze.n_free + g_idx] + b
        else:
            x = self.features.encode(self.maze, s_idx, g_idx)
            z = x @ W + b
        acts = [x]
        pre = [z]
        h = z
        for W, b in layers[1:]:
            h = np.maximum(h, 0.0)
            acts.append(h)
            h = h @ W + b
            pre.append(h)
        if keep:
            self._cache = (s_idx, g_idx, acts, pre)
        return h

    def predict(self, s_idx, g_idx) -> np.ndarray:
        out = self._forward(s_idx, g_idx, keep=False)
        return out[:, 0] if self.out_dim == 1 else out

    def evaluate(self, s, g) -> float:
        out = self.predict([self.maze.index_of(s)], [self.maze.index_of(g)])
        return float(out[0]) if self.out_dim == 1 else out[0]

    def gradient(self, s_idx, g_idx, upstream) -> np.ndarray:
        self._forward(s_idx, g_idx, keep=True)
        return self.backward(upstream)

    def backward(self, upstream) -> np.ndarray:
        """Gradient for the inputs of the last ``predict_for_grad`` call."""
        s_idx, g_idx, acts, pre = self._cache
        grad = np.zeros_like(self._params)
        delta = np.asarray(upstream, dtype=np.float64)
        if delta.ndim == 1:
            delta = delta[:, None]
        layers = self._layers()
        for li in range(len(layers) - 1, -1, -1):
            offset, fan_in, fan_out = self._shapes[li]
            gW = grad[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            gb = grad[offset + fan_in * fan_out:offset + fan_in * fan_out + fan_out]
            gb[...] = delta.sum(axis=0)
            a = acts[li]
            if li == 0 and a is None:
                F = self.maze.n_free
                rows = np.concatenate([s_idx, F + g_idx])
                kernels.scatter_add_rows(gW, rows, np.ascontiguousarray(np.concatenate([delta, delta])))
            else:
                gW[...] = a.T @ delta
            if li > 0:
                delta = (delta @ layers[li][0].T) * (pre[li - 1] > 0)
        return grad

    def predict_for_grad(self, s_idx, g_idx) -> np.ndarray:
        out = self._forward(s_idx, g_idx, keep=True)
        return out[:, 0] if self.out_dim == 1 else out

    def copy(self) -> "MlpValue":
        other = MlpValue.__new__(MlpValue)
        other.__dict__.update(self.__dict__)
        other._params = self._params.copy()
        other.layer_sizes = list(self.layer_sizes)
        other._cache = None
        return other

    def descriptor(self) -> dict:
        return {"kind": "mlp", "role": self.role, "layout": self.maze.layout_id,
                "sizes": ",".join(map(str, self.layer_sizes)), "features": self.features.mode}


# -- optimizers ----------------------------------------------------------------

@dataclass
class OptimizerState:
    """``kind`` is 'sgd' or 'adam'; moment buffers are created lazily."""

    kind: str = "adam"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(arr))
        raise NonFiniteError(
            f"{name} has {bad.size} non-finite entries (first at flat index {bad[0]}, "
            f"value {arr[bad[0]]})")


def apply_update(approx, gradient, state: OptimizerState):
    """Descend ``gradient`` in place; returns ``approx``."""
    if isinstance(gradient, SparseGradient):
        _check_finite("gradient", gradient.values)
        if state.kind != "sgd":
            raise ValueError("tabular approximators support only the 'sgd' optimizer")
        flat = approx.params
        # upstream terms carry the 1/B of a batch mean; undo it per entry
        flat[gradient.index] -= state.lr * gradient.values * gradient.batch_size / gradient.counts
        state.step += 1
        return approx
    gradient = np.asarray(gradient, dtype=np.float64)
    _check_finite("gradient", gradient)
    params = approx.params
    if gradient.shape != params.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match parameters {params.shape}")
    state.step += 1
    if state.kind == "sgd":
        params -= state.lr * gradient
        return approx
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    kernels.adam_update(params, np.ascontiguousarray(gradient), state.m, state.v, state.lr,
                        state.beta1, state.beta2, state.eps,
                        1.0 - state.beta1 ** state.step, 1.0 - state.beta2 ** state.step)
    return approx


# -- target network ------------------------------------------------------------

class TargetCopy:
    """Frozen snapshot of an approximator, refreshed by Polyak averaging."""

    def __init__(self, live, polyak_rate: float = 0.005):
        if not 0.0 < polyak_rate <= 1.0:
            raise ValueError("polyak_rate must lie in (0, 1]")
        self.model = live.copy()
        self.polyak_rate = polyak_rate

    @property
    def params(self) -> np.ndarray:
        return self.model.params

    def predict(self, s_idx, g_idx) -> np.ndarray:
        return self.model.predict(s_idx, g_idx)

    def evaluate(self, s, g) -> float:
        return self.model.evaluate(s, g)


def sync_target(live, target: TargetCopy, rate: float | None = None) -> TargetCopy:
    rho = target.polyak_rate if rate is None else rate
    if live.params.shape != target.params.shape:
        raise ValueError("live and target parameter shapes differ")
    if rho >= 1.0:
        target.model.params = live.params.copy()
    else:
        kernels.polyak_update(target.params, np.ascontiguousarray(live.params), rho)
    return target


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(approx, path, **extra) -> None:
    desc = approx.descriptor()
    desc.update({k: str(v) for k, v in extra.items()})
    line = " ".join(f"{k}={v}" for k, v in desc.items())
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_HEADER}\n{line}\n".encode())
        fh.write(np.ascontiguousarray(approx.params, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    try:
        head, rest = raw.split(b"\n", 1)
        desc_line, payload = rest.split(b"\n", 1)
    except ValueError:
        raise ValueError(f"{path}: truncated checkpoint") from None
    if head.decode() != CKPT_HEADER:
        raise ValueError(f"{path}: not an {CKPT_HEADER} file")
    desc = dict(tok.split("=", 1) for tok in desc_line.decode().split())
    if len(payload) % 8:
        raise ValueError(f"{path}: parameter payload is not a whole number of float64")
    return desc, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def load_checkpoint(path, maze: GridMaze | None = None):
    desc, params = read_checkpoint(path)
    if maze is None:
        if desc["layout"] not in BUNDLED_LAYOUTS:
            raise ValueError(f"{path}: layout {desc['layout']!r} is not bundled; pass the maze")
        maze = load_layout(desc["layout"])
    if desc["layout"] != maze.layout_id:
        raise ValueError(f"{path}: checkpoint layout {desc['layout']} != {maze.layout_id}")
    if desc["kind"] == "tabular":
        shape = tuple(int(v) for v in desc["shape"].split(","))
        approx = TabularValue(maze, out_dim=shape[2] if len(shape) == 3 else 1, role=desc["role"])
    elif desc["kind"] == "mlp":
        sizes = [int(v) for v in desc["sizes"].split(",")]
        approx = MlpValue(maze, hidden=sizes[1:-1], features=desc["features"], out_dim=sizes[-1],
                          role=desc["role"], zero_init=True)
        if approx.layer_sizes[0] != sizes[0]:
            raise ValueError(f"{path}: input width {sizes[0]} does not fit {maze.layout_id}")
    else:
        raise ValueError(f"{path}: unknown approximator kind {desc['kind']!r}")
    approx.params = params
    return approx, desc
