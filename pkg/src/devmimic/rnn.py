"""Stacked GRU sequence network written directly against numpy.

Each hidden layer is a GRU with a single bias per gate::

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    hc = tanh(x Wh + (r * h) Uh + bh)
    h' = (1 - z) * h + z * hc

and the readout maps the top layer to the outputs through a logistic, so
predictions lie in (0, 1). Gate matrices are stored side by side in the
column order (z, r, h): ``W`` is (in, 3H), ``U`` is (H, 3H), ``b`` is (3H,).

Internally sequences are stored ``(T, width, B)`` (batch innermost); the
public API takes ``(B, T, width)`` or a single ``(T, width)`` sequence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

try:
    from devmimic import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

CHECKPOINT_MAGIC = b"DEVMIMIC-NETWORK"
_WIRE = np.dtype("<f4")


class ConfigError(ValueError):
    pass


class StaleTraceError(RuntimeError):
    """The parameters changed between the forward pass and backward()."""


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class NetworkConfig:
    input_width: int
    output_width: int
    hidden_layers: int = 4
    hidden_width: int | None = None
    seed: int = 0
    # BPTT window in steps; None means full backpropagation through time
    truncate: int | None = None

    def __post_init__(self):
        if self.hidden_width is None:
            self.hidden_width = max(self.input_width, self.output_width) + 1
        if min(self.input_width, self.output_width, self.hidden_width, self.hidden_layers) < 1:
            raise ConfigError(f"all widths and the layer count must be >= 1: {self}")
        if self.truncate is not None and self.truncate < 1:
            raise ConfigError("truncate must be >= 1")

    def block_shapes(self) -> dict[str, tuple]:
        h = self.hidden_width
        shapes = {}
        for layer in range(self.hidden_layers):
            fan_in = self.input_width if layer == 0 else h
            shapes[f"layer{layer}.W"] = (fan_in, 3 * h)
            shapes[f"layer{layer}.U"] = (h, 3 * h)
            shapes[f"layer{layer}.b"] = (3 * h,)
        shapes["readout.W"] = (h, self.output_width)
        shapes["readout.b"] = (self.output_width,)
        return shapes


def param_count(config: NetworkConfig) -> int:
    """3H(I + H + 1) + (L - 1) * 3H(2H + 1) + H*O + O."""
    i, h, o, n_layers = config.input_width, config.hidden_width, config.output_width, config.hidden_layers
    return 3 * h * (i + h + 1) + (n_layers - 1) * 3 * h * (2 * h + 1) + h * o + o


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: NetworkConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights per gate matrix, zero biases."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    h = config.hidden_width
    params = {}
    for name, shape in config.block_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        # stacked gate blocks: each (fan_in, H) gate gets its own Glorot bound
        fan_out = h if name.startswith("layer") else shape[1]
        limit = glorot_limit(shape[0], fan_out)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def gru_step(W, U, b, x, h_prev):
    """One GRU update for a single layer; ``x``/``h_prev`` may carry a batch axis."""
    H = U.shape[0]
    if x.shape[-1] != W.shape[0] or h_prev.shape[-1] != H:
        raise ValueError(f"shape mismatch: x {x.shape}, h {h_prev.shape}, W {W.shape}, U {U.shape}")
    a = x @ W + b
    zr = expit(a[..., :2 * H] + h_prev @ U[:, :2 * H])
    z, r = zr[..., :H], zr[..., H:]
    hc = np.tanh(a[..., 2 * H:] + (r * h_prev) @ U[:, 2 * H:])
    return h_prev + z * (hc - h_prev)


def msle_loss(predicted, target) -> float:
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    diff = np.log1p(target) - np.log1p(np.maximum(predicted, 0))
    return float(np.mean(np.square(diff, dtype=np.float64)))


def msle_elements(predicted, target) -> np.ndarray:
    diff = np.log1p(np.asarray(target, np.float64)) - np.log1p(np.maximum(np.asarray(predicted, np.float64), 0))
    return diff * diff


@dataclass
class _LayerTrace:
    inputs: np.ndarray   # (T, in, B)
    h: np.ndarray        # (T + 1, H, B); h[0] is the zero initial state
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray
    rh: np.ndarray       # r * h_prev, input to Uh


@dataclass
class Trace:
    version: int
    layers: list
    outputs: np.ndarray  # (T, O, B) logistic outputs
    batched: bool


@dataclass
class GRUNetwork:
    config: NetworkConfig
    params: dict = field(default=None)
    dtype: type = np.float32
    version: int = 0
    # "numba" runs the recurrent scans compiled; "numpy" is the reference path
    backend: str = "auto"

    def __post_init__(self):
        if self.backend == "auto":
            self.backend = "numba" if _kernels is not None else "numpy"
        if self.backend not in ("numba", "numpy"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.params is None:
            self.params = init_params(self.config, self.dtype)
        else:
            shapes = self.config.block_shapes()
            if set(shapes) != set(self.params):
                raise ConfigError("parameter blocks do not match the config")
            for name, shape in shapes.items():
                if self.params[name].shape != shape:
                    raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            self.params = {name: np.asarray(self.params[name], dtype=self.dtype) for name in shapes}

    @property
    def n_params(self) -> int:
        return param_count(self.config)

    def copy(self) -> "GRUNetwork":
        return GRUNetwork(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype,
                          backend=self.backend)

    def astype(self, dtype) -> "GRUNetwork":
        return GRUNetwork(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dtype,
                          backend=self.backend)

    def touch(self) -> None:
        """Mark parameters as modified so older traces are rejected."""
        self.version += 1

    # -- forward --------------------------------------------------------------

    def _prepare(self, inputs) -> tuple[np.ndarray, bool]:
        x = np.asarray(inputs, dtype=self.dtype)
        if x.ndim not in (2, 3):
            raise ValueError(f"inputs must be (T, I) or (B, T, I), got {x.shape}")
        if x.shape[-1] != self.config.input_width:
            raise ValueError(f"input width {x.shape[-1]} != {self.config.input_width}")
        batched = x.ndim == 3
        return np.ascontiguousarray(_to_internal(x, batched)), batched

    def _exp_args(self, batch: int) -> tuple:
        clamp, mant, bias, int_type = _kernels.exp_params(self.dtype)
        bits = np.empty(2 * self.config.hidden_width * batch, dtype=int_type)
        return self.dtype(clamp), mant, int_type(bias), bits

    def _readout(self, top: np.ndarray) -> np.ndarray:
        logits = np.matmul(self.params["readout.W"].T, top) + self.params["readout.b"][:, None]
        return expit(logits)

    def forward(self, inputs) -> tuple[np.ndarray, Trace]:
        x, batched = self._prepare(inputs)
        T, _, B = x.shape
        H = self.config.hidden_width
        layers = []
        seq = x
        for layer in range(self.config.hidden_layers):
            W = self.params[f"layer{layer}.W"]
            U = self.params[f"layer{layer}.U"]
            a = np.matmul(W.T, seq) + self.params[f"layer{layer}.b"][:, None]
            hs = np.zeros((T + 1, H, B), dtype=self.dtype)
            zs = np.empty((T, H, B), dtype=self.dtype)
            rs = np.empty_like(zs)
            hcs = np.empty_like(zs)
            rhs = np.empty_like(zs)
            if self.backend == "numba":
                _kernels.forward_scan(a, U, hs, zs, rs, hcs, rhs, *self._exp_args(B))
            else:
                _forward_scan(a, U, hs, zs, rs, hcs, rhs)
            layers.append(_LayerTrace(seq, hs, zs, rs, hcs, rhs))
            seq = hs[1:]
        y = self._readout(seq)
        return _from_internal(y, batched), Trace(self.version, layers, y, batched)

    def predict(self, inputs) -> np.ndarray:
        """Forward pass without keeping activations for backpropagation."""
        x, batched = self._prepare(inputs)
        T, _, B = x.shape
        seq = x
        for layer in range(self.config.hidden_layers):
            W = self.params[f"layer{layer}.W"]
            U = self.params[f"layer{layer}.U"]
            a = np.matmul(W.T, seq) + self.params[f"layer{layer}.b"][:, None]
            out = np.empty((T, self.config.hidden_width, B), dtype=self.dtype)
            if self.backend == "numba":
                _kernels.predict_scan(a, U, out, *self._exp_args(B))
            else:
                _predict_scan(a, U, out)
            seq = out
        return _from_internal(self._readout(seq), batched)

    # -- backward -------------------------------------------------------------

    def backward(self, trace: Trace, target) -> dict[str, np.ndarray]:
        """Exact gradients of the mean MSLE with respect to every block."""
        if trace.version != self.version:
            raise StaleTraceError(f"trace from version {trace.version}, params at {self.version}")
        y = trace.outputs
        tgt = _to_internal(np.asarray(target, dtype=self.dtype), trace.batched)
        if tgt.shape != y.shape:
            raise ValueError(f"target shape {tgt.shape} != output shape {y.shape}")
        H = self.config.hidden_width
        window = self.config.truncate or 0
        grads = {}

        y_pos = np.maximum(y, 0)
        d_y = (-2.0 / y.size) * (np.log1p(tgt) - np.log1p(y_pos)) / (1.0 + y_pos)
        d_y = np.where(y >= 0, d_y, 0).astype(self.dtype)
        d_logit = d_y * y * (1 - y)
        top = trace.layers[-1].h[1:]
        grads["readout.W"] = self._outer_sum(top, d_logit)
        grads["readout.b"] = d_logit.sum(axis=(0, 2))
        d_seq = np.matmul(self.params["readout.W"], d_logit)

        for layer in reversed(range(self.config.hidden_layers)):
            lt = trace.layers[layer]
            W = self.params[f"layer{layer}.W"]
            U = self.params[f"layer{layer}.U"]
            T, _, B = d_seq.shape
            d_a = np.empty((T, 3 * H, B), dtype=self.dtype)
            scan = _kernels.backward_scan if self.backend == "numba" else _backward_scan
            scan(np.ascontiguousarray(d_seq), lt.h, lt.z, lt.r, lt.hc, U, window, d_a)
            outer = self._outer_sum
            grads[f"layer{layer}.W"] = outer(lt.inputs, d_a)
            grads[f"layer{layer}.b"] = d_a.sum(axis=(0, 2))
            grads[f"layer{layer}.U"] = np.concatenate(
                [outer(lt.h[:-1], d_a[:, :2 * H]), outer(lt.rh, d_a[:, 2 * H:])], axis=1)
            d_seq = np.matmul(W, d_a)
        return {name: grads[name] for name in self.config.block_shapes()}

    def _outer_sum(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        if self.backend == "numba":
            out = np.empty((left.shape[1], right.shape[1]), dtype=self.dtype)
            _kernels.outer_sum(left, np.ascontiguousarray(right), out)
            return out
        return _outer_sum(left, right)

    def loss_and_grads(self, inputs, target) -> tuple[float, dict]:
        y, trace = self.forward(inputs)
        return msle_loss(y, target), self.backward(trace, target)


def _to_internal(x: np.ndarray, batched: bool) -> np.ndarray:
    """(B, T, F) or (T, F) -> (T, F, B)."""
    return x.transpose(1, 2, 0) if batched else x[:, :, None]


def _from_internal(y: np.ndarray, batched: bool) -> np.ndarray:
    return y.transpose(2, 0, 1) if batched else y[:, :, 0]


def _forward_scan(a, U, hs, zs, rs, hcs, rhs):
    H = U.shape[0]
    UzrT, UhT = U[:, :2 * H].T, U[:, 2 * H:].T
    for t in range(a.shape[0]):
        h = hs[t]
        zr = expit(a[t, :2 * H] + UzrT @ h)
        z, r = zr[:H], zr[H:]
        rh = r * h
        hc = np.tanh(a[t, 2 * H:] + UhT @ rh)
        hs[t + 1] = h + z * (hc - h)
        zs[t], rs[t], hcs[t], rhs[t] = z, r, hc, rh


def _predict_scan(a, U, out):
    H = U.shape[0]
    UzrT, UhT = U[:, :2 * H].T, U[:, 2 * H:].T
    h = np.zeros(out.shape[1:], dtype=out.dtype)
    for t in range(a.shape[0]):
        zr = expit(a[t, :2 * H] + UzrT @ h)
        hc = np.tanh(a[t, 2 * H:] + UhT @ (zr[H:] * h))
        h = h + zr[:H] * (hc - h)
        out[t] = h


def _backward_scan(d_seq, hs, zs, rs, hcs, U, window, d_a):
    H = U.shape[0]
    Uzr, Uh = U[:, :2 * H], U[:, 2 * H:]
    dh_next = np.zeros(d_seq.shape[1:], dtype=d_seq.dtype)
    for t in reversed(range(d_seq.shape[0])):
        dh = d_seq[t] + dh_next
        z, r, hc, h_prev = zs[t], rs[t], hcs[t], hs[t]
        da_h = dh * z * (1 - hc * hc)
        d_rh = Uh @ da_h
        d_a[t, :H] = dh * (hc - h_prev) * z * (1 - z)
        d_a[t, H:2 * H] = d_rh * h_prev * r * (1 - r)
        d_a[t, 2 * H:] = da_h
        if window > 0 and t % window == 0:
            dh_next = np.zeros_like(dh_next)
        else:
            dh_next = dh * (1 - z) + d_rh * r + Uzr @ d_a[t, :2 * H]


def _outer_sum(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """sum over (t, b) of outer(left[t, :, b], right[t, :, b])."""
    return np.tensordot(left, right, axes=([0, 2], [0, 2]))


# -- optimizer ----------------------------------------------------------------


class Nadam:
    """Adam with a Nesterov look-ahead on the bias-corrected first moment."""

    def __init__(self, params: dict, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteError(f"non-finite gradients in {bad} at step {self.t + 1}")
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            update = (b1 * m_hat + ((1 - b1) / c1) * g) / (np.sqrt(v_hat) + self.eps)
            params[k] -= (self.lr * update).astype(params[k].dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(network: GRUNetwork, path, step: int = 0, extra: dict | None = None) -> None:
    """Header line with config/step/block order, then float32 LE parameters."""
    shapes = network.config.block_shapes()
    header = {
        "config": asdict(network.config),
        "step": step,
        "blocks": [[name, list(shape)] for name, shape in shapes.items()],
        "extra": extra or {},
    }
    payload = b"".join(network.params[name].astype(_WIRE).tobytes(order="C") for name in shapes)
    head = CHECKPOINT_MAGIC + b" " + json.dumps(header, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(head + payload)


def load_checkpoint(path) -> tuple[GRUNetwork, dict]:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if not blob.startswith(CHECKPOINT_MAGIC + b" ") or newline < 0:
        raise CheckpointError(f"{path}: not a network checkpoint")
    header = json.loads(blob[len(CHECKPOINT_MAGIC) + 1:newline])
    config = NetworkConfig(**header["config"])
    shapes = config.block_shapes()
    if [[n, list(s)] for n, s in shapes.items()] != header["blocks"]:
        raise CheckpointError(f"{path}: block layout does not match its config")
    values = np.frombuffer(memoryview(blob)[newline + 1:], dtype=_WIRE)
    if values.size != param_count(config):
        raise CheckpointError(f"{path}: {values.size} parameters, expected {param_count(config)}")
    params, offset = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = values[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    return GRUNetwork(config, params), header
