"""Small feed-forward voters with exact reverse-mode gradients.

A network maps a flat input in R^d to a score in (-1, 1): dense and 2-D
convolution layers with leaky-ReLU hidden activations, an optional 2x2
max-pool after a convolution, and tanh on the single output unit.  All
parameters live in one flat float64 vector so Gaussian perturbation, Adam and
checkpointing never need to know the layer structure.

Gradients are computed w.r.t. both the weights and the input; pure dense
stacks dispatch to the selected kernel backend (compiled or numpy), anything
with convolutions runs through the generic layer walk below.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ContractError, NumericError, ShapeError
from .rng import stream


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class MaxPool2x2:
    pass


_LAYER_TAGS = {Dense: "dense", Conv2d: "conv2d", MaxPool2x2: "maxpool2x2"}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; validated eagerly, hashable by content."""

    layers: tuple
    input_shape: tuple
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if self.leaky_slope <= 0:
            raise ShapeError("leaky_slope must be positive")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _layer_out_shape(layer, shape, i)
        if shape != (1,):
            raise ShapeError(f"output dimension must be 1, got {shape}")
        if not isinstance(self.layers[-1], Dense):
            raise ShapeError("final layer must be dense (tanh output head)")

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_params(self) -> int:
        return self.param_offsets()[-1]

    def param_offsets(self):
        """Cumulative flat offsets: offsets[i] is where layer i's block starts."""
        offs = [0]
        for layer in self.layers:
            n = 0
            if isinstance(layer, Dense):
                n = layer.in_dim * layer.out_dim + layer.out_dim
            elif isinstance(layer, Conv2d):
                n = layer.out_channels * layer.in_channels * layer.kernel ** 2 + layer.out_channels
            offs.append(offs[-1] + n)
        return offs

    def is_dense_chain(self) -> bool:
        return all(isinstance(l, Dense) for l in self.layers)

    def dense_dims(self):
        if not self.is_dense_chain():
            raise ShapeError("not a pure dense stack")
        dims = [self.layers[0].in_dim] + [l.out_dim for l in self.layers]
        return np.asarray(dims, dtype=np.int64)

    def to_dict(self):
        out = []
        for layer in self.layers:
            d = {"type": _LAYER_TAGS[type(layer)]}
            if isinstance(layer, Dense):
                d.update(in_dim=layer.in_dim, out_dim=layer.out_dim)
            elif isinstance(layer, Conv2d):
                d.update(in_channels=layer.in_channels, out_channels=layer.out_channels,
                         kernel=layer.kernel)
            out.append(d)
        return {"layers": out, "input_shape": list(self.input_shape),
                "leaky_slope": self.leaky_slope}

    @staticmethod
    def from_dict(d):
        layers = []
        for ld in d["layers"]:
            t = ld["type"]
            if t == "dense":
                layers.append(Dense(ld["in_dim"], ld["out_dim"]))
            elif t == "conv2d":
                layers.append(Conv2d(ld["in_channels"], ld["out_channels"], ld["kernel"]))
            elif t == "maxpool2x2":
                layers.append(MaxPool2x2())
            else:
                raise ShapeError(f"unknown layer type {t!r}")
        return NetworkSpec(tuple(layers), tuple(d["input_shape"]), d.get("leaky_slope", 0.01))

    def spec_hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()


def _layer_out_shape(layer, shape, index):
    if isinstance(layer, Dense):
        flat = int(np.prod(shape))
        if flat != layer.in_dim:
            raise ShapeError(f"layer {index}: dense expects {layer.in_dim}, gets {flat}")
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"layer {index}: conv2d expects ({layer.in_channels}, h, w), gets {shape}")
        c, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise ShapeError(f"layer {index}: kernel {layer.kernel} larger than input {h}x{w}")
        return (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
    if isinstance(layer, MaxPool2x2):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"layer {index}: 2x2 pool needs even spatial dims, gets {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    raise ShapeError(f"unknown layer {layer!r}")


def mlp(in_dim, hidden=(128,), leaky_slope=0.01) -> NetworkSpec:
    """Dense stack ending in a single tanh unit (the desk-scale default)."""
    dims = [in_dim, *hidden, 1]
    layers = tuple(Dense(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
    return NetworkSpec(layers, (in_dim,), leaky_slope)


def conv_28x28(leaky_slope=0.01) -> NetworkSpec:
    """Convolutional preset for 28x28 grayscale inputs: 32 and 64 filters with
    2x2 pooling, then a 1024-unit dense layer."""
    return NetworkSpec(
        (
            Conv2d(1, 32, 5), MaxPool2x2(),
            Conv2d(32, 64, 5), MaxPool2x2(),
            Dense(64 * 4 * 4, 1024), Dense(1024, 1),
        ),
        (1, 28, 28),
        leaky_slope,
    )


def init_weights(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Fan-in scaled uniform initialization, reproducible per seed."""
    rng = stream(seed, "init-weights")
    offs = spec.param_offsets()
    w = np.empty(spec.n_params, dtype=np.float64)
    for i, layer in enumerate(spec.layers):
        lo, hi = offs[i], offs[i + 1]
        if hi == lo:
            continue
        if isinstance(layer, Dense):
            fan_in = layer.in_dim
        else:
            fan_in = layer.in_channels * layer.kernel ** 2
        scale = 1.0 / np.sqrt(fan_in)
        w[lo:hi] = rng.uniform(-scale, scale, hi - lo)
    return w


def _check_weights(spec, w):
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.n_params:
        raise ShapeError(f"weight vector length {w.shape} != {spec.n_params}")
    return w


def _check_inputs(spec, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.in_dim:
        raise ShapeError(f"input shape {X.shape} incompatible with d={spec.in_dim}")
    return X, single


# ---------------------------------------------------------------------------
# Generic layer walk (any spec; also used to localize non-finite failures).

def _unpack(spec, w):
    offs = spec.param_offsets()
    params = []
    for i, layer in enumerate(spec.layers):
        lo, hi = offs[i], offs[i + 1]
        if isinstance(layer, Dense):
            n_w = layer.in_dim * layer.out_dim
            params.append((w[lo:lo + n_w].reshape(layer.out_dim, layer.in_dim),
                           w[lo + n_w:hi]))
        elif isinstance(layer, Conv2d):
            k, ic, oc = layer.kernel, layer.in_channels, layer.out_channels
            n_w = oc * ic * k * k
            params.append((w[lo:lo + n_w].reshape(oc, ic * k * k), w[lo + n_w:hi]))
        else:
            params.append(None)
    return params


def _im2col(A, k):
    # A: (B, c, h, w) -> (B, h'*w', c*k*k) with h' = h-k+1.
    win = np.lib.stride_tricks.sliding_window_view(A, (k, k), axis=(2, 3))
    B, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _generic_forward(spec, w, X, record):
    params = _unpack(spec, w)
    slope = spec.leaky_slope
    B = X.shape[0]
    a = X.reshape((B,) + spec.input_shape)
    trace = []
    last = len(spec.layers) - 1
    with np.errstate(invalid="ignore", over="ignore"):
        for i, layer in enumerate(spec.layers):
            entry = {"input": a}
            if isinstance(layer, Dense):
                a2 = a.reshape(B, -1)
                entry["flat_in"] = a2
                W, b = params[i]
                z = a2 @ W.T + b
                if i == last:
                    a = np.tanh(z)
                else:
                    a = np.where(z >= 0.0, z, slope * z)
            elif isinstance(layer, Conv2d):
                cols, ho, wo = _im2col(a, layer.kernel)
                entry["cols"] = cols
                Wm, b = params[i]
                z = cols @ Wm.T + b
                a = np.where(z >= 0.0, z, slope * z)
                a = a.transpose(0, 2, 1).reshape(B, layer.out_channels, ho, wo)
            else:
                c, h, wd = a.shape[1:]
                blocks = a.reshape(B, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                blocks = blocks.reshape(B, c, h // 2, wd // 2, 4)
                idx = blocks.argmax(axis=-1)
                entry["pool_idx"] = idx
                a = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
            if not np.isfinite(a).all():
                raise NumericError(f"non-finite activation after layer {i}", layer=i)
            if record:
                entry["output"] = a
                trace.append(entry)
    return a.reshape(B), trace, params


def _generic_backward(spec, params, trace, scores, dscore, need_wgrad, need_xgrad):
    slope = spec.leaky_slope
    B = scores.shape[0]
    offs = spec.param_offsets()
    gw = np.zeros(offs[-1]) if need_wgrad else None
    grad = (dscore * (1.0 - scores * scores)).reshape(B, 1)  # through tanh
    last = len(spec.layers) - 1
    for i in range(last, -1, -1):
        layer = spec.layers[i]
        entry = trace[i]
        if isinstance(layer, Dense):
            if i != last:
                out = entry["output"].reshape(B, -1)
                grad = grad * np.where(out >= 0.0, 1.0, slope)
            a_in = entry["flat_in"]
            W, _ = params[i]
            if need_wgrad:
                lo = offs[i]
                n_w = layer.in_dim * layer.out_dim
                gw[lo:lo + n_w] = (grad.T @ a_in).ravel()
                gw[lo + n_w:offs[i + 1]] = grad.sum(axis=0)
            if i == 0 and not need_xgrad:
                return gw, None
            grad = (grad @ W).reshape(entry["input"].shape)
        elif isinstance(layer, Conv2d):
            k = layer.kernel
            out = entry["output"]
            _, oc, ho, wo = out.shape
            dz = grad.reshape(B, oc, ho * wo).transpose(0, 2, 1)
            dz = dz * np.where(out.reshape(B, oc, ho * wo).transpose(0, 2, 1) >= 0.0, 1.0, slope)
            cols = entry["cols"]
            if need_wgrad:
                Wm_grad = np.einsum("bpo,bpk->ok", dz, cols)
                lo = offs[i]
                n_w = Wm_grad.size
                gw[lo:lo + n_w] = Wm_grad.ravel()
                gw[lo + n_w:offs[i + 1]] = dz.sum(axis=(0, 1))
            if i == 0 and not need_xgrad:
                return gw, None
            Wm, _ = params[i]
            dcols = dz @ Wm  # (B, ho*wo, c*k*k)
            a_in = entry["input"]
            da = np.zeros_like(a_in)
            c_in = a_in.shape[1]
            dcols6 = dcols.reshape(B, ho, wo, c_in, k, k)
            for di in range(k):
                for dj in range(k):
                    da[:, :, di:di + ho, dj:dj + wo] += dcols6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            grad = da
        else:
            a_in = entry["input"]
            B_, c, h, wd = a_in.shape
            dpool = np.zeros((B_, c, h // 2, wd // 2, 4))
            np.put_along_axis(dpool, entry["pool_idx"][..., None], grad[..., None], axis=-1)
            grad = dpool.reshape(B_, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B_, c, h, wd)
    return gw, grad.reshape(B, -1)


# ---------------------------------------------------------------------------
# Public evaluation API.

# float64 tanh rounds to exactly +-1 for |z| > ~19; cap the score just inside
# the open interval so voters keep the documented strict range.
_SCORE_CAP = 1.0 - 1e-12


def forward_batch(spec: NetworkSpec, w, X) -> np.ndarray:
    """Scores in (-1, 1) for a batch of flat inputs. Pure and deterministic."""
    w = _check_weights(spec, w)
    X, single = _check_inputs(spec, X)
    if spec.is_dense_chain():
        scores, _ = backend.kernels().fwd(w, spec.dense_dims(), X, spec.leaky_slope)
        if not np.isfinite(scores).all():
            _generic_forward(spec, w, X, record=False)  # raises with layer index
            raise NumericError("non-finite score")
    else:
        scores, _, _ = _generic_forward(spec, w, X, record=False)
    scores = np.clip(scores, -_SCORE_CAP, _SCORE_CAP)
    return scores[0] if single else scores


def forward(spec: NetworkSpec, w, x) -> float:
    return float(forward_batch(spec, w, x))


def score_and_grads(spec, w, X, dscore, need_wgrad=True, need_xgrad=True):
    """Evaluate the batch and backpropagate per-example score gradients.

    dscore is either an array (B,) or a callable scores -> (B,); weight
    gradients are summed over the batch, so any averaging factor belongs in
    dscore.  Returns (scores, gw or None, gX or None).
    """
    w = _check_weights(spec, w)
    X, single = _check_inputs(spec, X)
    if spec.is_dense_chain():
        kern = backend.kernels()
        dims = spec.dense_dims()
        scores, hidden = kern.fwd(w, dims, X, spec.leaky_slope)
        if not np.isfinite(scores).all():
            _generic_forward(spec, w, X, record=False)
            raise NumericError("non-finite score")
        scores = np.clip(scores, -_SCORE_CAP, _SCORE_CAP)
        ds = np.asarray(dscore(scores) if callable(dscore) else dscore, dtype=np.float64)
        if ds.shape != scores.shape:
            raise ShapeError("dscore shape mismatch")
        gw, gX = kern.bwd(w, dims, X, hidden, scores, ds, spec.leaky_slope,
                          need_wgrad, need_xgrad)
    else:
        scores, trace, params = _generic_forward(spec, w, X, record=True)
        scores = np.clip(scores, -_SCORE_CAP, _SCORE_CAP)
        ds = np.asarray(dscore(scores) if callable(dscore) else dscore, dtype=np.float64)
        if ds.shape != scores.shape:
            raise ShapeError("dscore shape mismatch")
        gw, gX = _generic_backward(spec, params, trace, scores, ds,
                                   need_wgrad, need_xgrad)
    if need_wgrad and not np.isfinite(gw).all():
        raise NumericError("non-finite weight gradient")
    if need_xgrad and not np.isfinite(gX).all():
        raise NumericError("non-finite input gradient")
    if single:
        return scores[0], gw, (gX[0] if gX is not None else None)
    return scores, gw, gX


def linear_loss(score, y):
    """Linear surrogate loss (1 - y*score)/2 and its score derivative."""
    return 0.5 * (1.0 - y * score), -0.5 * y


def grad(spec, w, x, y, loss="linear"):
    """Exact reverse-mode gradients of the scalar loss w.r.t. weights and input.

    loss is "linear" or a callable (score, y) -> (value, dvalue/dscore).
    """
    if y not in (-1, 1):
        raise ContractError("label must be -1 or +1")
    fn = linear_loss if loss == "linear" else loss

    def ds(scores):
        return np.asarray([fn(s, y)[1] for s in scores])

    _, gw, gx = score_and_grads(spec, w, x, ds)
    return gw, gx


# ---------------------------------------------------------------------------
# Weight checkpoints: magic | sha256(spec) | n | float64 little-endian data.

WEIGHT_MAGIC = b"PBWT0001"


def dump_weights(spec: NetworkSpec, w) -> bytes:
    w = _check_weights(spec, w)
    payload = np.ascontiguousarray(w, dtype="<f8").tobytes()
    return WEIGHT_MAGIC + spec.spec_hash() + struct.pack("<Q", w.shape[0]) + payload


def parse_weights(spec: NetworkSpec, blob: bytes) -> np.ndarray:
    if blob[:8] != WEIGHT_MAGIC:
        raise ContractError("bad weight checkpoint magic")
    if blob[8:40] != spec.spec_hash():
        raise ContractError("checkpoint was written for a different network spec")
    (n,) = struct.unpack("<Q", blob[40:48])
    if n != spec.n_params:
        raise ContractError(f"checkpoint length {n} != spec parameter count {spec.n_params}")
    w = np.frombuffer(blob[48:], dtype="<f8")
    if w.shape[0] != n:
        raise ContractError("truncated weight checkpoint payload")
    return w.astype(np.float64)


def save_weights(path, spec, w):
    with open(path, "wb") as fh:
        fh.write(dump_weights(spec, w))


def load_weights(path, spec) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_weights(spec, fh.read())
