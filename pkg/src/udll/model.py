"""Convolutional autoencoder with a self-expressive layer.

Encoder layers are stride-2 "same" convolutions followed by ReLU. The decoder
mirrors them with transposed convolutions; every decoder layer except the last
is followed by ReLU, and the output layer is linear.

Latent features are kept as a matrix ``Z`` of shape ``(d, n)``: one column per
sample, where a column is the sample's final feature map ``[h, w, c]``
flattened in C order (channel index fastest).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .exceptions import DataFormatError, DivergenceError, ShapeError
from .tensorcore import (
    AdamState,
    Parameter,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    conv2d_transpose_backward,
    conv2d_transpose_forward,
    frobenius_sq,
    glorot_uniform,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NetworkConfig",
    "HyperParams",
    "LossTerms",
    "ModelState",
    "BENCHMARK_CONFIGS",
    "init_state",
    "attach_self_expressive",
    "encode",
    "decode",
    "self_express",
    "locality_loss",
    "total_loss",
    "pretrain",
    "finetune",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"UDLL-CKPT"
CKPT_VERSION = 1

RUN_METADATA = {
    "decoder_output_activation": "linear",
    "self_expression_term": "alpha * ||Z - ZW||_F^2",
    "padding": "same",
    "init": "glorot_uniform(kernels), zeros(bias), uniform(-1e-4, 1e-4)(W)",
}


@dataclass(frozen=True)
class NetworkConfig:
    """Encoder architecture; the decoder is its mirror image.

    ``layers`` lists ``(channels, kernel_size)`` from the input side.
    """

    layers: tuple[tuple[int, int], ...]
    input_shape: tuple[int, int, int] = (32, 32, 1)
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(c), int(s)) for c, s in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for c, s in self.layers:
            if c < 1 or s < 1 or s % 2 == 0:
                raise ValueError(f"invalid layer (channels={c}, kernel={s}); kernel sizes must be odd")
        if len(self.input_shape) != 3 or self.input_shape[2] != 1:
            raise ValueError(f"input_shape must be (h, w, 1), got {self.input_shape}")
        if self.stride != 2:
            raise ValueError("stride is fixed at 2")

    @property
    def channels(self):
        return [self.input_shape[2]] + [c for c, _ in self.layers]

    def feature_shapes(self):
        """Spatial shapes ``(h, w, c)`` of the input and of every encoder output."""
        h, w, c = self.input_shape
        shapes = [(h, w, c)]
        for ch, _ in self.layers:
            h, w = -(-h // self.stride), -(-w // self.stride)
            shapes.append((h, w, ch))
        return shapes

    @property
    def latent_dim(self):
        h, w, c = self.feature_shapes()[-1]
        return h * w * c

    def to_dict(self):
        return {"layers": [list(l) for l in self.layers], "input_shape": list(self.input_shape), "stride": self.stride}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(l) for l in d["layers"]), tuple(d["input_shape"]), d.get("stride", 2))


# Reference architectures and fine-tuning settings for the four benchmarks.
BENCHMARK_CONFIGS = {
    "coil20": dict(config=NetworkConfig(((15, 3),), (32, 32, 1)), n=1440, alpha=1000.0, beta=1.0, gamma=19.0, k=3, epochs=68),
    "coil100": dict(config=NetworkConfig(((50, 5),), (32, 32, 1)), n=7200, alpha=15.0, beta=1.0, gamma=280.0, k=5, epochs=140),
    "orl": dict(config=NetworkConfig(((5, 5), (3, 3), (3, 3)), (32, 32, 1)), n=400, alpha=5.0, beta=1.0, gamma=8.0, k=3, epochs=1550),
    "yale": dict(config=NetworkConfig(((10, 5), (20, 3), (30, 3)), (42, 42, 1)), n=2432, alpha=3.2, beta=1.0, gamma=0.01, k=10, epochs=1600),
}


@dataclass
class HyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    k: int = 3
    epochs_pretrain: int = 200
    epochs_finetune: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    zero_diagonal: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class LossTerms:
    """Weighted loss terms; ``total`` is their sum."""

    reconstruction: float
    affinity: float = 0.0
    regularizer: float = 0.0
    locality: float = 0.0

    @property
    def total(self):
        return self.reconstruction + self.affinity + self.regularizer + self.locality

    def as_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, Parameter]
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    epoch: int = 0
    history: list[LossTerms] = field(default_factory=list)
    seed: int = 0

    @property
    def W(self):
        p = self.params.get("W")
        return None if p is None else p.value

    @property
    def n_samples(self):
        W = self.W
        return 0 if W is None else W.shape[0]

    def n_parameters(self):
        return sum(p.value.size for p in self.params.values())

    def copy(self):
        params = {k: Parameter(p.value.copy(), p.name) for k, p in self.params.items()}
        opts = {
            k: AdamState(o.first_moment.copy(), o.second_moment.copy(), o.step_count, o.learning_rate, o.beta1, o.beta2, o.epsilon)
            for k, o in self.optimizers.items()
        }
        return ModelState(self.config, params, opts, self.epoch, list(self.history), self.seed)


def init_state(config: NetworkConfig, seed=0) -> ModelState:
    """Glorot-uniform kernels and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    chans = config.channels
    params = {}
    for i, (c, s) in enumerate(config.layers):
        cin = chans[i]
        name = f"enc{i}"
        params[f"{name}.kernel"] = Parameter(glorot_uniform((s, s, cin, c), s * s * cin, s * s * c, rng), f"{name}.kernel")
        params[f"{name}.bias"] = Parameter(np.zeros(c), f"{name}.bias")
    for i in reversed(range(len(config.layers))):
        c, s = config.layers[i]
        cout = chans[i]
        name = f"dec{i}"
        params[f"{name}.kernel"] = Parameter(glorot_uniform((s, s, cout, c), s * s * c, s * s * cout, rng), f"{name}.kernel")
        params[f"{name}.bias"] = Parameter(np.zeros(cout), f"{name}.bias")
    return ModelState(config, params, seed=seed)


def attach_self_expressive(state: ModelState, n: int, seed=None, reset_optimizer=True, init="noise") -> ModelState:
    """Return a copy of ``state`` with an ``n x n`` self-expressive matrix added.

    ``init="noise"`` draws ``W`` from ``uniform(-1e-4, 1e-4)``; ``"identity"``
    starts from ``I``.
    """
    out = state.copy()
    seed = state.seed if seed is None else seed
    if init == "noise":
        rng = np.random.default_rng([seed, 1])
        W = rng.uniform(-1e-4, 1e-4, size=(n, n))
    elif init == "identity":
        W = np.eye(n)
    else:
        raise ValueError(f"unknown W init {init!r}")
    out.params["W"] = Parameter(W, "W")
    out.epoch = 0
    out.history = []
    if reset_optimizer:
        out.optimizers = {}
    return out


def _as_images(X, config):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or tuple(X.shape[1:]) != config.input_shape:
        raise ShapeError(f"input batch shape {X.shape} does not match network input {config.input_shape}")
    return X


def _encoder_forward(X, state):
    cfg = state.config
    acts, pres = [X], []
    h = X
    for i in range(len(cfg.layers)):
        pre = conv2d_forward(h, state.params[f"enc{i}.kernel"].value, state.params[f"enc{i}.bias"].value, cfg.stride)
        h = relu(pre)
        pres.append(pre)
        acts.append(h)
    Z = h.reshape(h.shape[0], -1).T
    return Z, acts, pres


def _decoder_forward(Zhat, state):
    cfg = state.config
    shapes = cfg.feature_shapes()
    n = Zhat.shape[1]
    if Zhat.shape[0] != cfg.latent_dim:
        raise ShapeError(f"latent length {Zhat.shape[0]} != network latent dim {cfg.latent_dim}")
    g = np.ascontiguousarray(Zhat.T).reshape((n,) + shapes[-1])
    ins, pres = {}, {}
    for i in reversed(range(len(cfg.layers))):
        ins[i] = g
        pre = conv2d_transpose_forward(
            g, state.params[f"dec{i}.kernel"].value, state.params[f"dec{i}.bias"].value, cfg.stride, output_hw=shapes[i][:2]
        )
        pres[i] = pre
        g = relu(pre) if i > 0 else pre
    return g, ins, pres


def encode(X, state: ModelState):
    """Latent matrix ``Z`` of shape ``(latent_dim, n)``."""
    return _encoder_forward(_as_images(X, state.config), state)[0]


def decode(Zhat, state: ModelState):
    """Reconstruct an image batch ``[n, h, w, 1]`` from latent columns."""
    return _decoder_forward(np.asarray(Zhat, dtype=np.float64), state)[0]


def self_express(Z, W):
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] != Z.shape[1]:
        raise ShapeError(f"W of shape {W.shape} cannot self-express {Z.shape[1]} samples")
    return Z @ W


def _edge_arrays(A):
    A = sparse.coo_matrix(A)
    keep = A.data != 0
    return A.row[keep], A.col[keep], A.data[keep]


def locality_loss(Z, A):
    """``sum_ij a_ij ||z_i - z_j||^2`` and its gradient w.r.t. ``Z``.

    ``A`` may be a :class:`~udll.priorgraph.PriorGraph`, a sparse matrix or a
    dense array with ``A[i, j] = a_ij``.
    """
    A = getattr(A, "matrix", A)
    n = Z.shape[1]
    if A.shape != (n, n):
        raise ShapeError(f"graph of size {A.shape} does not match {n} latent columns")
    rows, cols, a = _edge_arrays(A)
    diff = Z[:, rows] - Z[:, cols]
    loss = float(np.dot(a, np.einsum("ij,ij->j", diff, diff)))
    incidence = sparse.csr_matrix(
        (np.concatenate([a, -a]), (np.tile(np.arange(a.size), 2), np.concatenate([rows, cols]))), shape=(a.size, n)
    )
    grad = 2.0 * np.asarray(incidence.T @ diff.T).T
    return loss, grad


def _forward_backward(X, state: ModelState, A=None, hyper: HyperParams | None = None, need_grad=True):
    cfg = state.config
    X = _as_images(X, cfg)
    W = state.W
    Z, acts, epres = _encoder_forward(X, state)
    Zhat = Z if W is None else self_express(Z, W)
    Xhat, dins, dpres = _decoder_forward(Zhat, state)

    resid = Xhat - X
    terms = LossTerms(0.5 * frobenius_sq(resid))
    dZ = np.zeros_like(Z)
    dW = None
    if W is not None:
        R = Z - Zhat
        terms.affinity = hyper.alpha * frobenius_sq(R)
        terms.regularizer = hyper.beta * frobenius_sq(W)
        if need_grad:
            dZ += 2.0 * hyper.alpha * (R - R @ W.T)
            dW = -2.0 * hyper.alpha * (Z.T @ R) + 2.0 * hyper.beta * W
    if A is not None and hyper is not None and hyper.gamma != 0:
        loc, dloc = locality_loss(Z, A)
        terms.locality = hyper.gamma * loc
        dZ += hyper.gamma * dloc

    for name, value in terms.as_dict().items():
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite {name} loss term")
    if not need_grad:
        return terms

    for p in state.params.values():
        p.zero_grad()
    g = resid
    for i in range(len(cfg.layers)):
        if i > 0:
            g = relu_backward(g, dpres[i])
        g, gk, gb = conv2d_transpose_backward(g, dins[i], state.params[f"dec{i}.kernel"].value, cfg.stride)
        state.params[f"dec{i}.kernel"].grad += gk
        state.params[f"dec{i}.bias"].grad += gb
    dZhat = g.reshape(g.shape[0], -1).T
    if W is None:
        dZ += dZhat
    else:
        dZ += dZhat @ W.T
        dW += Z.T @ dZhat
        if hyper.zero_diagonal:
            np.fill_diagonal(dW, 0.0)
        state.params["W"].grad += dW

    g = np.ascontiguousarray(dZ.T).reshape(acts[-1].shape)
    for i in reversed(range(len(cfg.layers))):
        g = relu_backward(g, epres[i])
        g, gk, gb = conv2d_backward(g, acts[i], state.params[f"enc{i}.kernel"].value, cfg.stride)
        state.params[f"enc{i}.kernel"].grad += gk
        state.params[f"enc{i}.bias"].grad += gb
    return terms


def total_loss(X, state: ModelState, A, hyper: HyperParams, need_grad=False):
    """Reconstruction + self-expression + ``||W||^2`` + locality.

    Returns a :class:`LossTerms`. With ``need_grad=True`` the gradient of the
    total is also written into every ``Parameter.grad`` of ``state``.
    """
    return _forward_backward(X, state, A, hyper, need_grad=need_grad)


def _train(X, state, A, hyper, epochs, stage, trainable=None):
    names = [n for n in state.params if trainable is None or n in trainable]
    for name in names:
        if name not in state.optimizers:
            state.optimizers[name] = AdamState.for_parameter(state.params[name], hyper.learning_rate)
    for _ in range(epochs):
        last = state.history[-1] if state.history else None
        try:
            terms = _forward_backward(X, state, A, hyper)
            for name in names:
                adam_step(state.params[name], state.optimizers[name])
        except DivergenceError as exc:
            raise DivergenceError(
                f"{stage} diverged at epoch {state.epoch + 1}: {exc}", epoch=state.epoch + 1,
                last_terms=None if last is None else last.as_dict(),
            ) from exc
        if hyper.zero_diagonal and "W" in state.params:
            np.fill_diagonal(state.params["W"].value, 0.0)
        state.epoch += 1
        state.history.append(terms)
        logger.debug("%s epoch %d: %s", stage, state.epoch, terms.as_dict())
    return state


def pretrain(X, config: NetworkConfig, hyper: HyperParams, state: ModelState | None = None) -> ModelState:
    """Full-batch Adam on the reconstruction loss ``0.5 ||X - X_hat||_F^2``."""
    if state is None:
        state = init_state(config, hyper.seed)
    X = _as_images(X, config)
    return _train(X, state, None, hyper, hyper.epochs_pretrain, "pretrain")


def finetune(X, A, state: ModelState, hyper: HyperParams, train_w=True) -> ModelState:
    """Full-batch Adam on the overall loss with the prior graph ``A`` held fixed.

    ``state`` must already carry ``W`` (see :func:`attach_self_expressive`).
    It is updated in place and returned.
    """
    if state.W is None:
        raise ValueError("state has no self-expressive layer; call attach_self_expressive first")
    X = _as_images(X, state.config)
    n = X.shape[0]
    if state.W.shape != (n, n):
        raise ShapeError(f"W is {state.W.shape} but the dataset has {n} samples")
    graph_n = getattr(A, "n", None) or A.shape[0]
    if graph_n != n:
        raise ShapeError(f"prior graph has {graph_n} nodes but the dataset has {n} samples")
    if hyper.zero_diagonal:
        np.fill_diagonal(state.params["W"].value, 0.0)
    trainable = None if train_w else [k for k in state.params if k != "W"]
    return _train(X, state, A, hyper, hyper.epochs_finetune, "finetune", trainable)


def parameter_count(config: NetworkConfig, n: int) -> int:
    """``sum_i 2 c_i (s_i^2 c_{i-1} + 1) - c_1 + 1 + n^2`` with ``c_0 = 1``."""
    chans = config.channels
    total = 0
    for i, (c, s) in enumerate(config.layers, start=1):
        total += 2 * c * (s * s * chans[i - 1] + 1)
    return total - config.layers[0][0] + 1 + n * n


def _write_u32(fh, *values):
    fh.write(struct.pack(f"<{len(values)}I", *values))


def _read(fh, fmt, what):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise DataFormatError(f"checkpoint truncated while reading {what}")
    return struct.unpack(fmt, buf)


def save_checkpoint(state: ModelState, path, extra=None):
    """Binary checkpoint: magic, version, JSON config echo, seed, epoch, then tensors.

    Tensors are written in declaration order as little-endian float64, each
    preceded by its name and shape.
    """
    echo = {
        "network": state.config.to_dict(),
        "n_samples": state.n_samples,
        "parameters": list(state.params),
        "metadata": RUN_METADATA,
    }
    if extra:
        echo["extra"] = extra
    blob = json.dumps(echo, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        _write_u32(fh, CKPT_VERSION, len(blob))
        fh.write(blob)
        fh.write(struct.pack("<Q", state.seed))
        _write_u32(fh, state.epoch, len(state.params))
        for name, p in state.params.items():
            raw = name.encode()
            _write_u32(fh, len(raw))
            fh.write(raw)
            _write_u32(fh, p.value.ndim, *p.value.shape)
            fh.write(p.value.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(state, echo)`` where ``echo`` is the decoded config JSON."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a UDLL checkpoint (bad magic)")
        version, blob_len = _read(fh, "<2I", "header")
        if version != CKPT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise DataFormatError(f"{path}: checkpoint truncated in config echo")
        echo = json.loads(blob)
        (seed,) = _read(fh, "<Q", "seed")
        epoch, count = _read(fh, "<2I", "epoch")
        params = {}
        for _ in range(count):
            (name_len,) = _read(fh, "<I", "tensor name")
            name = fh.read(name_len).decode()
            (ndim,) = _read(fh, "<I", f"{name} rank")
            shape = _read(fh, f"<{ndim}I", f"{name} shape")
            size = int(np.prod(shape)) * 8
            raw = fh.read(size)
            if len(raw) != size:
                raise DataFormatError(f"{path}: tensor {name} truncated: expected {size} bytes, got {len(raw)}")
            params[name] = Parameter(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64), name)
    state = ModelState(NetworkConfig.from_dict(echo["network"]), params, epoch=epoch, seed=seed)
    return state, echo
