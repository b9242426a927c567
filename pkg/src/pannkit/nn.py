"""Small dense/conv network engine with hand-written reverse-mode gradients.

Everything runs in float64 on numpy arrays. Networks are immutable snapshots:
an optimizer step returns a new network and never touches the parameters of
the old one, so references held elsewhere (checkpoints, sweeps) stay valid.

The activation slot is pluggable: a mode object only has to provide
``apply(z)`` and ``grad(z)``. The exact ReLU lives here; polynomial and
fixed-point modes are defined next to the code that builds them.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import derive_rng

DTYPE = np.float64

LOSS_KINDS = ("cross_entropy", "mse")


class ShapeError(ValueError):
    """Input incompatible with a layer. Carries the offending layer index."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class NonFiniteLossError(FloatingPointError):
    """Loss evaluated to NaN or infinity."""


# ---------------------------------------------------------------------------
# activation modes


class ExactReLU:
    """max(z, 0) with subgradient 0 at z = 0."""

    name = "exact_relu"

    def apply(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return (z > 0).astype(DTYPE)

    def descriptor(self) -> dict:
        return {"kind": "exact_relu"}

    def __repr__(self):
        return "ExactReLU()"


# Registry for reconstructing activation modes from checkpoint descriptors.
# Other modules register their modes on import.
MODE_REGISTRY: dict[str, object] = {}


def register_mode(kind: str, from_descriptor) -> None:
    MODE_REGISTRY[kind] = from_descriptor


register_mode("exact_relu", lambda d: ExactReLU())


def mode_from_descriptor(desc: dict):
    kind = desc.get("kind")
    if kind not in MODE_REGISTRY:
        raise ValueError(f"unknown activation mode kind: {kind!r}")
    return MODE_REGISTRY[kind](desc)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    """Affine map y = x W^T + b with W of shape [out, in]."""

    W: np.ndarray
    b: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise ValueError(
                f"dense expects [N, {self.W.shape[1]}], got {x.shape}")
        return x @ self.W.T + self.b

    def backward(self, x: np.ndarray, gy: np.ndarray):
        gx = gy @ self.W
        return gx, {"W": gy.T @ x, "b": gy.sum(axis=0)}

    def params(self) -> dict:
        return {"W": self.W, "b": self.b}

    def with_params(self, p: dict) -> "Dense":
        return Dense(W=p["W"], b=p["b"])


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # odd kernels only; checked at construction
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N, C, H, W] -> [N, C*kh*kw, OH*OW] patch matrix (copy)."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2, s3), writeable=False)
    return windows.reshape(n, c * kh * kw, oh * ow)


@dataclass(frozen=True)
class Conv2d:
    """2-D convolution, stride 1, kernel of shape [F, C, kh, kw]."""

    kernel: np.ndarray
    b: np.ndarray
    padding: str = "valid"  # "valid" | "same"

    def __post_init__(self):
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")
        kh, kw = self.kernel.shape[2:]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("same padding requires odd kernel sizes")

    def forward(self, x: np.ndarray) -> np.ndarray:
        f, c, kh, kw = self.kernel.shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ValueError(f"conv expects [N, {c}, H, W], got {x.shape}")
        if self.padding == "same":
            x = _pad_same(x, kh, kw)
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ValueError(f"input {x.shape} smaller than kernel {kh}x{kw}")
        cols = _im2col(x, kh, kw)
        out = self.kernel.reshape(f, -1) @ cols  # [N, F, OH*OW]
        oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
        return out.reshape(x.shape[0], f, oh, ow) + self.b[None, :, None, None]

    def backward(self, x: np.ndarray, gy: np.ndarray):
        f, c, kh, kw = self.kernel.shape
        xp = _pad_same(x, kh, kw) if self.padding == "same" else x
        n = x.shape[0]
        oh, ow = gy.shape[2], gy.shape[3]
        cols = _im2col(xp, kh, kw)
        gyf = gy.reshape(n, f, oh * ow)
        gk = np.einsum("nfl,nkl->fk", gyf, cols).reshape(self.kernel.shape)
        gb = gy.sum(axis=(0, 2, 3))
        gcols = self.kernel.reshape(f, -1).T @ gyf  # [N, C*kh*kw, OH*OW]
        gcols = gcols.reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
        if self.padding == "same":
            ph, pw = (kh - 1) // 2, (kw - 1) // 2
            gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        else:
            gx = gxp
        return gx, {"kernel": gk, "b": gb}

    def params(self) -> dict:
        return {"kernel": self.kernel, "b": self.b}

    def with_params(self, p: dict) -> "Conv2d":
        return Conv2d(kernel=p["kernel"], b=p["b"], padding=self.padding)


@dataclass(frozen=True)
class AvgPool:
    """Non-overlapping average pooling with square window."""

    size: int

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.size
        if x.ndim != 4:
            raise ValueError(f"avgpool expects [N, C, H, W], got {x.shape}")
        n, c, h, w = x.shape
        if h % p or w % p:
            raise ValueError(f"avgpool {p} does not divide spatial dims {h}x{w}")
        return x.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5))

    def backward(self, x: np.ndarray, gy: np.ndarray):
        p = self.size
        gx = np.repeat(np.repeat(gy, p, axis=2), p, axis=3) / (p * p)
        return gx, {}

    def params(self) -> dict:
        return {}

    def with_params(self, p: dict) -> "AvgPool":
        return self


@dataclass(frozen=True)
class Flatten:
    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[0], -1)

    def backward(self, x: np.ndarray, gy: np.ndarray):
        return gy.reshape(x.shape), {}

    def params(self) -> dict:
        return {}

    def with_params(self, p: dict) -> "Flatten":
        return self


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity slot; the mode is swappable after training."""

    mode: object = field(default_factory=ExactReLU)

    def forward(self, z: np.ndarray) -> np.ndarray:
        return self.mode.apply(z)

    def backward(self, z: np.ndarray, gy: np.ndarray):
        return gy * self.mode.grad(z), {}

    def params(self) -> dict:
        return {}

    def with_params(self, p: dict) -> "Activation":
        return self


LAYER_KINDS = {Dense: "dense", Conv2d: "conv2d", AvgPool: "avgpool",
               Flatten: "flatten", Activation: "activation"}


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class Network:
    """Layer pipeline plus input/output metadata."""

    layers: tuple
    input_shape: tuple  # per-sample shape, no batch dim
    n_classes: int

    def activation_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers)
                if isinstance(l, Activation)]

    def replace_layer(self, index: int, layer) -> "Network":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


def _run_layers(net: Network, x: np.ndarray, act_hook=None):
    """Forward pass keeping per-layer input caches for backprop.

    ``act_hook(slot_index, z) -> (delta, ddelta_dz) | (None, None)`` adds a
    training-time adjustment to the activation output: the slot computes
    ``mode.apply(z) + delta`` and the backward pass adds ``gy * ddelta_dz``
    to the chain through the slot.
    """
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(-1, f"input {x.shape[1:]} != expected {tuple(net.input_shape)}")
    caches: list[np.ndarray] = []
    adjust: dict[int, np.ndarray] = {}
    trace: list[np.ndarray] = []
    h = np.asarray(x, dtype=DTYPE)
    for i, layer in enumerate(net.layers):
        delta = None
        if isinstance(layer, Activation):
            trace.append(h)
            if act_hook is not None:
                delta, dd = act_hook(i, h)
        caches.append(h)
        try:
            h = layer.forward(h)
        except ValueError as exc:
            raise ShapeError(i, str(exc)) from exc
        if delta is not None:
            h = h + delta
            adjust[i] = dd
    return h, caches, adjust, trace


def forward(net: Network, x: np.ndarray):
    """Evaluate the network.

    Returns ``(logits, trace)`` where trace lists the pre-activation tensor
    entering each activation slot, in layer order. Pure: repeated calls give
    identical results.
    """
    logits, _, _, trace = _run_layers(net, x)
    return logits, trace


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(net, x)
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# losses


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((y.shape[0], k), dtype=DTYPE)
    out[np.arange(y.shape[0]), y.astype(int)] = 1.0
    return out


def loss_and_logit_grad(logits: np.ndarray, target: np.ndarray, kind: str):
    """Scalar loss plus dL/dlogits. Targets: int labels or rows of weights."""
    n = logits.shape[0]
    if kind == "cross_entropy":
        t = target if target.ndim == 2 else _one_hot(target, logits.shape[1])
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        logp = z - logsum
        loss = float(-(t * logp).sum(axis=1).mean())
        g = (np.exp(logp) - t) / n
    elif kind == "mse":
        t = target if target.ndim == 2 else _one_hot(target, logits.shape[1])
        diff = logits - t
        loss = float((diff ** 2).sum(axis=1).mean())
        g = 2.0 * diff / n
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected {LOSS_KINDS}")
    return loss, g


def _backprop(net: Network, x: np.ndarray, target: np.ndarray, kind: str,
              act_hook=None):
    logits, caches, adjust, _ = _run_layers(net, x, act_hook)
    loss, g = loss_and_logit_grad(logits, target, kind)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss!r}")
    grads: list[dict] = [{} for _ in net.layers]
    for i in range(len(net.layers) - 1, -1, -1):
        gy = g
        g, pg = net.layers[i].backward(caches[i], g)
        if i in adjust:
            g = g + gy * adjust[i]
        grads[i] = pg
    return grads, g, loss, logits


def backward(net: Network, x: np.ndarray, target: np.ndarray,
             loss_kind: str = "cross_entropy", act_hook=None):
    """Gradients of the batch loss for every parameter.

    Returns ``(grads, loss)``; grads is a per-layer list of dicts whose
    entries match the layer's parameter shapes exactly.
    """
    grads, _, loss, _ = _backprop(net, x, target, loss_kind, act_hook)
    return grads, loss


def input_gradient(net: Network, x: np.ndarray, target: np.ndarray,
                   loss_kind: str = "cross_entropy"):
    """dL/dx, same shape as x. Used by gradient-guided input perturbation."""
    _, gx, loss, _ = _backprop(net, x, target, loss_kind)
    return gx, loss


# ---------------------------------------------------------------------------
# SGD with momentum and coupled L2 weight decay


@dataclass
class SgdState:
    """Optimizer hyperparameters plus velocity buffers.

    The step is the classic coupled form

        v <- momentum * v + (grad + weight_decay * W)
        W <- W - lr_t * v

    Decay enters through the gradient, so each step subtracts
    lr_t * weight_decay * W. That is the update induced by augmenting the
    batch loss with (lambda / (2 eta)) * ||W||^2 where lambda =
    lr_t * weight_decay; the per-step objective form and the coupled L2 form
    describe the same arithmetic. Decay applies to every parameter tensor,
    biases included.
    """

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    milestones: tuple = ()
    gamma: float = 0.1
    epoch: int = 0
    velocities: dict = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma ** k

    def fresh(self) -> "SgdState":
        return SgdState(lr=self.lr, momentum=self.momentum,
                        weight_decay=self.weight_decay,
                        milestones=tuple(self.milestones), gamma=self.gamma)


def sgd_step(net: Network, grads: list, state: SgdState) -> Network:
    """One optimizer step; returns a new network, old arrays untouched."""
    eta = state.lr_at(state.epoch)
    layers = list(net.layers)
    for i, layer in enumerate(layers):
        pg = grads[i]
        if not pg:
            continue
        params = layer.params()
        new_params = {}
        for name, w in params.items():
            g = pg[name] + state.weight_decay * w
            key = (i, name)
            v = state.velocities.get(key)
            v = g if v is None else state.momentum * v + g
            state.velocities[key] = v
            new_params[name] = w - eta * v
        layers[i] = layer.with_params(new_params)
    return replace(net, layers=tuple(layers))


# ---------------------------------------------------------------------------
# builders


def build_mlp(input_shape, hidden, n_classes, seed=0) -> Network:
    """Fully connected ReLU net; flattens multi-axis inputs first."""
    rng = derive_rng(seed, "init")
    input_shape = tuple(int(s) for s in (
        input_shape if hasattr(input_shape, "__len__") else (input_shape,)))
    layers: list = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    fan_in = int(np.prod(input_shape))
    for h in hidden:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(h, fan_in))
        layers.append(Dense(W=w, b=np.zeros(h, dtype=DTYPE)))
        layers.append(Activation(ExactReLU()))
        fan_in = h
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(n_classes, fan_in))
    layers.append(Dense(W=w, b=np.zeros(n_classes, dtype=DTYPE)))
    return Network(tuple(layers), input_shape, n_classes)


def build_arch(arch: str, input_shape, n_classes, seed: int = 0) -> Network:
    """Build from a compact string: 'mlp:256,256' or 'cnn:6,12' or
    'cnn:6,12+32' (conv channels + dense hidden widths)."""
    kind, _, rest = arch.partition(":")
    try:
        if kind == "mlp":
            hidden = tuple(int(s) for s in rest.split(",") if s)
            return build_mlp(input_shape, hidden, n_classes, seed)
        if kind == "cnn":
            conv, _, dense = rest.partition("+")
            channels = tuple(int(s) for s in conv.split(",") if s)
            dense_hidden = tuple(int(s) for s in dense.split(",") if s)
            return build_cnn(input_shape, channels, n_classes, seed,
                             dense_hidden=dense_hidden)
    except ValueError as exc:
        raise ValueError(f"bad architecture string {arch!r}: {exc}") from exc
    raise ValueError(f"unknown architecture kind {kind!r} in {arch!r}")


def build_cnn(input_shape, conv_channels, n_classes, seed=0,
              kernel=5, pool=2, dense_hidden=()) -> Network:
    """Conv/ReLU/AvgPool stack followed by dense layers."""
    rng = derive_rng(seed, "init")
    c, h, w = (int(s) for s in input_shape)
    layers: list = []
    for f in conv_channels:
        fan_in = c * kernel * kernel
        k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c, kernel, kernel))
        layers.append(Conv2d(kernel=k, b=np.zeros(f, dtype=DTYPE)))
        layers.append(Activation(ExactReLU()))
        layers.append(AvgPool(pool))
        c, h, w = f, (h - kernel + 1) // pool, (w - kernel + 1) // pool
        if h <= 0 or w <= 0:
            raise ValueError("input too small for the conv stack")
    layers.append(Flatten())
    fan_in = c * h * w
    for units in dense_hidden:
        wd = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(units, fan_in))
        layers.append(Dense(W=wd, b=np.zeros(units, dtype=DTYPE)))
        layers.append(Activation(ExactReLU()))
        fan_in = units
    wd = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(n_classes, fan_in))
    layers.append(Dense(W=wd, b=np.zeros(n_classes, dtype=DTYPE)))
    return Network(tuple(layers), tuple(int(s) for s in input_shape), n_classes)


# ---------------------------------------------------------------------------
# checkpoints: JSON container, raw little-endian float64 payloads


CHECKPOINT_VERSION = 1


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=DTYPE)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode()}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(DTYPE)
    expected = int(np.prod(d["shape"])) if d["shape"] else 1
    if a.size != expected:
        raise ValueError(
            f"tensor payload holds {a.size} values, shape {d['shape']} "
            f"needs {expected}")
    return a.reshape(d["shape"])


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        kind = LAYER_KINDS[type(layer)]
        entry: dict = {"kind": kind}
        if isinstance(layer, Dense):
            entry["W"], entry["b"] = _enc(layer.W), _enc(layer.b)
        elif isinstance(layer, Conv2d):
            entry["kernel"], entry["b"] = _enc(layer.kernel), _enc(layer.b)
            entry["padding"] = layer.padding
        elif isinstance(layer, AvgPool):
            entry["size"] = layer.size
        elif isinstance(layer, Activation):
            entry["mode"] = layer.mode.descriptor()
        layers.append(entry)
    return {"format": "pannkit-checkpoint", "version": CHECKPOINT_VERSION,
            "input_shape": list(net.input_shape), "n_classes": net.n_classes,
            "layers": layers}


def network_from_dict(doc: dict) -> Network:
    if doc.get("format") != "pannkit-checkpoint":
        raise ValueError("not a pannkit checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    layers: list = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            layers.append(Dense(W=_dec(entry["W"]), b=_dec(entry["b"])))
        elif kind == "conv2d":
            layers.append(Conv2d(kernel=_dec(entry["kernel"]),
                                 b=_dec(entry["b"]),
                                 padding=entry.get("padding", "valid")))
        elif kind == "avgpool":
            layers.append(AvgPool(entry["size"]))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "activation":
            layers.append(Activation(mode_from_descriptor(entry["mode"])))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(tuple(layers), tuple(doc["input_shape"]), doc["n_classes"])


def save_checkpoint(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)


def load_checkpoint(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))
