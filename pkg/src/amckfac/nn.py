"""Fixed-topology CNN: 3x3 conv (4 ch) -> ReLU -> 2x2 avg-pool -> FC(36 -> 4).

Forward and backward are written out by hand in numpy. The forward pass
records a tape holding everything the curvature factors need (conv patches,
pooled features) and backward returns per-sample pre-activation gradients
next to the mean-over-batch parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

IMAGE_SIZE = 8
KERNEL = 3
CHANNELS = 4
CLASSES = 4
CONV_OUT = IMAGE_SIZE - KERNEL + 1          # 6
POOL_OUT = CONV_OUT // 2                    # 3
POSITIONS = CONV_OUT * CONV_OUT             # 36 conv output positions
PATCH = KERNEL * KERNEL                     # 9
FEATURES = CHANNELS * POOL_OUT * POOL_OUT   # 36

PARAM_SHAPES = {
    "conv_w": (CHANNELS, PATCH),
    "conv_b": (CHANNELS,),
    "fc_w": (CLASSES, FEATURES),
    "fc_b": (CLASSES,),
}
PARAM_NAMES = tuple(PARAM_SHAPES)


@dataclass
class Model:
    params: dict
    version: int = 0

    def __post_init__(self):
        for name, shape in PARAM_SHAPES.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name} must have shape {shape}, got {arr.shape}")
            self.params[name] = arr.copy()

    @classmethod
    def init(cls, rng) -> "Model":
        """Uniform fan-in init; biases start at zero."""
        rng = np.random.default_rng(rng)
        conv_lim = 1.0 / np.sqrt(PATCH)
        fc_lim = 1.0 / np.sqrt(FEATURES)
        return cls({
            "conv_w": rng.uniform(-conv_lim, conv_lim, PARAM_SHAPES["conv_w"]),
            "conv_b": np.zeros(CHANNELS),
            "fc_w": rng.uniform(-fc_lim, fc_lim, PARAM_SHAPES["fc_w"]),
            "fc_b": np.zeros(CLASSES),
        })

    @classmethod
    def zeros(cls) -> "Model":
        return cls({k: np.zeros(s) for k, s in PARAM_SHAPES.items()})

    def copy(self) -> "Model":
        return Model({k: v.copy() for k, v in self.params.items()}, self.version)

    def apply(self, deltas: dict):
        """theta <- theta + delta for every parameter present in ``deltas``."""
        for name, d in deltas.items():
            self.params[name] = self.params[name] + d
        self.version += 1


@dataclass
class LayerTape:
    version: int
    patches: np.ndarray      # B x 36 x 9
    conv_pre: np.ndarray     # B x 36 x 4
    features: np.ndarray     # B x 36 pooled activations
    logits: np.ndarray       # B x 4

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


@dataclass
class Gradients:
    params: dict
    fc_preact: np.ndarray = field(repr=False)    # B x 4 per-sample dL_b/dz
    conv_preact: np.ndarray = field(repr=False)  # (B*36) x 4 per-position dL_b/ds


def extract_patches(images) -> np.ndarray:
    """Valid 3x3 patches, row-major over output positions, (kernel row, col) inside."""
    x = _check_images(images)
    win = np.lib.stride_tricks.sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))
    return win.reshape(x.shape[0], POSITIONS, PATCH)


def _check_images(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2 and x.shape[1] == IMAGE_SIZE * IMAGE_SIZE:
        x = x.reshape(-1, IMAGE_SIZE, IMAGE_SIZE)
    if x.ndim != 3 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ContractError(f"expected a batch of 8x8 images, got shape {x.shape}")
    return x


def pool(act) -> np.ndarray:
    """B x 36 x 4 rectified conv map -> B x 36 pooled features, channel-major."""
    b = act.shape[0]
    maps = act.reshape(b, CONV_OUT, CONV_OUT, CHANNELS).transpose(0, 3, 1, 2)
    pooled = maps.reshape(b, CHANNELS, POOL_OUT, 2, POOL_OUT, 2).mean(axis=(3, 5))
    return pooled.reshape(b, FEATURES)


def unpool(grad_features) -> np.ndarray:
    """Adjoint of :func:`pool`."""
    b = grad_features.shape[0]
    g = grad_features.reshape(b, CHANNELS, POOL_OUT, 1, POOL_OUT, 1) / 4.0
    g = np.broadcast_to(g, (b, CHANNELS, POOL_OUT, 2, POOL_OUT, 2))
    maps = g.reshape(b, CHANNELS, CONV_OUT, CONV_OUT).transpose(0, 2, 3, 1)
    return maps.reshape(b, POSITIONS, CHANNELS)


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def forward(model: Model, images):
    p = model.params
    patches = extract_patches(images)
    conv_pre = patches @ p["conv_w"].T + p["conv_b"]
    features = pool(np.maximum(conv_pre, 0.0))
    logits = features @ p["fc_w"].T + p["fc_b"]
    return logits, LayerTape(model.version, patches, conv_pre, features, logits)


def backward(model: Model, tape: LayerTape, labels) -> Gradients:
    """Mean softmax cross-entropy gradients for the batch recorded in ``tape``."""
    if tape.version != model.version:
        raise ContractError("tape was recorded for a different parameter version")
    labels = np.asarray(labels)
    bsz = tape.batch_size
    if labels.shape != (bsz,):
        raise ContractError(f"labels shape {labels.shape} does not match batch of {bsz}")
    probs = softmax(tape.logits)
    probs[np.arange(bsz), labels] -= 1.0
    d_logits = probs / bsz

    fc_w = model.params["fc_w"]
    d_feat = d_logits @ fc_w
    d_conv = unpool(d_feat) * (tape.conv_pre > 0)

    grads = {
        "conv_w": np.einsum("btc,btp->cp", d_conv, tape.patches),
        "conv_b": d_conv.sum(axis=(0, 1)),
        "fc_w": d_logits.T @ tape.features,
        "fc_b": d_logits.sum(axis=0),
    }
    return Gradients(
        params=grads,
        fc_preact=d_logits * bsz,
        conv_preact=(d_conv * bsz).reshape(bsz * POSITIONS, CHANNELS),
    )


def loss_and_grads(model: Model, images, labels):
    logits, tape = forward(model, images)
    return cross_entropy(logits, labels), backward(model, tape, labels), tape


@dataclass
class MomentumState:
    velocity: dict = field(default_factory=dict)


def sgd_m_step(model: Model, grads: dict, lr: float, momentum: float, state: MomentumState) -> Model:
    """v <- momentum * v + g; theta <- theta - lr * v."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ContractError("need lr > 0 and momentum in [0, 1)")
    deltas = {}
    for name, g in grads.items():
        v = momentum * state.velocity.get(name, 0.0) + g
        state.velocity[name] = v
        deltas[name] = -lr * v
    model.apply(deltas)
    return model


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(model: Model, grads: dict, lr: float, state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Model:
    if lr <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
        raise ContractError("invalid Adam hyperparameters")
    state.t += 1
    deltas = {}
    for name, g in grads.items():
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** state.t)
        v_hat = v / (1 - beta2 ** state.t)
        deltas[name] = -lr * m_hat / (np.sqrt(v_hat) + eps)
    model.apply(deltas)
    return model


def evaluate(model: Model, images, labels):
    """Return ``(loss, accuracy, features)`` with features the 36-d pooled outputs."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    logits, tape = forward(model, images)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return cross_entropy(logits, labels), acc, tape.features
