"""Q-network with factorised-Gaussian noisy linear layers, in plain numpy.

The network splits an observation matrix into a position block
(``is_present, dx, dy`` per row) and a velocity block (``dvx, dvy`` per row),
encodes each with its own fully connected layer, concatenates, and passes the
result through a trunk layer and a linear action-value head. Gradients are
derived by hand; ``q_backward`` returns exact gradients for every mean and
noise-scale parameter at a fixed noise sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional

import numpy as np

LAYER_NAMES = ("encoder_pos", "encoder_vel", "trunk", "head")
DEFAULT_NOISY = ("trunk", "head")
CHECKPOINT_VERSION = 1

POS_COLUMNS = (0, 1, 2)
VEL_COLUMNS = (3, 4)


class CheckpointError(ValueError):
    pass


@dataclass
class NoisyLinearParams:
    """Weights of one linear layer; ``sigma_*`` is None for a plain layer."""

    mu_w: np.ndarray
    mu_b: np.ndarray
    sigma_w: Optional[np.ndarray] = None
    sigma_b: Optional[np.ndarray] = None

    def __post_init__(self):
        q, p = self.mu_w.shape
        if self.mu_b.shape != (q,):
            raise ValueError(f"bias shape {self.mu_b.shape} does not match weight shape {(q, p)}")
        if (self.sigma_w is None) != (self.sigma_b is None):
            raise ValueError("sigma_w and sigma_b must both be set or both be None")
        if self.sigma_w is not None and (self.sigma_w.shape != (q, p) or self.sigma_b.shape != (q,)):
            raise ValueError("sigma shapes must match mu shapes")

    @property
    def noisy(self) -> bool:
        return self.sigma_w is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu_w.shape

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"mu_w": self.mu_w, "mu_b": self.mu_b}
        if self.noisy:
            out["sigma_w"] = self.sigma_w
            out["sigma_b"] = self.sigma_b
        return out

    def copy(self) -> "NoisyLinearParams":
        return NoisyLinearParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "NoisyLinearParams":
        return NoisyLinearParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})


@dataclass(frozen=True)
class NoiseSample:
    """Factorised noise for one layer, stored after the ``sgn(x)*sqrt(|x|)`` transform."""

    eps_in: np.ndarray
    eps_out: np.ndarray

    @property
    def weight_noise(self) -> np.ndarray:
        return np.outer(self.eps_out, self.eps_in)

    @property
    def bias_noise(self) -> np.ndarray:
        return self.eps_out


def scale_noise(x):
    return np.sign(x) * np.sqrt(np.abs(x))


def sample_factorised_noise(p: int, q: int, rng: np.random.Generator) -> NoiseSample:
    """Draw ``p + q`` standard normals and build one layer's factorised noise."""
    if p < 1 or q < 1:
        raise ValueError("layer dimensions must be positive")
    z = scale_noise(rng.standard_normal(p + q))
    return NoiseSample(eps_in=z[:p], eps_out=z[p:])


def zero_noise(p: int, q: int) -> NoiseSample:
    return NoiseSample(np.zeros(p), np.zeros(q))


def effective_params(params: NoisyLinearParams, noise: Optional[NoiseSample]) -> tuple[np.ndarray, np.ndarray]:
    if not params.noisy or noise is None:
        return params.mu_w, params.mu_b
    w = params.mu_w + params.sigma_w * np.outer(noise.eps_out, noise.eps_in)
    b = params.mu_b + params.sigma_b * noise.eps_out
    return w, b


def linear_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ w.T + b


def noisy_forward(params: NoisyLinearParams, noise: Optional[NoiseSample], x: np.ndarray) -> np.ndarray:
    """Evaluate one layer on ``x`` of shape ``(p,)`` or ``(batch, p)``.

    Plain layers, or a ``None`` noise sample, use the means only.
    """
    q, p = params.shape
    if x.shape[-1] != p:
        raise ValueError(f"input width {x.shape[-1]} does not match layer fan-in {p}")
    if noise is not None and params.noisy and (noise.eps_in.shape != (p,) or noise.eps_out.shape != (q,)):
        raise ValueError(f"noise shapes {noise.eps_in.shape}, {noise.eps_out.shape} do not match layer {(q, p)}")
    w, b = effective_params(params, noise)
    return linear_forward(w, b, x)


@dataclass
class QNetworkParams:
    encoder_pos: NoisyLinearParams
    encoder_vel: NoisyLinearParams
    trunk: NoisyLinearParams
    head: NoisyLinearParams

    def layers(self) -> Iterator[tuple[str, NoisyLinearParams]]:
        for name in LAYER_NAMES:
            yield name, getattr(self, name)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, layer in self.layers():
            for key, arr in layer.arrays().items():
                yield f"{name}.{key}", arr

    @property
    def noisy_layers(self) -> tuple[str, ...]:
        return tuple(name for name, layer in self.layers() if layer.noisy)

    @property
    def n_actions(self) -> int:
        return self.head.shape[0]

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(**{name: layer.copy() for name, layer in self.layers()})

    def zeros_like(self) -> "QNetworkParams":
        return QNetworkParams(**{name: layer.zeros_like() for name, layer in self.layers()})

    def mean_only(self) -> "QNetworkParams":
        """Plain network carrying only the means."""
        return QNetworkParams(
            **{name: NoisyLinearParams(layer.mu_w.copy(), layer.mu_b.copy()) for name, layer in self.layers()}
        )

    def assign(self, other: "QNetworkParams") -> None:
        """Copy ``other``'s values into this container in place."""
        mine = dict(self.named_arrays())
        for key, arr in other.named_arrays():
            mine[key][...] = arr

    def equals(self, other: "QNetworkParams") -> bool:
        a, b = dict(self.named_arrays()), dict(other.named_arrays())
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# Gradients share the parameter container layout.
QGradients = QNetworkParams


def init_layer(p: int, q: int, rng: np.random.Generator, sigma0: Optional[float] = None) -> NoisyLinearParams:
    bound = 1.0 / np.sqrt(p)
    mu_w = rng.uniform(-bound, bound, size=(q, p))
    mu_b = rng.uniform(-bound, bound, size=q)
    if sigma0 is None:
        return NoisyLinearParams(mu_w, mu_b)
    s = sigma0 / np.sqrt(p)
    return NoisyLinearParams(mu_w, mu_b, np.full((q, p), s), np.full(q, s))


def init_network(
    rng: np.random.Generator,
    sigma0: float = 0.5,
    pos_dim: int = 15,
    vel_dim: int = 10,
    encoder_width: int = 64,
    trunk_width: int = 128,
    n_actions: int = 5,
    noisy: tuple[str, ...] = DEFAULT_NOISY,
) -> QNetworkParams:
    """Fan-in scaled initialisation; layers named in ``noisy`` get sigma parameters."""
    if sigma0 < 0:
        raise ValueError("sigma0 must be non-negative")
    unknown = set(noisy) - set(LAYER_NAMES)
    if unknown:
        raise ValueError(f"unknown layer names {sorted(unknown)}")
    sizes = {
        "encoder_pos": (pos_dim, encoder_width),
        "encoder_vel": (vel_dim, encoder_width),
        "trunk": (2 * encoder_width, trunk_width),
        "head": (trunk_width, n_actions),
    }
    return QNetworkParams(
        **{name: init_layer(p, q, rng, sigma0 if name in noisy else None) for name, (p, q) in sizes.items()}
    )


NetworkNoise = Mapping[str, NoiseSample]


def sample_network_noise(net: QNetworkParams, rng: np.random.Generator) -> dict[str, NoiseSample]:
    """One noise sample per noisy layer, drawn in layer order."""
    out = {}
    for name, layer in net.layers():
        if layer.noisy:
            q, p = layer.shape
            out[name] = sample_factorised_noise(p, q, rng)
    return out


def split_observation(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten ``(..., rows, 5)`` observations into position and velocity blocks."""
    lead = obs.shape[:-2]
    pos = obs[..., list(POS_COLUMNS)].reshape(lead + (-1,))
    vel = obs[..., list(VEL_COLUMNS)].reshape(lead + (-1,))
    return pos, vel


@dataclass
class ForwardCache:
    x_pos: np.ndarray
    x_vel: np.ndarray
    hidden_in: np.ndarray  # relu(concat(encoders)), trunk input
    trunk_pre: np.ndarray
    trunk_out: np.ndarray
    enc_pre: np.ndarray
    weights: dict = field(default_factory=dict)


def forward(net: QNetworkParams, noise: Optional[NetworkNoise], obs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; ``obs`` is ``(rows, 5)`` or ``(batch, rows, 5)``."""
    obs = np.asarray(obs, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite values")
    noise = noise or {}
    x_pos, x_vel = split_observation(obs)
    weights = {name: effective_params(layer, noise.get(name)) for name, layer in net.layers()}
    h_pos = linear_forward(*weights["encoder_pos"], x_pos)
    h_vel = linear_forward(*weights["encoder_vel"], x_vel)
    enc_pre = np.concatenate([h_pos, h_vel], axis=-1)
    hidden_in = np.maximum(enc_pre, 0.0)
    trunk_pre = linear_forward(*weights["trunk"], hidden_in)
    trunk_out = np.maximum(trunk_pre, 0.0)
    q = linear_forward(*weights["head"], trunk_out)
    return q, ForwardCache(x_pos, x_vel, hidden_in, trunk_pre, trunk_out, enc_pre, weights)


def q_forward(net: QNetworkParams, noise: Optional[NetworkNoise], obs: np.ndarray) -> np.ndarray:
    return forward(net, noise, obs)[0]


def _layer_grad(layer, noise, w, x, dy):
    """Parameter gradients of one layer and the gradient w.r.t. its input."""
    if dy.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy()
    else:
        dw = dy.T @ x
        db = dy.sum(axis=0)
    dx = dy @ w
    if not layer.noisy:
        return NoisyLinearParams(dw, db), dx
    if noise is None:
        return NoisyLinearParams(dw, db, np.zeros_like(dw), np.zeros_like(db)), dx
    return NoisyLinearParams(dw, db, dw * np.outer(noise.eps_out, noise.eps_in), db * noise.eps_out), dx


def backward(net: QNetworkParams, noise: Optional[NetworkNoise], cache: ForwardCache, dq: np.ndarray) -> QGradients:
    """Backpropagate ``dL/dQ`` through a cached forward pass."""
    noise = noise or {}
    w = cache.weights
    g_head, d_trunk_out = _layer_grad(net.head, noise.get("head"), w["head"][0], cache.trunk_out, dq)
    d_trunk_pre = d_trunk_out * (cache.trunk_pre > 0)
    g_trunk, d_hidden = _layer_grad(net.trunk, noise.get("trunk"), w["trunk"][0], cache.hidden_in, d_trunk_pre)
    d_enc = d_hidden * (cache.enc_pre > 0)
    split = net.encoder_pos.shape[0]
    g_pos, _ = _layer_grad(net.encoder_pos, noise.get("encoder_pos"), w["encoder_pos"][0], cache.x_pos, d_enc[..., :split])
    g_vel, _ = _layer_grad(net.encoder_vel, noise.get("encoder_vel"), w["encoder_vel"][0], cache.x_vel, d_enc[..., split:])
    return QNetworkParams(encoder_pos=g_pos, encoder_vel=g_vel, trunk=g_trunk, head=g_head)


def q_backward(net: QNetworkParams, noise: Optional[NetworkNoise], obs: np.ndarray, dl_dq: np.ndarray) -> QGradients:
    _, cache = forward(net, noise, obs)
    return backward(net, noise, cache, np.asarray(dl_dq, dtype=float))


# -- checkpoints ------------------------------------------------------------


def to_checkpoint(net: QNetworkParams, metadata: Optional[dict] = None) -> dict:
    layers = []
    for name, layer in net.layers():
        entry = {"name": name, "shape": list(layer.shape), "noisy": layer.noisy}
        for key, arr in layer.arrays().items():
            entry[key] = arr.ravel().tolist()
        layers.append(entry)
    return {"format_version": CHECKPOINT_VERSION, "layers": layers, "metadata": metadata or {}}


def from_checkpoint(doc: dict, expected: Optional[QNetworkParams] = None) -> QNetworkParams:
    """Rebuild parameters from a checkpoint dict, optionally checking them against ``expected``'s layout."""
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {doc.get('format_version')!r}")
    by_name = {entry["name"]: entry for entry in doc.get("layers", [])}
    layers = {}
    for name in LAYER_NAMES:
        if name not in by_name:
            raise CheckpointError(f"checkpoint is missing layer {name!r}")
        entry = by_name[name]
        q, p = entry["shape"]
        try:
            arrays = {"mu_w": np.array(entry["mu_w"], dtype=float).reshape(q, p), "mu_b": np.array(entry["mu_b"], dtype=float).reshape(q)}
            if entry.get("noisy"):
                arrays["sigma_w"] = np.array(entry["sigma_w"], dtype=float).reshape(q, p)
                arrays["sigma_b"] = np.array(entry["sigma_b"], dtype=float).reshape(q)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"layer {name!r}: malformed arrays ({exc})") from exc
        layer = NoisyLinearParams(**arrays)
        if expected is not None:
            ref = getattr(expected, name)
            if ref.shape != layer.shape or ref.noisy != layer.noisy:
                raise CheckpointError(
                    f"layer {name!r}: checkpoint has shape {layer.shape} (noisy={layer.noisy}), "
                    f"expected {ref.shape} (noisy={ref.noisy})"
                )
        layers[name] = layer
    return QNetworkParams(**layers)


def save_checkpoint(path, net: QNetworkParams, metadata: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(to_checkpoint(net, metadata), fh)


def load_checkpoint(path, expected: Optional[QNetworkParams] = None) -> QNetworkParams:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    return from_checkpoint(doc, expected)
