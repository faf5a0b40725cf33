"""MLP heads mapping sampled voxel features to Gaussian parameters.

Each anchor's feature f(x) goes through four independent heads: colour and
opacity are squashed by a sigmoid, rotation is L2-normalised into a unit
quaternion and scale passes through softplus.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .voxel import TrilinearWeights, VoxelGrid, trilinear_backward, trilinear_sample, trilinear_weights

OPACITY_EPS = 1e-6
SCALE_FLOOR = np.finfo(np.float64).tiny  # softplus underflows to 0 below about -745
HEAD_NAMES = ("color", "opacity", "rotation", "scale")
HEAD_OUT = {"color": 3, "opacity": 1, "rotation": 4, "scale": 3}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    # logaddexp(0, x) = ln(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass
class MlpHead:
    weights: list  # W_l of shape (in, out)
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("need one bias per weight matrix")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ConfigurationError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ConfigurationError("bias shape does not match layer width")

    @classmethod
    def init(cls, sizes, rng, dtype=np.float64, out_bias=None):
        """Uniform +-sqrt(6 / fan_in) weights, zero biases (``out_bias`` on the last layer)."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        if out_bias is not None:
            biases[-1] = np.asarray(out_bias, dtype=dtype).copy()
        return cls(weights, biases)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out


def mlp_forward(head: MlpHead, f):
    """Affine + ReLU chain with a linear output layer.

    Returns ``(raw, activations)`` where ``activations[l]`` is the input to
    layer ``l``; the list is what :func:`mlp_backward` consumes.
    """
    x = np.atleast_2d(f)
    if x.shape[-1] != head.weights[0].shape[0]:
        raise ConfigurationError(
            f"feature length {x.shape[-1]} != head input {head.weights[0].shape[0]}"
        )
    acts = [x]
    n = len(head.weights)
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        x = x @ w + b
        if i < n - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return x, acts


def mlp_backward(head: MlpHead, acts, grad_out):
    """Returns (dict of parameter grads, grad w.r.t. the head input)."""
    grads = {}
    g = grad_out
    for i in range(len(head.weights) - 1, -1, -1):
        if i < len(head.weights) - 1:
            g = g * (acts[i + 1] > 0)
        grads[f"W{i}"] = acts[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ head.weights[i].T
    return grads, g


def color_activation(raw):
    return sigmoid(raw)


def opacity_activation(raw, eps=OPACITY_EPS):
    return np.clip(sigmoid(raw), eps, 1.0 - eps)


def rotation_activation(raw):
    """Normalise to unit quaternions; near-zero rows become identity.

    Returns ``(q, degenerate_mask)``.
    """
    raw = np.atleast_2d(raw)
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    degenerate = n[:, 0] < 1e-12
    q = raw / np.where(degenerate[:, None], 1.0, n)
    q[degenerate] = (1.0, 0.0, 0.0, 0.0)
    return q, degenerate


def scale_activation(raw):
    return np.maximum(softplus(raw), SCALE_FLOOR)


def decode_color(head, f):
    return color_activation(mlp_forward(head, f)[0])


def decode_opacity(head, f, eps=OPACITY_EPS):
    return opacity_activation(mlp_forward(head, f)[0], eps)[:, 0]


def decode_rotation(head, f):
    return rotation_activation(mlp_forward(head, f)[0])[0]


def decode_scale(head, f):
    return scale_activation(mlp_forward(head, f)[0])


@dataclass
class Decoder:
    """The four prediction heads."""

    heads: dict

    @classmethod
    def init(cls, in_dim=32, hidden=(64, 64), seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        heads = {}
        for name in HEAD_NAMES:
            sizes = [in_dim, *hidden, HEAD_OUT[name]]
            out_bias = (1.0, 0.0, 0.0, 0.0) if name == "rotation" else None
            heads[name] = MlpHead.init(sizes, rng, dtype, out_bias)
        return cls(heads)

    @property
    def in_dim(self):
        return self.heads["color"].weights[0].shape[0]

    def params(self):
        return {
            f"head.{name}.{k}": v
            for name in HEAD_NAMES
            for k, v in self.heads[name].params().items()
        }

    def set_params(self, flat):
        for name in HEAD_NAMES:
            head = self.heads[name]
            for i in range(len(head.weights)):
                head.weights[i] = flat[f"head.{name}.W{i}"]
                head.biases[i] = flat[f"head.{name}.b{i}"]


@dataclass
class GaussianParams:
    colors: np.ndarray  # (K, 3) in [0, 1]
    opacities: np.ndarray  # (K,) in [eps, 1 - eps]
    rotations: np.ndarray  # (K, 4) unit (w, x, y, z)
    scales: np.ndarray  # (K, 3) > 0
    inside: np.ndarray  # (K,) anchor fell inside the grid
    degenerate: int = 0


@dataclass
class DecodeCache:
    positions: np.ndarray
    tw: TrilinearWeights
    feats: np.ndarray
    raw: dict
    acts: dict
    eps: float
    degenerate_mask: np.ndarray = field(default=None)


def decode_features(decoder: Decoder, feats, inside=None, eps=OPACITY_EPS):
    raw, acts = {}, {}
    for name in HEAD_NAMES:
        raw[name], acts[name] = mlp_forward(decoder.heads[name], feats)
    rot, degenerate = rotation_activation(raw["rotation"])
    params = GaussianParams(
        colors=color_activation(raw["color"]),
        opacities=opacity_activation(raw["opacity"], eps)[:, 0],
        rotations=rot,
        scales=scale_activation(raw["scale"]),
        inside=np.ones(len(feats), bool) if inside is None else inside,
        degenerate=int(degenerate.sum()),
    )
    return params, raw, acts, degenerate


def decode_all(grid: VoxelGrid, decoder: Decoder, positions, eps=OPACITY_EPS):
    """Sample f(x) at every anchor and run all four heads.

    Returns ``(GaussianParams, DecodeCache)``.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if grid.channels != decoder.in_dim:
        raise ConfigurationError(f"grid has {grid.channels} channels, heads expect {decoder.in_dim}")
    tw = trilinear_weights(grid.geometry, positions)
    feats, inside = trilinear_sample(grid, positions, tw)
    params, raw, acts, degenerate = decode_features(decoder, feats, inside, eps)
    return params, DecodeCache(positions, tw, feats, raw, acts, eps, degenerate)


def activation_backward(cache: DecodeCache, grad_colors=None, grad_opacity=None,
                        grad_rotation=None, grad_scale=None):
    """Push parameter gradients through the output activations onto raw head outputs."""
    raw = cache.raw
    out = {}
    if grad_colors is not None:
        s = sigmoid(raw["color"])
        out["color"] = grad_colors * s * (1 - s)
    if grad_opacity is not None:
        s = sigmoid(raw["opacity"][:, 0])
        live = (s > cache.eps) & (s < 1 - cache.eps)
        out["opacity"] = (grad_opacity * s * (1 - s) * live)[:, None]
    if grad_rotation is not None:
        r = raw["rotation"]
        n = np.linalg.norm(r, axis=1, keepdims=True)
        n = np.where(n < 1e-12, np.inf, n)
        q = r / n
        out["rotation"] = (grad_rotation - q * np.sum(q * grad_rotation, axis=1, keepdims=True)) / n
    if grad_scale is not None:
        out["scale"] = grad_scale * sigmoid(raw["scale"])
    return out


def decoder_backward(grid: VoxelGrid, decoder: Decoder, cache: DecodeCache, grad_colors=None,
                     grad_opacity=None, grad_rotation=None, grad_scale=None, positions_grad=False):
    """Gradients on head parameters, grid features and optionally anchor positions.

    Returns ``(head_grads, grad_features, grad_positions or None)``;
    ``head_grads`` uses the flat ``head.<name>.<W|b><i>`` keys.
    """
    graw = activation_backward(cache, grad_colors, grad_opacity, grad_rotation, grad_scale)
    head_grads = {}
    grad_f = np.zeros_like(cache.feats, dtype=np.float64)
    for name in HEAD_NAMES:
        head = decoder.heads[name]
        if name in graw:
            g, gf = mlp_backward(head, cache.acts[name], graw[name])
            grad_f += gf
        else:
            g = {k: np.zeros_like(v, dtype=np.float64) for k, v in head.params().items()}
        for k, v in g.items():
            head_grads[f"head.{name}.{k}"] = v
    grad_features, grad_x = trilinear_backward(grid, cache.positions, grad_f, cache.tw)
    return head_grads, grad_features, (grad_x if positions_grad else None)
