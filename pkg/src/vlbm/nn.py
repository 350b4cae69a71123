"""Dense layers, LSTM cells and distribution heads built on :mod:`vlbm.autodiff`.

Parameters live in flat ``name -> array`` dicts so the optimiser and checkpoint code
never need to know the network structure. A block is addressed by a prefix, e.g.
``"dec.state.mu"`` owns ``dec.state.mu.W0``, ``dec.state.mu.b0``, ... . Any block can
carry a leading stack axis (one slice per decoder branch or ensemble member); the
forward functions broadcast over it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, ShapeError, concat, exp, log, sigmoid, softplus, square, tanh, tsum

VAR_FLOOR = 1e-8
BERNOULLI_CLIP = 1e-7
LOG_2PI = math.log(2.0 * math.pi)

HEADS = ("linear", "softplus", "sigmoid")


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else like.tape.constant(x)


# -- initialisation --------------------------------------------------------------------

def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, stack: tuple[int, ...] = ()):
    bound = 1.0 / math.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=stack + (fan_in, fan_out))
    b = np.zeros(stack + (1, fan_out))
    return W, b


def init_mlp(rng: np.random.Generator, prefix: str, sizes: list[int], stack: tuple[int, ...] = ()) -> dict:
    """Uniform fan-in initialisation (``|w| <= 1/sqrt(fan_in)``), zero biases."""
    out = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.W{i}"], out[f"{prefix}.b{i}"] = init_dense(rng, fi, fo, stack)
    return out


def init_lstm(rng: np.random.Generator, prefix: str, in_dim: int, hidden: int,
              stack: tuple[int, ...] = ()) -> dict:
    """Gate blocks are stacked as ``[input, forget, output, candidate]``; forget bias starts at 1."""
    bound = 1.0 / math.sqrt(in_dim + hidden)
    b = np.zeros(stack + (1, 4 * hidden))
    b[..., hidden:2 * hidden] = 1.0
    return {
        f"{prefix}.Wx": rng.uniform(-bound, bound, size=stack + (in_dim, 4 * hidden)),
        f"{prefix}.Wh": rng.uniform(-bound, bound, size=stack + (hidden, 4 * hidden)),
        f"{prefix}.b": b,
    }


def init_weights(seed: int, blocks: list[tuple], stack: tuple[int, ...] = ()) -> dict:
    """Initialise a list of ``("mlp", prefix, sizes)`` / ``("lstm", prefix, in, hidden)`` blocks."""
    rng = np.random.default_rng(seed)
    params = {}
    for block in blocks:
        if block[0] == "mlp":
            params.update(init_mlp(rng, block[1], block[2], stack))
        elif block[0] == "lstm":
            params.update(init_lstm(rng, block[1], block[2], block[3], stack))
        else:
            raise ValueError(f"unknown block kind {block[0]!r}")
    return params


def mlp_depth(p: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in p:
        n += 1
    return n


# -- forward blocks ---------------------------------------------------------------------

def mlp_forward(p: Mapping[str, Tensor], prefix: str, x: Tensor, head: str = "linear",
                hidden: str = "tanh") -> Tensor:
    """Dense chain with ``hidden`` activations between layers and ``head`` on the output."""
    depth = mlp_depth(p, prefix)
    if depth == 0:
        raise KeyError(f"no MLP parameters under {prefix!r}")
    W0 = p[f"{prefix}.W0"]
    if x.shape[-1] != W0.shape[-2]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != layer width {W0.shape[-2]}")
    act = {"tanh": tanh, "softplus": softplus, "sigmoid": sigmoid}[hidden]
    for i in range(depth):
        x = x @ p[f"{prefix}.W{i}"] + p[f"{prefix}.b{i}"]
        if i < depth - 1:
            x = act(x)
    if head == "softplus":
        return softplus(x)
    if head == "sigmoid":
        return sigmoid(x)
    if head != "linear":
        raise ValueError(f"unknown head {head!r}")
    return x


def lstm_input_projection(p: Mapping[str, Tensor], prefix: str, parts: list) -> Tensor:
    """``sum_k parts[k] @ Wx[rows_k] + b``.

    Splitting ``Wx`` by input block is equivalent to concatenating the inputs, and lets
    a shared (unstacked) input feed every slice of a stacked parameter set.
    """
    Wx = p[f"{prefix}.Wx"]
    width = sum(part.shape[-1] for part in parts)
    if width != Wx.shape[-2]:
        raise ShapeError(f"{prefix}: input width {width} != LSTM input width {Wx.shape[-2]}")
    out, row = None, 0
    for part in parts:
        k = part.shape[-1]
        term = part @ Wx[..., row:row + k, :]
        out = term if out is None else out + term
        row += k
    return out + p[f"{prefix}.b"]


def lstm_cell(p: Mapping[str, Tensor], prefix: str, h_prev: Tensor, c_prev: Tensor, xproj: Tensor):
    """LSTM update given the already projected input ``x @ Wx + b``."""
    Wh = p[f"{prefix}.Wh"]
    M = Wh.shape[-2]
    if h_prev.shape[-1] != M or c_prev.shape[-1] != M:
        raise ShapeError(f"{prefix}: state width {h_prev.shape[-1]} != hidden size {M}")
    gates = xproj + h_prev @ Wh
    i = sigmoid(gates[..., 0:M])
    f = sigmoid(gates[..., M:2 * M])
    o = sigmoid(gates[..., 2 * M:3 * M])
    g = tanh(gates[..., 3 * M:4 * M])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_step(p: Mapping[str, Tensor], prefix: str, h_prev: Tensor, c_prev: Tensor, x):
    """One LSTM step; ``x`` is a tensor or a list of input blocks."""
    parts = x if isinstance(x, (list, tuple)) else [x]
    return lstm_cell(p, prefix, h_prev, c_prev, lstm_input_projection(p, prefix, parts))


# -- distributions ----------------------------------------------------------------------

@dataclass
class DiagGaussian:
    mean: Tensor
    var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class BernoulliMean:
    mean: Tensor


def gaussian_head(p: Mapping[str, Tensor], prefix: str, x: Tensor, hidden: str = "tanh") -> DiagGaussian:
    """Mean from ``<prefix>.mu`` (linear), variance from ``<prefix>.var`` (softplus)."""
    return DiagGaussian(mlp_forward(p, prefix + ".mu", x, "linear", hidden),
                        mlp_forward(p, prefix + ".var", x, "softplus", hidden))


def bernoulli_head(p: Mapping[str, Tensor], prefix: str, x: Tensor, hidden: str = "tanh") -> BernoulliMean:
    return BernoulliMean(mlp_forward(p, prefix, x, "sigmoid", hidden))


def reparam_sample(d: DiagGaussian, noise) -> Tensor:
    """``mean + sqrt(var) * noise`` with the noise held as a constant."""
    noise = _as_tensor(noise, d.mean)
    if noise.shape[-1] != d.dim:
        raise ShapeError(f"reparam_sample: noise width {noise.shape[-1]} != distribution width {d.dim}")
    return d.mean + exp(0.5 * log(d.var + VAR_FLOOR)) * noise


def gaussian_log_prob_rows(d: DiagGaussian, x) -> Tensor:
    """Log density summed over the last axis, keeping a trailing axis of size 1."""
    x = _as_tensor(x, d.mean)
    if x.shape[-1] != d.dim:
        raise ShapeError(f"gaussian_log_prob: value width {x.shape[-1]} != distribution width {d.dim}")
    log_var = log(d.var + VAR_FLOOR)
    quad = square(x - d.mean) * exp(-log_var)
    per_dim = -0.5 * (LOG_2PI + log_var + quad)
    return tsum(per_dim, axis=-1, keepdims=True)


def gaussian_log_prob(d: DiagGaussian, x) -> Tensor:
    return tsum(gaussian_log_prob_rows(d, x))


def gaussian_kl_rows(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form ``KL(q || p)`` per row for diagonal Gaussians."""
    if q.dim != p.dim:
        raise ShapeError(f"gaussian_kl: dims {q.dim} and {p.dim} differ")
    vq = q.var + VAR_FLOOR
    vp = p.var + VAR_FLOOR
    log_vq, log_vp = log(vq), log(vp)
    ratio = (vq + square(q.mean - p.mean)) * exp(-log_vp)
    per_dim = 0.5 * (log_vp - log_vq + ratio - 1.0)
    return tsum(per_dim, axis=-1, keepdims=True)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    return tsum(gaussian_kl_rows(q, p))


def standard_normal(like: Tensor, dim: int) -> DiagGaussian:
    tape = like.tape
    return DiagGaussian(tape.constant(np.zeros((1, dim))), tape.constant(np.ones((1, dim))))


def squash_probability(mean: Tensor) -> Tensor:
    """Affine map of ``[0, 1]`` onto ``[1e-7, 1 - 1e-7]`` so logs stay finite."""
    return BERNOULLI_CLIP + (1.0 - 2.0 * BERNOULLI_CLIP) * mean


def bernoulli_log_prob_rows(mean: Tensor, outcome) -> Tensor:
    y = np.asarray(outcome.value if isinstance(outcome, Tensor) else outcome, dtype=float)
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("bernoulli outcomes must be 0 or 1")
    m = squash_probability(mean)
    y_t = mean.tape.constant(y)
    per_dim = y_t * log(m) + (1.0 - y_t) * log(1.0 - m)
    return tsum(per_dim, axis=-1, keepdims=True)


def bernoulli_log_prob(mean: Tensor, outcome) -> Tensor:
    return tsum(bernoulli_log_prob_rows(mean, outcome))


def concat_gaussians(ds: list[DiagGaussian], axis: int) -> DiagGaussian:
    return DiagGaussian(concat([d.mean for d in ds], axis), concat([d.var for d in ds], axis))


class RNGStream:
    """Seeded source of standard-normal and uniform draws."""

    def __init__(self, seed):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def uniform(self, shape=None):
        return self.rng.random(shape)

    def spawn(self, n: int) -> list["RNGStream"]:
        return [RNGStream(s) for s in np.random.SeedSequence(self.rng.integers(2 ** 63)).spawn(n)]
