"""Fourier-features INR with a linear shift-modulation hypernetwork.

The network maps a time coordinate ``t`` to a scalar::

    phi_0 = gamma(t)
    phi_l = relu(phi_{l-1} @ A_l + b_l + z @ W_l)      l = 1 .. depth
    f(t)  = phi_depth @ A_out + b_out

Weights are stored in right-multiply layout ``(fan_in, fan_out)`` so that a
batch of rows can be pushed through with ``rows @ A``. The hypernetwork is
the list of ``W_l`` matrices (``latent_dim x hidden_dim``); it has no bias,
so a zero code leaves the base network untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    num_frequencies: int = 64
    depth: int = 5
    hidden_dim: int = 256
    latent_dim: int = 128
    # clamp for the dyadic exponent; None keeps pi * 2**i for every i < N
    max_frequency_index: int | None = None

    def __post_init__(self):
        for name in ("num_frequencies", "depth", "hidden_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_frequency_index is not None and self.max_frequency_index < 0:
            raise ContractError("max_frequency_index must be >= 0")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.num_frequencies


def frequencies(num_frequencies: int, max_frequency_index: int | None = None) -> np.ndarray:
    """Angular frequencies ``pi * 2**i`` for ``i = 0 .. N-1``.

    With large N the upper frequencies alias badly on any realistic grid
    (2**63 * pi with the paper-scale default). ``max_frequency_index`` clamps
    the exponent while keeping the embedding width at ``2N``.
    """
    if num_frequencies < 1:
        raise ContractError("num_frequencies must be >= 1")
    exponents = np.arange(num_frequencies, dtype=np.float64)
    if max_frequency_index is not None:
        exponents = np.minimum(exponents, max_frequency_index)
    return np.pi * np.exp2(exponents)


def fourier_embed(t, num_frequencies: int, max_frequency_index: int | None = None) -> np.ndarray:
    """Interleaved ``(sin, cos)`` features of ``t``.

    A scalar ``t`` gives a vector of length ``2N``; an array of shape ``(n,)``
    gives an ``(n, 2N)`` matrix. Coordinates outside ``[0, 1]`` are accepted
    and amount to extrapolation.
    """
    freqs = frequencies(num_frequencies, max_frequency_index)
    t = np.asarray(t, dtype=np.float64)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (2 * num_frequencies,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass
class InrParams:
    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.layer_weights) - 1

    @property
    def hidden_dim(self) -> int:
        return self.layer_weights[0].shape[1]


@dataclass
class HypernetParams:
    modulation_matrices: list[np.ndarray]

    @property
    def latent_dim(self) -> int:
        return self.modulation_matrices[0].shape[0]


def init_params(config: ModelConfig, rng: np.random.Generator) -> tuple[InrParams, HypernetParams]:
    dims = [config.embedding_dim] + [config.hidden_dim] * config.depth + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    # A zero hypernetwork is a stationary point of the meta-objective (the
    # outer gradient w.r.t. W vanishes identically), so it gets the same
    # fan-in init as an ordinary linear layer.
    bound = 1.0 / np.sqrt(config.latent_dim)
    mods = [rng.uniform(-bound, bound, size=(config.latent_dim, config.hidden_dim)) for _ in range(config.depth)]
    return InrParams(weights, biases), HypernetParams(mods)


def hypernet_shifts(z, w: HypernetParams) -> list[np.ndarray]:
    """Per-layer bias shifts ``z @ W_l`` (equivalently ``W_l^T z``)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (w.latent_dim,):
        raise ContractError(f"latent code has shape {z.shape}, expected ({w.latent_dim},)")
    return [z @ m for m in w.modulation_matrices]


def modulated_forward(t: float, theta: InrParams, shifts: Sequence[np.ndarray],
                      num_frequencies: int, max_frequency_index: int | None = None) -> float:
    """Single-point forward pass with explicit per-layer shifts."""
    if len(shifts) != theta.depth:
        raise ContractError(f"got {len(shifts)} shifts for {theta.depth} hidden layers")
    h = fourier_embed(float(t), num_frequencies, max_frequency_index)
    for a, b, s in zip(theta.layer_weights[:-1], theta.layer_biases[:-1], shifts):
        h = np.maximum(h @ a + b + s, 0.0)
    return float((h @ theta.layer_weights[-1] + theta.layer_biases[-1])[0])


@dataclass
class TimeFlowModel:
    """Shared parameters of the modulated INR plus per-sample normalization
    statistics recorded at training time."""

    config: ModelConfig
    inr: InrParams
    hypernet: HypernetParams
    norm_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "TimeFlowModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        inr, hyper = init_params(config, rng)
        return cls(config, inr, hyper)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.config
        dims = [c.embedding_dim] + [c.hidden_dim] * c.depth + [1]
        if len(self.inr.layer_weights) != c.depth + 1 or len(self.inr.layer_biases) != c.depth + 1:
            raise DimensionError(f"expected {c.depth + 1} INR layers")
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if self.inr.layer_weights[i].shape != (fan_in, fan_out):
                raise DimensionError(f"inr weight {i} has shape {self.inr.layer_weights[i].shape}")
            if self.inr.layer_biases[i].shape != (fan_out,):
                raise DimensionError(f"inr bias {i} has shape {self.inr.layer_biases[i].shape}")
        if len(self.hypernet.modulation_matrices) != c.depth:
            raise DimensionError(f"expected {c.depth} modulation matrices")
        for i, m in enumerate(self.hypernet.modulation_matrices):
            if m.shape != (c.latent_dim, c.hidden_dim):
                raise DimensionError(f"modulation matrix {i} has shape {m.shape}")

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, in a fixed order."""
        out = {}
        for i, (a, b) in enumerate(zip(self.inr.layer_weights, self.inr.layer_biases)):
            out[f"inr.weight.{i}"] = a
            out[f"inr.bias.{i}"] = b
        for i, m in enumerate(self.hypernet.modulation_matrices):
            out[f"hyper.weight.{i}"] = m
        return out

    def parameter_names(self) -> Iterator[str]:
        return iter(self.named_parameters())

    @classmethod
    def from_named_parameters(cls, config: ModelConfig, params: dict[str, np.ndarray], **kwargs) -> "TimeFlowModel":
        depth = config.depth
        inr = InrParams(
            [np.asarray(params[f"inr.weight.{i}"], dtype=np.float64) for i in range(depth + 1)],
            [np.asarray(params[f"inr.bias.{i}"], dtype=np.float64) for i in range(depth + 1)],
        )
        hyper = HypernetParams([np.asarray(params[f"hyper.weight.{i}"], dtype=np.float64) for i in range(depth)])
        return cls(config, inr, hyper, **kwargs)

    def copy(self) -> "TimeFlowModel":
        params = {k: v.copy() for k, v in self.named_parameters().items()}
        return TimeFlowModel.from_named_parameters(
            self.config, params, norm_stats=dict(self.norm_stats), metadata=dict(self.metadata)
        )

    def embed(self, ts) -> np.ndarray:
        return fourier_embed(ts, self.config.num_frequencies, self.config.max_frequency_index)

    def parameter_nodes(self, trainable: bool = True) -> dict[str, ad.Node]:
        make = ad.variable if trainable else ad.constant
        return {k: make(v) for k, v in self.named_parameters().items()}

    def forward_graph(self, embedding: np.ndarray, nodes: dict[str, ad.Node],
                      codes: ad.Node, segment: np.ndarray) -> ad.Node:
        """Differentiable forward pass for rows belonging to several samples.

        ``embedding`` is ``(n, 2N)``, ``codes`` is ``(B, d_z)`` and
        ``segment[i]`` names the sample (row of ``codes``) that row ``i``
        belongs to. Returns an ``(n,)`` node.
        """
        depth = self.config.depth
        h = ad.constant(embedding)
        for l in range(depth):
            shift = ad.gather_rows(ad.matmul(codes, nodes[f"hyper.weight.{l}"]), segment)
            pre = ad.add(ad.add(ad.matmul(h, nodes[f"inr.weight.{l}"]), nodes[f"inr.bias.{l}"]), shift)
            h = ad.relu(pre)
        out = ad.add(ad.matmul(h, nodes[f"inr.weight.{depth}"]), nodes[f"inr.bias.{depth}"])
        return ad.reshape(out, (embedding.shape[0],))

    def batch_forward(self, ts, z=None) -> np.ndarray:
        """Evaluate ``f_{theta, h_w(z)}`` on a vector of coordinates."""
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        if ts.size == 0:
            raise ContractError("batch_forward needs at least one coordinate")
        if z is None:
            z = np.zeros(self.config.latent_dim)
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.config.latent_dim,):
            raise ContractError(f"latent code has shape {z.shape}, expected ({self.config.latent_dim},)")
        with ad.no_grad():
            out = self.forward_graph(
                self.embed(ts), self.parameter_nodes(trainable=False),
                ad.constant(z[None, :]), np.zeros(ts.size, dtype=np.intp),
            )
        return out.value.copy()

    def unmodulated_forward(self, ts) -> np.ndarray:
        """Plain ``MLP(gamma(t))`` without any hypernetwork contribution."""
        h = self.embed(np.atleast_1d(np.asarray(ts, dtype=np.float64)))
        for a, b in zip(self.inr.layer_weights[:-1], self.inr.layer_biases[:-1]):
            h = np.maximum(h @ a + b, 0.0)
        return (h @ self.inr.layer_weights[-1] + self.inr.layer_biases[-1])[:, 0]


def batch_forward(ts, theta: InrParams, z, w: HypernetParams, config: ModelConfig) -> np.ndarray:
    return TimeFlowModel(config, theta, w).batch_forward(ts, z)
