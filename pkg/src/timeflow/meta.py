"""Inner-loop code adaptation and second-order outer updates.

Each outer iteration starts every code in the batch at zero, takes exactly
``K`` plain gradient steps on the observed (input) points, then scores the
adapted model on the input points plus, for forecasting windows, the
horizon. The outer gradient is taken through the inner steps unless
``first_order`` is set.

Samples in a batch are adapted together: their rows are stacked and the
inner objective is the *sum* of per-sample mean squared errors. Because the
codes of different samples never interact, the gradient of that sum with
respect to row ``j`` of the code matrix is exactly sample ``j``'s own
gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DivergenceError
from .model import TimeFlowModel

if TYPE_CHECKING:
    from .tasks import TaskWindow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerLoopConfig:
    alpha: float = 1e-2
    steps: int = 3

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError(f"inner alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ContractError(f"inner steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class OuterConfig:
    outer_lr: float = 5e-4
    epochs: int = 40_000
    batch_size: int = 64
    lr_min: float = 0.0
    # None: epochs * batches per epoch
    total_steps: int | None = None
    first_order: bool = False

    def __post_init__(self):
        if self.outer_lr < 0:
            raise ContractError(f"outer_lr must be >= 0, got {self.outer_lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place Adam update of every array in ``params``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(p)
                self.second_moment[name] = np.zeros_like(p)
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def cosine_lr(step: int, base_lr: float, lr_min: float, total_steps: int) -> float:
    if step < 0:
        raise ContractError("step must be >= 0")
    if total_steps <= 0 or step >= total_steps:
        return lr_min if step >= total_steps else base_lr
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _check_finite(node_or_array, what: str, step: int) -> None:
    value = node_or_array.value if isinstance(node_or_array, ad.Node) else node_or_array
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {what} at inner step {step}", step=step)


def inner_adapt(sample_loss: Callable[[ad.Node], ad.Node], shape, cfg: InnerLoopConfig,
                create_graph: bool = True) -> ad.Node:
    """Run ``cfg.steps`` gradient-descent steps on a code starting at zero.

    ``sample_loss`` maps a code node to a scalar loss node. With
    ``create_graph`` the returned code carries the differentiation history of
    every step, so gradients of later losses reach the shared parameters
    through it.
    """
    z = ad.variable(np.zeros(shape))
    for k in range(1, cfg.steps + 1):
        loss = sample_loss(z)
        _check_finite(loss, "inner loss", k)
        (g,) = ad.grad(loss, [z], create_graph=create_graph)
        _check_finite(g, "inner gradient", k)
        if create_graph:
            z = ad.sub(z, ad.scale(g, cfg.alpha))
        else:
            z = ad.variable(z.value - cfg.alpha * g.value)
    return z


@dataclass
class _Rows:
    """Windows of a batch flattened into stacked rows."""

    embedding: np.ndarray
    targets: np.ndarray
    segment: np.ndarray
    weights: np.ndarray


def _stack(model: TimeFlowModel, coords: Sequence[np.ndarray], values: Sequence[np.ndarray],
           weights: Sequence[float]) -> _Rows:
    seg = np.concatenate([np.full(len(c), j, dtype=np.intp) for j, c in enumerate(coords)])
    w = np.concatenate([np.full(len(c), wj) for c, wj in zip(coords, weights)])
    return _Rows(model.embed(np.concatenate(coords)), np.concatenate(values), seg, w)


def _inner_rows(model: TimeFlowModel, coords, values) -> _Rows:
    for c in coords:
        if len(c) == 0:
            raise ContractError("empty input grid: nothing to adapt on")
    return _stack(model, coords, values, [1.0 / len(c) for c in coords])


def adapt_codes(model: TimeFlowModel, nodes: dict[str, ad.Node], rows: _Rows, n_codes: int,
                cfg: InnerLoopConfig, create_graph: bool) -> ad.Node:
    def loss(z):
        pred = model.forward_graph(rows.embedding, nodes, z, rows.segment)
        return ad.weighted_sse(pred, rows.targets, rows.weights)

    return inner_adapt(loss, (n_codes, model.config.latent_dim), cfg, create_graph=create_graph)


def outer_loss(batch: Sequence["TaskWindow"], model: TimeFlowModel, nodes: dict[str, ad.Node],
               cfg: InnerLoopConfig, first_order: bool = False) -> ad.Node:
    """``mean_j [ L_in_j + lambda_j * L_out_j ]`` at the adapted codes."""
    if not batch:
        raise ContractError("empty batch")
    b = len(batch)
    in_coords = [w.t_in.coords for w in batch]
    in_values = [w.values_in for w in batch]
    rows = _inner_rows(model, in_coords, in_values)
    codes = adapt_codes(model, nodes, rows, b, cfg, create_graph=not first_order)
    if first_order:
        codes = ad.detach(codes)

    coords = list(in_coords)
    values = list(in_values)
    weights = [1.0 / (b * len(c)) for c in in_coords]
    segments = list(range(b))
    for j, w in enumerate(batch):
        if w.lambda_out:
            if len(w.t_out.coords) == 0:
                raise ContractError(f"window {w.sample_id}: lambda=1 with an empty output grid")
            coords.append(w.t_out.coords)
            values.append(w.values_out)
            weights.append(1.0 / (b * len(w.t_out.coords)))
            segments.append(j)
    seg = np.concatenate([np.full(len(c), s, dtype=np.intp) for c, s in zip(coords, segments)])
    wts = np.concatenate([np.full(len(c), wj) for c, wj in zip(coords, weights)])
    pred = model.forward_graph(model.embed(np.concatenate(coords)), nodes, codes, seg)
    return ad.weighted_sse(pred, np.concatenate(values), wts)


def outer_step(batch: Sequence["TaskWindow"], model: TimeFlowModel, adam: AdamState,
               inner_cfg: InnerLoopConfig, lr: float, first_order: bool = False) -> float:
    """One simultaneous Adam update of the INR and hypernetwork parameters.

    Returns the pre-update outer loss.
    """
    params = model.named_parameters()
    nodes = {k: ad.variable(v) for k, v in params.items()}
    loss = outer_loss(batch, model, nodes, inner_cfg, first_order=first_order)
    if not np.isfinite(loss.item()):
        raise DivergenceError("non-finite outer loss")
    names = list(nodes)
    grads = ad.grad(loss, [nodes[k] for k in names])
    grad_arrays = {k: g.value for k, g in zip(names, grads)}
    for k, g in grad_arrays.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite outer gradient for {k}")
    adam.step(params, grad_arrays, lr)
    return loss.item()


@dataclass
class FitResult:
    model: TimeFlowModel
    loss_history: list[float]
    adam: AdamState


TaskSource = Sequence["TaskWindow"] | Callable[[np.random.Generator], Sequence["TaskWindow"]]


def fit(tasks: TaskSource, model: TimeFlowModel, inner_cfg: InnerLoopConfig, outer_cfg: OuterConfig,
        seed: int = 0, adam: AdamState | None = None,
        callback: Callable[[int, float], None] | None = None) -> FitResult:
    """Meta-train ``model`` in place for ``outer_cfg.epochs`` epochs.

    ``tasks`` is either a fixed list of windows (imputation) or a callable
    that draws a fresh list from a generator every epoch (forecasting).
    One epoch is one pass over the windows of that epoch.
    """
    window_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    draw = tasks if callable(tasks) else (lambda _rng, _fixed=list(tasks): _fixed)
    adam = adam or AdamState()
    history: list[float] = []
    total = outer_cfg.total_steps
    step = 0
    for epoch in range(outer_cfg.epochs):
        windows = list(draw(window_rng))
        if not windows:
            raise ContractError("no training windows")
        n_batches = math.ceil(len(windows) / outer_cfg.batch_size)
        if total is None:
            total = outer_cfg.epochs * n_batches
        order = shuffle_rng.permutation(len(windows))
        epoch_loss = 0.0
        for bi in range(n_batches):
            batch = [windows[i] for i in order[bi * outer_cfg.batch_size:(bi + 1) * outer_cfg.batch_size]]
            lr = cosine_lr(step, outer_cfg.outer_lr, outer_cfg.lr_min, total)
            try:
                loss = outer_step(batch, model, adam, inner_cfg, lr, first_order=outer_cfg.first_order)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {bi}: {exc}", step=exc.step, epoch=epoch, batch=bi) from exc
            epoch_loss += loss * len(batch)
            step += 1
        history.append(epoch_loss / len(windows))
        if callback is not None:
            callback(epoch, history[-1])
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6g", epoch, history[-1])
    return FitResult(model, history, adam)


def infer_codes(model: TimeFlowModel, coords: Sequence[np.ndarray], values: Sequence[np.ndarray],
                cfg: InnerLoopConfig) -> np.ndarray:
    """Adapt one code per observation set with the shared parameters frozen."""
    nodes = model.parameter_nodes(trainable=False)
    rows = _inner_rows(model, [np.asarray(c, dtype=np.float64) for c in coords],
                       [np.asarray(v, dtype=np.float64) for v in values])
    codes = adapt_codes(model, nodes, rows, len(coords), cfg, create_graph=False)
    return codes.value.copy()


def predict(model: TimeFlowModel, codes: np.ndarray, coords: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Query each adapted code on its own coordinate set."""
    coords = [np.asarray(c, dtype=np.float64) for c in coords]
    nonempty = [j for j, c in enumerate(coords) if len(c)]
    out = [np.empty(0) for _ in coords]
    if not nonempty:
        return out
    with ad.no_grad():
        rows = _stack(model, [coords[j] for j in nonempty], [np.zeros(len(coords[j])) for j in nonempty],
                      [1.0] * len(nonempty))
        pred = model.forward_graph(rows.embedding, model.parameter_nodes(trainable=False),
                                   ad.constant(np.asarray(codes)[nonempty]), rows.segment).value
    offsets = np.cumsum([0] + [len(coords[j]) for j in nonempty])
    for i, j in enumerate(nonempty):
        out[j] = pred[offsets[i]:offsets[i + 1]].copy()
    return out
