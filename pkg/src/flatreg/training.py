"""Training procedures: standard, PGD-adversarial, input-gradient penalty,
and the flatness-regularized minimax variant.

The minimax method alternates two loops per minibatch:

* inner: sign-ascent on g(x′) = ‖∂ₓL(x′)‖₁ inside B_∞(x, ε) ∩ [0,1]^d,
  which differentiates the input-gradient norm w.r.t. the input (second
  derivatives in input space);
* outer: one SGD step on L(x) + λ·g(x′), whose θ-gradient carries the mixed
  second-order term d‖∂ₓL(x′)‖₁/dθ through the tape.

The plain gradient-penalty method is the ε=0 special case with the inner
loop skipped; both build the *same* objective graph shape, so with ε=0 and
identical seeds their parameter trajectories agree bit for bit (that
equivalence is asserted in tests, not just documented).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import model as md
from .attacks import AttackConfig, pgd, project_box_linf
from .data import Dataset
from .rng import derive_seed, named_stream

METHODS = ("standard", "at", "gradreg", "lfr")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    lam: float
    inner: AttackConfig
    eval_attack: AttackConfig
    lr: float
    batch: int
    epochs: int
    seed: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class TrainMetrics:
    """Per-epoch series; robust accuracy only when requested (it is slow)."""

    loss: tuple[float, ...]
    reg: tuple[float, ...]
    clean_acc: tuple[float, ...]
    robust_acc: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.loss)
        if len(self.reg) != n or len(self.clean_acc) != n:
            raise ValueError("metric series lengths differ")
        if self.robust_acc is not None and len(self.robust_acc) != n:
            raise ValueError("metric series lengths differ")


@dataclass(frozen=True)
class Objective:
    """One minibatch objective: the tape plus the named nodes inside it."""

    graph: ad.Graph
    total: ad.NodeId
    base_loss: ad.NodeId
    reg: ad.NodeId | None
    pnodes: list[ad.NodeId]


def inner_max_flatness(
    params: md.ModelParams,
    x: np.ndarray,
    y,
    cfg: AttackConfig,
    return_trajectory: bool = False,
):
    """Sign-ascent on the input-gradient 1-norm, projected to B_∞(x, ε)∩box.

    Starts at x itself unless cfg.random_start; each step needs the gradient
    *of* the gradient norm, i.e. a second differentiation in input space.
    Batch rows never interact (the objective is a sum of per-row terms), so
    batched and per-sample calls produce the same iterates.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_start and cfg.epsilon > 0.0:
        rng = named_stream(cfg.seed, "inner.start")
        x_prime = project_box_linf(
            x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon
        )
    else:
        x_prime = x.copy()
    trajectory = [x_prime.copy()]
    for _ in range(cfg.iters):
        g = ad.Graph()
        xp = g.leaf(x_prime)
        logits = md.forward_logits(params, xp, g)
        loss_sum = md.cross_entropy_sum(g, logits, y)
        gnorm = ad.grad_norm1(g, loss_sum, xp)
        (ascent,) = ad.backward(g, gnorm, [xp])
        step = cfg.step * np.sign(g.value(ascent))
        x_prime = project_box_linf(x_prime + step, x, cfg.epsilon)
        if return_trajectory:
            trajectory.append(x_prime.copy())
    if return_trajectory:
        return x_prime, trajectory
    return x_prime


def input_grad_norms(params: md.ModelParams, x: np.ndarray, y) -> np.ndarray:
    """Per-sample ‖∂ₓL‖₁ values (plain numbers, no tape kept)."""
    g = ad.Graph()
    xn = g.leaf(np.asarray(x, dtype=np.float64))
    logits = md.forward_logits(params, xn, g)
    (gx,) = ad.backward(g, md.cross_entropy_sum(g, logits, y), [xn])
    return np.abs(g.value(gx)).sum(axis=1)


def lfr_objective(
    params: md.ModelParams,
    x: np.ndarray,
    y,
    x_prime: np.ndarray | None,
    lam: float,
) -> Objective:
    """L(x,y;θ) + λ·mean‖∂ₓL(x′;θ)‖₁ as a differentiable tape.

    With lam=0 the penalty branch is not recorded at all, so the graph (and
    every float in it) is exactly the standard-loss graph. The penalty
    branch re-derives the input gradient as graph nodes; differentiating the
    total w.r.t. θ therefore includes the second-order term d‖∂ₓL‖₁/dθ.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    g = ad.Graph()
    pnodes = md.param_nodes(g, params, differentiable=True)
    logits = md.forward_logits(params, np.asarray(x, dtype=np.float64), g, nodes=pnodes)
    base = md.cross_entropy(g, logits, y)
    if lam == 0.0:
        return Objective(g, base, base, None, pnodes)
    if x_prime is None:
        raise ValueError("lambda > 0 requires a penalty evaluation point")
    xp = g.leaf(np.asarray(x_prime, dtype=np.float64))
    logits_p = md.forward_logits(params, xp, g, nodes=pnodes)
    loss_sum_p = md.cross_entropy_sum(g, logits_p, y)
    b = g.shape(xp)[0]
    reg = ad.scale(g, ad.grad_norm1(g, loss_sum_p, xp), 1.0 / b)
    total = ad.add(g, base, ad.scale(g, reg, lam))
    return Objective(g, total, base, reg, pnodes)


def sgd_step(params: md.ModelParams, grads: list[np.ndarray], lr: float) -> md.ModelParams:
    """θ ← θ − lr·g, returning fresh immutable params.

    Gradients arrive in the flat [w0, b0, w1, b1, ...] order that
    :func:`flatreg.model.param_nodes` uses.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(grads) != 2 * params.num_layers:
        raise ValueError(
            f"expected {2 * params.num_layers} gradient tensors, got {len(grads)}"
        )
    weights, biases = [], []
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        gw, gb = grads[2 * li], grads[2 * li + 1]
        for name, tensor, grad in (("weight", w, gw), ("bias", b, gb)):
            if grad.shape != tensor.shape:
                raise ad.ShapeMismatch(
                    f"layer {li} {name}: gradient shape {grad.shape} "
                    f"!= parameter shape {tensor.shape}"
                )
            if not np.isfinite(grad).all():
                raise ad.NonFiniteValue(
                    f"layer {li} {name} gradient is non-finite; aborting step"
                )
        weights.append(w - lr * gw)
        biases.append(b - lr * gb)
    return md.ModelParams(params.arch, tuple(weights), tuple(biases), params.seed)


def _batch_objective(
    params: md.ModelParams,
    xb: np.ndarray,
    yb: np.ndarray,
    cfg: TrainConfig,
    inner_cfg: AttackConfig,
    step_index: int,
) -> Objective:
    if cfg.method == "standard":
        return lfr_objective(params, xb, yb, None, 0.0)
    if cfg.method == "at":
        x_adv = pgd(params, xb, yb, inner_cfg, start_offset=step_index)
        return lfr_objective(params, x_adv, yb, None, 0.0)
    if cfg.method == "gradreg":
        return lfr_objective(params, xb, yb, xb, cfg.lam)
    # lfr: with lam=0 the penalty (and its inner solver) drops out entirely
    if cfg.lam == 0.0:
        return lfr_objective(params, xb, yb, None, 0.0)
    x_prime = inner_max_flatness(params, xb, yb, inner_cfg)
    return lfr_objective(params, xb, yb, x_prime, cfg.lam)


def train(
    dataset: Dataset,
    arch: md.Architecture,
    cfg: TrainConfig,
    metrics_path: str | None = None,
    robust_metrics: bool = False,
    robust_sample: int = 200,
) -> tuple[md.ModelParams, TrainMetrics]:
    """Run the configured method; bit-reproducible from (dataset, cfg).

    Every random draw (init, shuffles, attack starts) derives from cfg.seed.
    If metrics_path is given, per-epoch rows are streamed to CSV and flushed
    as they happen, so an aborted run keeps the epochs it finished.
    """
    params = md.init_params(arch, cfg.seed)
    inner_cfg = replace(cfg.inner, seed=derive_seed(cfg.seed, "train.inner"))
    eval_cfg = replace(cfg.eval_attack, seed=derive_seed(cfg.seed, "train.eval"))
    n = len(dataset)
    losses, regs, cleans, robusts = [], [], [], []

    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        header = ["epoch", "loss", "reg", "clean_acc"]
        if robust_metrics:
            header.append("robust_acc")
        writer.writerow(header)
        fh.flush()

    try:
        step_index = 0
        for epoch in range(cfg.epochs):
            order = named_stream(cfg.seed, f"shuffle.epoch{epoch}").permutation(n)
            loss_total = 0.0
            reg_total = 0.0
            for lo in range(0, n, cfg.batch):
                idx = order[lo : lo + cfg.batch]
                xb = dataset.images[idx]
                yb = dataset.labels[idx]
                obj = _batch_objective(params, xb, yb, cfg, inner_cfg, step_index)
                grads = ad.backward(obj.graph, obj.total, obj.pnodes)
                grad_values = [np.asarray(obj.graph.value(gid)) for gid in grads]
                loss_total += float(obj.graph.value(obj.total)) * len(idx)
                if obj.reg is not None:
                    reg_total += float(obj.graph.value(obj.reg)) * len(idx)
                params = sgd_step(params, grad_values, cfg.lr)
                step_index += 1
            losses.append(loss_total / n)
            regs.append(reg_total / n)
            cleans.append(md.accuracy(params, dataset.images, dataset.labels))
            row = [epoch, losses[-1], regs[-1], cleans[-1]]
            if robust_metrics:
                k = min(robust_sample, n)
                adv = pgd(params, dataset.images[:k], dataset.labels[:k], eval_cfg)
                robusts.append(
                    float(np.mean(md.predict(params, adv) == dataset.labels[:k]))
                )
                row.append(robusts[-1])
            if writer is not None:
                writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()

    metrics = TrainMetrics(
        tuple(losses), tuple(regs), tuple(cleans),
        tuple(robusts) if robust_metrics else None,
    )
    return params, metrics
