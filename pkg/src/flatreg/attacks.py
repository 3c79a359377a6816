"""White-box ℓ∞ attacks: single-step sign, iterated projected sign, and the
momentum variant with per-sample 1-norm gradient normalization.

All three perturb within B_∞(x, ε) ∩ [0,1]^d. Gradients come from the
summed cross-entropy, so each row of the batch gradient is that sample's
exact loss gradient and the iterates of a batched call match per-sample
calls. Parameters enter the tape as constants — attacks never differentiate
through θ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md
from .rng import named_stream

ATTACK_NAMES = ("fgsm", "pgd", "mifgsm")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step: float = 0.01
    iters: int = 40
    mu: float = 1.0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")
        if self.iters > 0 and not self.step > 0:
            raise ValueError(f"step must be > 0 when iters > 0, got {self.step}")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"momentum decay must lie in [0, 1], got {self.mu}")


def project_box_linf(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into [x_orig−ε, x_orig+ε] ∩ [0,1], coordinatewise."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise ad.ShapeMismatch(
            f"project_box_linf: shapes {x_adv.shape} and {x_orig.shape} differ"
        )
    lo = np.maximum(x_orig - epsilon, 0.0)
    hi = np.minimum(x_orig + epsilon, 1.0)
    return np.clip(x_adv, lo, hi)


def loss_input_gradient(params: md.ModelParams, x: np.ndarray, y) -> np.ndarray:
    """Per-sample gradient rows of the cross-entropy at x (b×d array)."""
    g = ad.Graph()
    xn = g.leaf(x)
    logits = md.forward_logits(params, xn, g)
    loss = md.cross_entropy_sum(g, logits, y)
    (gx,) = ad.backward(g, loss, [xn])
    return np.array(g.value(gx))


def _start_point(x: np.ndarray, cfg: AttackConfig, start_offset: int) -> np.ndarray:
    if not cfg.random_start or cfg.epsilon == 0.0:
        return x.copy()
    rng = named_stream(cfg.seed, f"attack.start@{start_offset}")
    noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    return project_box_linf(x + noise, x, cfg.epsilon)


def fgsm(params: md.ModelParams, x: np.ndarray, y, epsilon: float) -> np.ndarray:
    """x + ε·sign(∇ₓL), clamped to [0,1]; sign(0) moves nothing."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    grad = loss_input_gradient(params, x, y)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def pgd(
    params: md.ModelParams,
    x: np.ndarray,
    y,
    cfg: AttackConfig,
    start_offset: int = 0,
) -> np.ndarray:
    """Iterated sign ascent on the loss, re-projected every step."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = _start_point(x, cfg, start_offset)
    for _ in range(cfg.iters):
        grad = loss_input_gradient(params, x_adv, y)
        x_adv = project_box_linf(x_adv + cfg.step * np.sign(grad), x, cfg.epsilon)
    return x_adv


def mi_fgsm(
    params: md.ModelParams,
    x: np.ndarray,
    y,
    cfg: AttackConfig,
    start_offset: int = 0,
) -> np.ndarray:
    """Momentum variant: accumulate per-sample 1-norm-normalized gradients.

    Rows with an exactly zero gradient skip the normalization and feed the
    raw (zero) gradient into the momentum buffer.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = _start_point(x, cfg, start_offset)
    momentum = np.zeros_like(x)
    for _ in range(cfg.iters):
        grad = loss_input_gradient(params, x_adv, y)
        norms = np.abs(grad).sum(axis=1, keepdims=True)
        scaled = np.divide(grad, norms, out=grad.copy(), where=norms > 0)
        momentum = cfg.mu * momentum + scaled
        x_adv = project_box_linf(x_adv + cfg.step * np.sign(momentum), x, cfg.epsilon)
    return x_adv


def run_attack(
    name: str,
    params: md.ModelParams,
    x: np.ndarray,
    y,
    cfg: AttackConfig,
    start_offset: int = 0,
) -> np.ndarray:
    if name == "fgsm":
        return fgsm(params, x, y, cfg.epsilon)
    if name == "pgd":
        return pgd(params, x, y, cfg, start_offset)
    if name == "mifgsm":
        return mi_fgsm(params, x, y, cfg, start_offset)
    raise ValueError(f"unknown attack {name!r} (choose from {ATTACK_NAMES})")


def adversarial_accuracy(
    params: md.ModelParams,
    x: np.ndarray,
    y,
    name: str,
    cfg: AttackConfig,
    chunk: int = 250,
) -> dict:
    """Accuracy under attack, chunked to bound tape size; JSON-ready report."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    correct = 0
    for lo in range(0, x.shape[0], chunk):
        hi = min(lo + chunk, x.shape[0])
        x_adv = run_attack(name, params, x[lo:hi], y[lo:hi], cfg, start_offset=lo)
        correct += int(np.sum(md.predict(params, x_adv) == y[lo:hi]))
    n = x.shape[0]
    return {
        "attack": name,
        "eps": cfg.epsilon,
        "n": n,
        "correct": correct,
        "accuracy": correct / n,
    }
