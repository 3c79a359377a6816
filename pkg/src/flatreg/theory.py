"""Executable checks of the geometric claims behind the training method.

Each check pairs a statement with an independent oracle computed by brute
force — dense grids in 2-D, vertex enumeration for the dual norm, segment
sampling for the mean-value inequality — so the assertions don't reuse the
code paths they are checking. Per the grid-oracle design, the additive
bound is only *asserted* on 2-D inputs where a dense grid truly dominates
the ball; at full input dimension any sampled maximum is a lower bound and
a "violation" would be meaningless.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as md
from .attacks import loss_input_gradient
from .rng import named_stream


@dataclass(frozen=True)
class BoundReport:
    """Outcome of a bound check over n evaluation points.

    min_slack is the smallest (bound − observed) across points: ≥ 0 means
    the bound held everywhere, ≈ 0 means it was tight somewhere.
    """

    samples: int
    violations: int
    min_slack: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.violations <= self.samples:
            raise ValueError(
                f"violations ({self.violations}) must lie in [0, {self.samples}]"
            )

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# additive flatness bound: L(x') <= L(x) + eps * max-over-ball ||dL/dx||_1


def additive_bound_report(
    loss_fn,
    grad_fn,
    x: np.ndarray,
    epsilon: float,
    resolution: int,
    tol: float = 1e-9,
) -> BoundReport:
    """Dense-grid check of the additive bound around a 2-D point.

    loss_fn maps an n×2 batch to n losses; grad_fn maps it to n×2 gradients.
    The grid plays the oracle: gamma is its maximum gradient 1-norm, and the
    bound is then asserted at every grid point.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (2,):
        raise ValueError(f"dense-grid check needs a 2-D center, got shape {x.shape}")
    if resolution < 101:
        raise ValueError(f"resolution must be >= 101, got {resolution}")
    offsets = np.linspace(-epsilon, epsilon, resolution)
    uu, vv = np.meshgrid(offsets, offsets, indexing="ij")
    points = x[None, :] + np.stack([uu.ravel(), vv.ravel()], axis=1)
    losses = np.asarray(loss_fn(points), dtype=np.float64)
    grads = np.asarray(grad_fn(points), dtype=np.float64)
    gamma = np.abs(grads).sum(axis=1).max()
    center_loss = float(loss_fn(x[None, :])[0])
    bound = center_loss + epsilon * gamma
    slack = bound - losses
    return BoundReport(
        samples=points.shape[0],
        violations=int(np.sum(slack < -tol)),
        min_slack=float(slack.min()),
        params={"epsilon": epsilon, "resolution": resolution, "gamma": float(gamma)},
    )


def _toy_net_and_center(seed: int, epsilon: float):
    params = md.init_params(md.Architecture((2, 16, 2)), seed)
    rng = named_stream(seed, "thm1.center")
    lo = min(epsilon, 0.5)
    x = lo + (1.0 - 2.0 * lo) * rng.uniform(0.0, 1.0, size=2)
    y = int(rng.integers(0, 2))
    return params, x, y


def _net_loss_fn(params: md.ModelParams, y: int):
    def fn(points):
        logits = md.forward_logits_np(params, points)
        return md.cross_entropy_np(logits, np.full(len(points), y))

    return fn


def _net_grad_fn(params: md.ModelParams, y: int, chunk: int = 8192):
    def fn(points):
        out = np.empty_like(points)
        for lo in range(0, len(points), chunk):
            hi = min(lo + chunk, len(points))
            out[lo:hi] = loss_input_gradient(
                params, points[lo:hi], np.full(hi - lo, y)
            )
        return out

    return fn


def check_theorem1_toy(resolution: int, seed: int, epsilon: float = 0.3) -> BoundReport:
    """Additive bound on a random 2→16→2 softplus net, dense-grid oracle.

    The center is drawn so the whole ε-ball stays inside the pixel box.
    """
    params, x, y = _toy_net_and_center(seed, epsilon)
    report = additive_bound_report(
        _net_loss_fn(params, y), _net_grad_fn(params, y), x, epsilon, resolution
    )
    report.params.update({"seed": seed, "label": y, "center": x.tolist()})
    return report


# ---------------------------------------------------------------------------
# dual norm: max_{||a||_p <= 1} a.b == ||b||_q


def dual_norm_check(beta: np.ndarray, p) -> tuple[float, float]:
    """(maximizer value, closed-form dual norm) — equal up to rounding.

    The maximizer is the textbook one: sign vector for p=∞, best single
    coordinate for p=1, the normalized vector itself for p=2. β=0 gives
    (0, 0).
    """
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if p == np.inf or p == "inf":
        alpha = np.sign(beta)
        closed = float(np.abs(beta).sum())
    elif p == 1:
        alpha = np.zeros_like(beta)
        if beta.any():
            i = int(np.argmax(np.abs(beta)))
            alpha[i] = np.sign(beta[i])
        closed = float(np.abs(beta).max()) if beta.size else 0.0
    elif p == 2:
        nrm = float(np.sqrt(np.sum(beta * beta)))
        alpha = beta / nrm if nrm > 0 else np.zeros_like(beta)
        closed = nrm
    else:
        raise ValueError(f"p must be 1, 2, or inf, got {p!r}")
    return float(alpha @ beta), closed


def dual_norm_vertex_bruteforce(beta: np.ndarray) -> float:
    """max α·β over all 2^d sign vertices of the ℓ∞ unit ball (p=∞ oracle)."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    d = beta.size
    if d > 20:
        raise ValueError(f"vertex enumeration over 2^{d} corners is not sensible")
    best = -np.inf
    for bits in range(2 ** d):
        signs = np.array([1.0 if bits >> i & 1 else -1.0 for i in range(d)])
        best = max(best, float(signs @ beta))
    return best


# ---------------------------------------------------------------------------
# quadratic residual scaling of the sign-step expansion


def residual_slope(eps_values: np.ndarray, residuals: np.ndarray, floor: float = 1e-14):
    """Least-squares slope of log residual vs log ε, dropping floor points.

    Points below the rounding floor carry no scaling information; at least
    4 must survive for a meaningful fit.
    """
    eps_values = np.asarray(eps_values, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    keep = residuals > floor
    if keep.sum() < 4:
        raise ValueError(
            f"only {int(keep.sum())} residuals above the {floor} floor; need >= 4"
        )
    slope = np.polyfit(np.log(eps_values[keep]), np.log(residuals[keep]), 1)[0]
    return float(slope)


def _validate_eps_list(eps_values: np.ndarray) -> np.ndarray:
    eps_values = np.asarray(eps_values, dtype=np.float64)
    if eps_values.size < 4 or eps_values.min() <= 0:
        raise ValueError("need >= 4 positive epsilon values")
    if eps_values.max() > 0.1:
        raise ValueError("epsilon values must stay <= 0.1 (expansion regime)")
    if np.log10(eps_values.max() / eps_values.min()) < 1.5:
        raise ValueError("epsilon values must span at least 1.5 decades")
    return eps_values


def check_theorem3(params: md.ModelParams, x: np.ndarray, y: int, eps_values) -> float:
    """Slope of the sign-step expansion residual for one sample.

    residual(ε) = |L(x + ε·sign(∇ₓL)) − L(x) − ε·‖∇ₓL‖₁|; a smooth loss
    leaves only the curvature term, so the log-log slope sits near 2.
    """
    eps_values = _validate_eps_list(eps_values)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    labels = np.array([y])
    grad = loss_input_gradient(params, x, labels)[0]
    gnorm1 = np.abs(grad).sum()
    base = float(md.cross_entropy_np(md.forward_logits_np(params, x), labels)[0])
    direction = np.sign(grad)
    residuals = np.empty(eps_values.size)
    for i, eps in enumerate(eps_values):
        pert = x + eps * direction[None, :]
        loss = float(md.cross_entropy_np(md.forward_logits_np(params, pert), labels)[0])
        residuals[i] = abs(loss - base - eps * gnorm1)
    return residual_slope(eps_values, residuals)


def check_theorem3_mean(
    params: md.ModelParams, xs: np.ndarray, ys, eps_values
) -> tuple[float, list[float]]:
    """Mean slope over a batch of samples (skipping rounding-floor failures)."""
    slopes = []
    ys = np.asarray(ys)
    for i in range(len(xs)):
        try:
            slopes.append(check_theorem3(params, xs[i], int(ys[i]), eps_values))
        except ValueError:
            continue
    if not slopes:
        raise ValueError("no sample produced enough residuals above the floor")
    return float(np.mean(slopes)), slopes


def relu_kink_probe(
    seed: int, delta: float = 1e-4, boost: float = 8.0
) -> tuple[md.ModelParams, np.ndarray, int]:
    """A ReLU net/sample pair on which the quadratic-residual check must fail.

    Random small ReLU nets usually pass the slope-2 check anyway: the
    smooth softmax supplies genuine curvature and hinge crossings average
    out. The non-smoothness only bites when a hinge sits on the probe ray
    inside the ε range, so this builder puts one there: it deactivates one
    hidden unit at x, re-reads the probe direction, then sets the unit's
    bias so its boundary lies ``delta`` along the ray (and scales the
    unit's outgoing weights so the gradient jump dominates). The residual
    is then Θ(ε) rather than O(ε²), and the fitted slope lands near 1.
    """
    params = md.init_params(md.Architecture((2, 16, 2), "relu"), seed)
    rng = named_stream(seed, "thm3.negative")
    x = 0.3 + 0.4 * rng.uniform(0.0, 1.0, size=2)
    y = int(rng.integers(0, 2))
    w1 = np.array(params.weights[0])
    b1 = np.array(params.biases[0])
    w2 = np.array(params.weights[1])
    b2 = np.array(params.biases[1])

    j = int(rng.integers(0, w1.shape[0]))
    b1[j] = -float(w1[j] @ x) - 1.0  # force the unit inactive at x
    probe = md.ModelParams(params.arch, (w1.copy(), w2.copy()), (b1.copy(), b2), 0)
    direction = np.sign(loss_input_gradient(probe, x.reshape(1, -1), [y])[0])
    rate = float(w1[j] @ direction)
    if rate == 0.0:
        raise ValueError(f"seed {seed}: probe direction orthogonal to the host unit")
    if rate < 0.0:
        w1[j] = -w1[j]  # inactive unit: mirroring it changes nothing at x
        rate = -rate
    # boundary crossing at exactly delta along the ray, still inactive at x
    b1[j] = -float(w1[j] @ x) - delta * rate
    w2[:, j] *= boost
    return md.ModelParams(params.arch, (w1, w2), (b1, b2), 0), x, y


# ---------------------------------------------------------------------------
# segment mean-value inequality


def segment_bound_report(
    loss_fn,
    grad_fn,
    pairs: np.ndarray,
    samples_per_segment: int = 100,
    tol: float = 1e-9,
) -> BoundReport:
    """|L(x₁)−L(x₂)| ≤ (segment max of ‖∇L‖₁)·‖x₁−x₂‖∞ + tol for each pair.

    pairs has shape n×2×d. The segment maximum is itself sampled (the
    gradient between sample points could in principle peak higher), so this
    is exactly as strong as the mean-value argument it mirrors — smooth
    losses pass with a hairline tolerance.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    n = pairs.shape[0]
    ts = np.linspace(0.0, 1.0, samples_per_segment)
    violations = 0
    min_slack = np.inf
    for i in range(n):
        x1, x2 = pairs[i, 0], pairs[i, 1]
        seg = x1[None, :] + ts[:, None] * (x2 - x1)[None, :]
        gamma_seg = np.abs(grad_fn(seg)).sum(axis=1).max()
        ends = np.stack([x1, x2])
        l1, l2 = np.asarray(loss_fn(ends), dtype=np.float64)
        lhs = abs(l1 - l2)
        rhs = gamma_seg * np.abs(x1 - x2).max()
        slack = rhs + tol - lhs
        if slack < 0:
            violations += 1
        min_slack = min(min_slack, rhs - lhs)
    return BoundReport(
        samples=n,
        violations=violations,
        min_slack=float(min_slack),
        params={"samples_per_segment": samples_per_segment},
    )


def check_lemma2_segment(
    params: md.ModelParams,
    x: np.ndarray,
    y: int,
    epsilon: float,
    n_pairs: int,
    seed: int,
) -> BoundReport:
    """Mean-value inequality on random pairs inside B_∞(x, ε)."""
    if n_pairs < 100:
        raise ValueError(f"need >= 100 pairs, got {n_pairs}")
    x = np.asarray(x, dtype=np.float64).ravel()
    rng = named_stream(seed, "lemma2.pairs")
    noise = rng.uniform(-epsilon, epsilon, size=(n_pairs, 2, x.size))
    pairs = x[None, None, :] + noise
    report = segment_bound_report(_net_loss_fn(params, y), _net_grad_fn(params, y), pairs)
    report.params.update({"epsilon": epsilon, "seed": seed, "n_pairs": n_pairs})
    return report
