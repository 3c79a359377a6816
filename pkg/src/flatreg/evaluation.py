"""Model evaluation: robustness tables, local-flatness estimation, surface
grids for plotting, and the regularization-strength sweep.

The flatness estimator samples the perturbation ball, so it reports a LOWER
bound of the true ball maximum; comparisons between models are only
meaningful under identical estimator settings (same ε, sample count, seed,
and inner ascent), which every caller here enforces by sharing one config.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import model as md
from .attacks import (
    AttackConfig,
    adversarial_accuracy,
    loss_input_gradient,
    project_box_linf,
)
from .data import Dataset
from .rng import derive_seed, named_stream
from .training import TrainConfig, inner_max_flatness, train

# ---------------------------------------------------------------------------
# local flatness: max ||dL/dx||_1 over the perturbation ball


def ball_samples(x: np.ndarray, epsilon: float, n: int, seed: int) -> np.ndarray:
    """n uniform draws from B_∞(x, ε) ∩ [0,1]^d.

    The intersection is a product of per-coordinate intervals, so sampling
    each coordinate uniformly on its interval is exactly uniform on the set
    (no clipping bias). ε=0 returns n copies of x bit for bit.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64).ravel()
    lo = np.maximum(x - epsilon, 0.0)
    hi = np.minimum(x + epsilon, 1.0)
    rng = named_stream(seed, "flatness.ball")
    return lo[None, :] + rng.uniform(0.0, 1.0, size=(n, x.size)) * (hi - lo)[None, :]


def flatness_lower_bound(
    grad_fn,
    x: np.ndarray,
    epsilon: float,
    n_random: int = 64,
    seed: int = 0,
    extra_points: np.ndarray | None = None,
) -> float:
    """max ||grad_fn||_1 over {x} ∪ extra_points ∪ uniform ball samples.

    grad_fn maps an n×d batch to n×d gradient rows. Any sampled maximum
    under-estimates the ball supremum, hence "lower bound".
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    chunks = [x[None, :]]
    if extra_points is not None:
        chunks.append(np.asarray(extra_points, dtype=np.float64).reshape(-1, x.size))
    if epsilon > 0 and n_random > 0:
        chunks.append(ball_samples(x, epsilon, n_random, seed))
    grads = np.asarray(grad_fn(np.concatenate(chunks, axis=0)), dtype=np.float64)
    return float(np.abs(grads).sum(axis=1).max())


def _net_grad_fn(params: md.ModelParams, y: int, chunk: int = 2048):
    def fn(points):
        out = np.empty_like(points)
        for lo in range(0, len(points), chunk):
            hi = min(lo + chunk, len(points))
            out[lo:hi] = loss_input_gradient(params, points[lo:hi], np.full(hi - lo, y))
        return out

    return fn


def estimate_flatness(
    params: md.ModelParams,
    x: np.ndarray,
    y: int,
    epsilon: float,
    inner_cfg: AttackConfig | None = None,
    n_random: int = 64,
    seed: int = 0,
) -> float:
    """Sampled estimate (lower bound) of the ball maximum of ‖∂ₓL‖₁.

    Candidate points: x itself, the inner sign-ascent trajectory when
    inner_cfg is given (usually the best candidates), and n_random uniform
    ball samples. ε=0 collapses every candidate to x, so the estimate is
    the point gradient norm exactly.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    extra = None
    if inner_cfg is not None and epsilon > 0 and inner_cfg.iters > 0:
        _, traj = inner_max_flatness(
            params,
            x[None, :],
            np.array([y]),
            replace(inner_cfg, epsilon=epsilon),
            return_trajectory=True,
        )
        extra = np.concatenate([p.reshape(1, -1) for p in traj], axis=0)
    return flatness_lower_bound(
        _net_grad_fn(params, y), x, epsilon, n_random, seed, extra_points=extra
    )


def nested_flatness(
    params: md.ModelParams,
    x: np.ndarray,
    y: int,
    radii,
    n_random: int = 64,
    seed: int = 0,
) -> list[float]:
    """Estimates at several radii, monotone in the radius by construction.

    One sample set is drawn in the largest ball and projected into every
    ball; all rows are evaluated in a single pass, and each radius takes
    the maximum over its prefix of rows (x, then each projected block).
    Supersets of the same computed numbers make the estimates monotone in
    ε exactly — evaluating each radius separately would not, because BLAS
    batching perturbs last bits with batch composition.
    """
    radii = [float(r) for r in radii]
    if not radii or radii != sorted(radii) or radii[0] < 0:
        raise ValueError("radii must be sorted ascending and >= 0")
    x = np.asarray(x, dtype=np.float64).ravel()
    base = ball_samples(x, radii[-1], n_random, seed)
    centers = np.tile(x, (len(base), 1))
    blocks = [x[None, :]]
    blocks += [project_box_linf(base, centers, r) for r in radii]
    grads = _net_grad_fn(params, y)(np.concatenate(blocks, axis=0))
    norms = np.abs(grads).sum(axis=1)
    return [
        float(norms[: 1 + (k + 1) * len(base)].max()) for k in range(len(radii))
    ]


def mean_flatness(
    params: md.ModelParams,
    xs: np.ndarray,
    ys,
    epsilon: float,
    inner_cfg: AttackConfig | None = None,
    n_random: int = 64,
    seed: int = 0,
) -> float:
    """Mean single-sample estimate over a batch, one derived seed per sample."""
    ys = np.asarray(ys)
    vals = [
        estimate_flatness(
            params, xs[i], int(ys[i]), epsilon, inner_cfg, n_random,
            derive_seed(seed, f"flatness.{i}"),
        )
        for i in range(len(xs))
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# robustness table


@dataclass(frozen=True)
class EvalReport:
    """Accuracy of each model under each attack, with the configs embedded."""

    rows: tuple[dict, ...]
    configs: dict

    def __post_init__(self):
        for row in self.rows:
            if not 0 <= row["accuracy"] <= 1:
                raise ValueError(f"accuracy out of range in row {row}")
            if row["n"] > 0 and row["accuracy"] != row["correct"] / row["n"]:
                raise ValueError(f"accuracy != correct/n in row {row}")

    def to_json(self) -> str:
        return json.dumps(
            {"rows": list(self.rows), "configs": self.configs},
            indent=2,
            sort_keys=True,
        )

    def to_text(self) -> str:
        """Aligned table: one row per model, one column per attack."""
        models = list(dict.fromkeys(r["model"] for r in self.rows))
        attacks = list(dict.fromkeys(r["attack"] for r in self.rows))
        cell = {(r["model"], r["attack"]): r["accuracy"] for r in self.rows}
        name_w = max(len("model"), max(len(m) for m in models))
        col_w = max(8, max(len(a) for a in attacks) + 1)
        lines = ["model".ljust(name_w) + "".join(a.rjust(col_w) for a in attacks)]
        for m in models:
            vals = "".join(f"{100.0 * cell[m, a]:{col_w - 1}.2f}%" for a in attacks)
            lines.append(m.ljust(name_w) + vals)
        return "\n".join(lines) + "\n"


def standard_attack_suite(
    epsilon: float = 0.3,
    step: float = 0.01,
    iters: int = 40,
    seed: int = 0,
    random_start: bool = False,
    mu: float = 1.0,
) -> list[tuple[str, str, AttackConfig]]:
    """(label, attack kind, config) triples: clean, FGSM, PGD, MI-FGSM.

    The clean row runs PGD with ε=0, which provably returns x bit for bit —
    a random start in a zero-radius ball is still x.
    """
    base = AttackConfig(
        epsilon=epsilon, step=step, iters=iters, mu=mu,
        random_start=random_start, seed=seed,
    )
    return [
        ("clean", "pgd", replace(base, epsilon=0.0)),
        ("fgsm", "fgsm", base),
        (f"pgd{iters}", "pgd", base),
        ("mifgsm", "mifgsm", base),
    ]


def robustness_table(
    models, dataset: Dataset, attacks: list[tuple[str, str, AttackConfig]]
) -> EvalReport:
    """Evaluate every model under every attack on the given split.

    models: mapping name → ModelParams (or an iterable of such pairs).
    attacks: (label, kind, config) triples as from standard_attack_suite.
    """
    pairs = list(models.items()) if isinstance(models, dict) else list(models)
    if not pairs:
        raise ValueError("need at least one model")
    if not attacks:
        raise ValueError("need at least one attack")
    dim = dataset.images.shape[1]
    for name, params in pairs:
        if params.arch.input_dim != dim:
            raise ValueError(
                f"model {name!r} expects {params.arch.input_dim} inputs, "
                f"dataset has {dim}"
            )
    rows = []
    for name, params in pairs:
        for label, kind, cfg in attacks:
            res = adversarial_accuracy(params, dataset.images, dataset.labels, kind, cfg)
            rows.append(
                {
                    "model": name,
                    "attack": label,
                    "kind": kind,
                    "eps": cfg.epsilon,
                    "n": res["n"],
                    "correct": res["correct"],
                    "accuracy": res["accuracy"],
                }
            )
    configs = {
        label: {
            "kind": kind,
            "epsilon": cfg.epsilon,
            "step": cfg.step,
            "iters": cfg.iters,
            "mu": cfg.mu,
            "random_start": cfg.random_start,
            "seed": cfg.seed,
        }
        for label, kind, cfg in attacks
    }
    return EvalReport(rows=tuple(rows), configs=configs)


# ---------------------------------------------------------------------------
# surface grids


@dataclass(frozen=True)
class SurfaceGrid:
    """Values of L̂ or L on a 2-D slice through one sample.

    direction1 is the adversarial sign direction at the center, direction2
    a seeded random sign direction; offsets (k−c)·(range/c) are symmetric
    about the center cell, so a 2×-refined grid contains the coarse grid's
    points (and values) exactly.
    """

    center_index: int
    label: int
    kind: str
    direction1: np.ndarray
    direction2: np.ndarray
    range: float
    resolution: int
    seed: int
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("decision", "loss"):
            raise ValueError(f"kind must be 'decision' or 'loss', got {self.kind!r}")
        if self.resolution < 21 or self.resolution % 2 == 0:
            raise ValueError(f"resolution must be odd and >= 21, got {self.resolution}")
        if self.range < 0:
            raise ValueError(f"range must be >= 0, got {self.range}")
        if self.values.shape != (self.resolution, self.resolution):
            raise ValueError(
                f"values shape {self.values.shape} does not match resolution"
            )
        for d in (self.direction1, self.direction2):
            if d.size and np.abs(d).max() > 1.0:
                raise ValueError("directions must have unit ∞-norm coordinates")

    def offsets(self) -> np.ndarray:
        c = (self.resolution - 1) // 2
        return (np.arange(self.resolution) - c) * (self.range / c)

    def peak_to_peak(self) -> float:
        return float(self.values.max() - self.values.min())


def _random_sign_direction(d1: np.ndarray, seed: int, max_draws: int = 20) -> np.ndarray:
    """Random ±1 vector, re-drawn while it matches d1's sign pattern on
    more than 95% of coordinates; as a last resort the agreeing coordinates
    are zeroed so the two directions can never collapse onto each other."""
    rng = named_stream(seed, "surface.dir2")
    for _ in range(max_draws):
        d2 = 2.0 * rng.integers(0, 2, size=d1.size).astype(np.float64) - 1.0
        if np.mean(d2 == d1) <= 0.95:
            return d2
    d2[d2 == d1] = 0.0
    return d2


def surface_grid(
    params: md.ModelParams,
    x: np.ndarray,
    y: int,
    kind: str = "decision",
    span: float = 0.4,
    resolution: int = 41,
    seed: int = 0,
    center_index: int = 0,
) -> SurfaceGrid:
    """Evaluate the decision value or loss on the slice x + u·d₁ + v·d₂.

    span is the grid half-width (the SurfaceGrid.range field). Grid points
    are clamped to [0,1]; the center cell (u=v=0) is the unperturbed
    sample, so its value equals the plain decision value/loss.
    """
    if resolution < 21 or resolution % 2 == 0:
        raise ValueError(f"resolution must be odd and >= 21, got {resolution}")
    x = np.asarray(x, dtype=np.float64).ravel()
    d1 = np.sign(loss_input_gradient(params, x[None, :], np.array([y]))[0])
    d2 = _random_sign_direction(d1, seed)
    c = (resolution - 1) // 2
    offs = (np.arange(resolution) - c) * (span / c)
    if span == 0.0:
        # one evaluation, replicated: rows of one BLAS batch are not
        # guaranteed bit-identical even for identical inputs
        logits = md.forward_logits_np(params, x[None, :])
        if kind == "decision":
            center = md.decision_value(logits[0], int(y))
        else:
            center = float(md.cross_entropy_np(logits, [int(y)])[0])
        values = np.full(resolution * resolution, center)
    else:
        pts = x[None, None, :] + offs[:, None, None] * d1[None, None, :]
        pts = pts + offs[None, :, None] * d2[None, None, :]
        pts = np.clip(pts.reshape(-1, x.size), 0.0, 1.0)
        values = np.empty(pts.shape[0])
        labels = np.full(pts.shape[0], y)
        for lo in range(0, pts.shape[0], 2048):
            hi = min(lo + 2048, pts.shape[0])
            logits = md.forward_logits_np(params, pts[lo:hi])
            if kind == "decision":
                values[lo:hi] = md.decision_values(logits, labels[lo:hi])
            else:
                values[lo:hi] = md.cross_entropy_np(logits, labels[lo:hi])
    return SurfaceGrid(
        center_index=center_index,
        label=int(y),
        kind=kind,
        direction1=d1,
        direction2=d2,
        range=float(span),
        resolution=resolution,
        seed=seed,
        values=values.reshape(resolution, resolution),
    )


def surface_to_csv(grid: SurfaceGrid) -> str:
    """Header row: v-offsets; first column: u-offsets; cells: values."""
    offs = grid.offsets()
    lines = ["u\\v," + ",".join("%.17g" % v for v in offs)]
    for i in range(grid.resolution):
        row = ",".join("%.17g" % val for val in grid.values[i])
        lines.append("%.17g,%s" % (offs[i], row))
    return "\n".join(lines) + "\n"


def write_surface(grid: SurfaceGrid, csv_path: str) -> str:
    """Write the grid CSV plus a JSON metadata sidecar; returns sidecar path."""
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(surface_to_csv(grid))
    sidecar = os.path.splitext(csv_path)[0] + ".json"
    meta = {
        "center_index": grid.center_index,
        "label": grid.label,
        "kind": grid.kind,
        "range": grid.range,
        "resolution": grid.resolution,
        "seed": grid.seed,
        "peak_to_peak": grid.peak_to_peak(),
        "direction1": [int(v) for v in grid.direction1],
        "direction2": [int(v) for v in grid.direction2],
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar


# ---------------------------------------------------------------------------
# regularization-strength sweep


def lambda_sweep(
    lambdas,
    dataset: Dataset,
    arch: md.Architecture,
    cfg: TrainConfig,
    eval_data: Dataset,
) -> list[dict]:
    """Train one flatness-regularized model per λ (shared seed) and score it.

    λ=0 builds the identical objective graph as plain training, so its row
    reproduces the unregularized baseline bit for bit.
    """
    lams = [float(v) for v in lambdas]
    if len(lams) < 3 or 0.0 not in lams:
        raise ValueError("need >= 3 lambda values including 0")
    if lams != sorted(lams):
        raise ValueError("lambda values must be sorted ascending")
    if lams[0] < 0:
        raise ValueError("lambda values must be >= 0")
    rows = []
    for lam in lams:
        params, _ = train(dataset, arch, replace(cfg, method="lfr", lam=lam))
        clean = md.accuracy(params, eval_data.images, eval_data.labels)
        rob = adversarial_accuracy(
            params, eval_data.images, eval_data.labels, "pgd", cfg.eval_attack
        )["accuracy"]
        rows.append({"lam": lam, "clean": clean, "robust": rob})
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    lines = ["lambda,clean_accuracy,robust_accuracy"]
    for r in rows:
        lines.append("%.17g,%.17g,%.17g" % (r["lam"], r["clean"], r["robust"]))
    return "\n".join(lines) + "\n"
