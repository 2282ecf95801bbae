"""Margin estimation: linearized bounds and iterative boundary search.

Two families of estimators live here. ``taylor_margin`` evaluates the
first-order lower bound (f_i - f_j) / ||grad(f_i - f_j)|| in closed form.
The ``deepfool_*`` functions run the iterative search that repeatedly steps
toward the nearest linearized decision boundary, tracking the best violation
seen so far; constrained variants restrict the perturbation to the span of
the leading principal directions while still measuring distance in the
original space. The total-variation helpers normalize hidden-layer margins
so that values from layers of different scale become comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DegenerateGradientError,
    DegenerateVarianceError,
    DomainError,
    UnreachableSubspaceError,
)
from .nnet import Network, forward_batch, logit_diffs_all_batch
from .pca import PcaModel

_DEGENERATE = 1e-12
_SPAN_TOL = 1e-9


class SearchStatus(str, Enum):
    """Why a boundary search stopped."""

    CONVERGED = "converged"
    VIOLATION_ROSE = "violation-rose"
    MAX_ITERS = "max-iters"
    NO_DESCENT = "no-descent"


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the iterative boundary search.

    ``learning_rate`` scales each step toward the nearest linearized
    boundary; ``stop_tolerance`` is the distance-stabilization threshold;
    ``equality_threshold`` is the violation level below which a returned
    point is considered to lie on the boundary (used for reporting, not for
    stopping). ``bounds``, when given as (lower, upper) arrays, clips
    input-space iterates to the data box; hidden-layer searches never clip.
    """

    learning_rate: float = 0.25
    stop_tolerance: float = 0.01
    max_iters: int = 100
    equality_threshold: float = 1e-3
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    batch_mode: bool = False

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise DomainError(f"learning_rate must lie in (0, 1], got "
                              f"{self.learning_rate}")
        if self.stop_tolerance <= 0.0:
            raise DomainError("stop_tolerance must be positive")
        if self.max_iters < 1:
            raise DomainError("max_iters must be at least 1")
        if self.equality_threshold <= 0.0:
            raise DomainError("equality_threshold must be positive")


@dataclass(frozen=True)
class MarginResult:
    """Outcome of one margin estimate.

    ``d_best`` is the distance to the best near-boundary iterate found
    (for the closed-form estimators, the linearized distance itself, which
    can be negative when measured from the true class of a misclassified
    sample). ``v_best`` is the logit gap |f_i - f_j| at that iterate —
    ``inf`` when no iterate was ever accepted. ``steps`` counts accepted
    updates. ``trace`` (opt-in) lists (distance, violation) per accepted
    iterate, in order.
    """

    d_best: float
    v_best: float
    class_pair: tuple[int, int]
    steps: int
    status: SearchStatus
    boundary_point: np.ndarray | None = None
    left_subspace: bool = False
    trace: list[tuple[float, float]] | None = None


# ---------------------------------------------------------------------------
# shared pieces


def _resolve_bounds(net: Network, lam: int, cfg: SearchConfig):
    """Clipping box for input-space searches; None when nothing applies."""
    if lam != 0:
        return None
    if cfg.bounds is not None:
        lower = np.asarray(cfg.bounds[0], dtype=np.float64)
        upper = np.asarray(cfg.bounds[1], dtype=np.float64)
    elif net.norm_meta is not None:
        lower = np.asarray(net.norm_meta.lower, dtype=np.float64)
        upper = np.asarray(net.norm_meta.upper, dtype=np.float64)
    else:
        return None
    if lower.shape != (net.input_dim,) or upper.shape != (net.input_dim,):
        raise DomainError("clip bounds do not match the input dimension")
    if np.any(lower >= upper):
        raise DomainError("clip bounds require lower < upper everywhere")
    return lower, upper


def _head(net: Network, lam: int, X: np.ndarray, base: np.ndarray,
          projector: np.ndarray | None):
    """Logit gaps, step geometry, and logits at the current iterates.

    With a projector P (rows orthonormal), gradients are projected before
    norms are taken, so both the nearest-boundary choice and the step length
    are made inside the subspace.
    """
    o, W, logits = logit_diffs_all_batch(net, lam, X, base)
    Wp = W @ projector.T if projector is not None else W
    norms = np.linalg.norm(Wp, axis=2)
    return o, W, Wp, norms, logits


def _choose(o: np.ndarray, norms: np.ndarray, base: np.ndarray):
    """Index of the nearest linearized boundary per row; inf-only rows are
    degenerate (no usable descent direction)."""
    ratios = np.where(norms < _DEGENERATE, np.inf,
                      np.abs(o) / np.maximum(norms, _DEGENERATE))
    ratios[np.arange(o.shape[0]), base] = np.inf
    return np.argmin(ratios, axis=1), np.all(np.isinf(ratios), axis=1)


def _runner_up(logits: np.ndarray, base: np.ndarray) -> np.ndarray:
    masked = logits.copy()
    masked[np.arange(logits.shape[0]), base] = -np.inf
    return np.argmax(masked, axis=1)


def _based_head(net, lam, X, projector):
    """First head evaluation: the base class is the argmax at the start."""
    s = X.shape[0]
    o, W, logits = logit_diffs_all_batch(net, lam, X, np.zeros(s, dtype=np.int64))
    base = np.argmax(logits, axis=1)
    if np.any(base != 0):
        o, W, logits = logit_diffs_all_batch(net, lam, X, base)
    Wp = W @ projector.T if projector is not None else W
    norms = np.linalg.norm(Wp, axis=2)
    return base, o, W, Wp, norms, logits


def _left_subspace(perturbation: np.ndarray, projector: np.ndarray) -> bool:
    residual = perturbation - (perturbation @ projector.T) @ projector
    return bool(np.linalg.norm(residual) > _SPAN_TOL)


# ---------------------------------------------------------------------------
# closed-form estimators


def taylor_margin(net: Network, lam: int, x_lam: np.ndarray,
                  target_class: int | None = None,
                  base_class: int | None = None,
                  second_highest: bool = False) -> MarginResult:
    """First-order margin (f_i - f_j) / ||grad(f_i - f_j)|| at one point.

    By default i is the predicted class and the minimum is taken over all
    competitors. ``target_class`` pins the competitor; ``second_highest``
    restricts it to the runner-up logit; ``base_class`` measures from a
    chosen class instead of the prediction (negative for misclassified
    samples). Competitor pairs whose gradient difference vanishes cannot be
    reached by a first-order step and are skipped; if every candidate is
    degenerate this raises DegenerateGradientError.
    """
    x = np.asarray(x_lam, dtype=np.float64).reshape(-1)
    o, W, logits = logit_diffs_all_batch(net, lam, x[None, :],
                                         np.zeros(1, dtype=np.int64))
    if base_class is not None:
        if not 0 <= base_class < net.num_classes:
            raise DomainError(f"base class {base_class} outside "
                              f"[0, {net.num_classes})")
        i = int(base_class)
    else:
        i = int(np.argmax(logits[0]))
    if i != 0:
        o, W, logits = logit_diffs_all_batch(net, lam, x[None, :],
                                             np.array([i], dtype=np.int64))
    norms = np.linalg.norm(W[0], axis=1)

    if target_class is not None:
        if not 0 <= target_class < net.num_classes or target_class == i:
            raise DomainError(f"target class {target_class} is not a "
                              f"competitor of class {i}")
        candidates = [int(target_class)]
    elif second_highest:
        candidates = [int(_runner_up(logits, np.array([i]))[0])]
    else:
        candidates = [j for j in range(net.num_classes) if j != i]

    best_d = None
    best_j = None
    for j in candidates:
        if norms[j] < _DEGENERATE:
            continue
        d = o[0, j] / norms[j]
        if best_d is None or d < best_d:
            best_d, best_j = d, j
    if best_d is None:
        raise DegenerateGradientError(
            "every candidate logit-difference gradient vanishes at this point")
    return MarginResult(d_best=float(best_d), v_best=float(abs(o[0, best_j])),
                        class_pair=(i, best_j), steps=0,
                        status=SearchStatus.CONVERGED)


def constrained_taylor_margin(net: Network, x: np.ndarray, pca: PcaModel,
                              m: int) -> MarginResult:
    """First-order margin with the perturbation restricted to the span of
    the top ``m`` principal directions; distance is measured in the
    original input space. If no competitor's gradient has a component
    inside the subspace, the boundary is unreachable there and
    UnreachableSubspaceError is raised.
    """
    if not 1 <= m <= pca.components.shape[0]:
        raise DomainError(f"m={m} outside [1, {pca.components.shape[0]}]")
    P = pca.components[:m]
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    base, o, W, Wp, norms, logits = _based_head(net, 0, xv[None, :], P)
    i = int(base[0])

    best_d = None
    best_j = None
    for j in range(net.num_classes):
        if j == i or norms[0, j] < _DEGENERATE:
            continue
        d = o[0, j] / norms[0, j]
        if best_d is None or d < best_d:
            best_d, best_j = d, j
    if best_d is None:
        raise UnreachableSubspaceError(
            f"no decision boundary is reachable within the top-{m} subspace")
    return MarginResult(d_best=float(best_d), v_best=float(abs(o[0, best_j])),
                        class_pair=(i, best_j), steps=0,
                        status=SearchStatus.CONVERGED)


# ---------------------------------------------------------------------------
# iterative search


def _search_single(net: Network, lam: int, x0: np.ndarray, cfg: SearchConfig,
                   signed: bool, projector: np.ndarray | None,
                   collect_trace: bool) -> MarginResult:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    bounds = _resolve_bounds(net, lam, cfg)
    base_arr, o, W, Wp, norms, logits = _based_head(net, lam, x0[None, :],
                                                    projector)
    base = int(base_arr[0])

    d_best, v_best = 0.0, np.inf
    boundary = x0.copy()
    pair = (base, int(_runner_up(logits, base_arr)[0]))
    steps = 0
    trace: list[tuple[float, float]] | None = [] if collect_trace else None
    xhat = x0.copy()

    while True:
        l, degenerate = _choose(o, norms, base_arr)
        if degenerate[0]:
            status = SearchStatus.NO_DESCENT
            break
        j = int(l[0])
        coef = (o[0, j] if signed else abs(o[0, j])) / norms[0, j] ** 2
        direction = Wp[0, j] @ projector if projector is not None else W[0, j]
        xprop = xhat - cfg.learning_rate * coef * direction
        if bounds is not None:
            np.clip(xprop, bounds[0], bounds[1], out=xprop)

        o, W, Wp, norms, logits = _head(net, lam, xprop[None, :], base_arr,
                                        projector)
        runner = int(_runner_up(logits, base_arr)[0])
        v = float(abs(o[0, runner]))
        d = float(np.linalg.norm(x0 - xprop))
        if v >= v_best:
            status = SearchStatus.VIOLATION_ROSE
            break
        if abs(d - d_best) < cfg.stop_tolerance:
            status = SearchStatus.CONVERGED
            break
        d_best, v_best = d, v
        boundary = xprop.copy()
        pair = (base, runner)
        steps += 1
        if trace is not None:
            trace.append((d, v))
        xhat = xprop
        if steps >= cfg.max_iters:
            status = SearchStatus.MAX_ITERS
            break

    left = (_left_subspace(boundary - x0, projector)
            if projector is not None else False)
    return MarginResult(d_best=float(d_best), v_best=float(v_best),
                        class_pair=pair, steps=steps, status=status,
                        boundary_point=boundary, left_subspace=left,
                        trace=trace)


def _search_batch(net: Network, lam: int, X0: np.ndarray, cfg: SearchConfig,
                  signed: bool,
                  projector: np.ndarray | None = None) -> list[MarginResult]:
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    if X0.shape[0] < 1:
        raise DomainError("batch search needs at least one sample")
    s = X0.shape[0]
    bounds = _resolve_bounds(net, lam, cfg)
    base, o, W, Wp, norms, logits = _based_head(net, lam, X0, projector)

    d_best = np.zeros(s)
    v_best = np.full(s, np.inf)
    boundary = X0.copy()
    pair_j = _runner_up(logits, base)
    steps = np.zeros(s, dtype=np.int64)
    status = np.empty(s, dtype=object)
    frozen = np.zeros(s, dtype=bool)
    Xhat = X0.copy()
    d_cur = np.zeros(s)
    mean_prev = 0.0
    iters = 0

    while True:
        l, degenerate = _choose(o, norms, base)
        newly = degenerate & ~frozen
        status[newly] = SearchStatus.NO_DESCENT
        frozen |= newly
        active = ~frozen
        if not active.any():
            break
        rows = np.flatnonzero(active)
        jsel = l[rows]
        osel = o[rows, jsel]
        coef = (osel if signed else np.abs(osel)) / norms[rows, jsel] ** 2
        if projector is not None:
            dirs = Wp[rows, jsel] @ projector
        else:
            dirs = W[rows, jsel]
        Xhat[rows] = Xhat[rows] - cfg.learning_rate * coef[:, None] * dirs
        if bounds is not None:
            Xhat[rows] = np.clip(Xhat[rows], bounds[0], bounds[1])

        o, W, Wp, norms, logits = _head(net, lam, Xhat, base, projector)
        runner = _runner_up(logits, base)
        v = np.abs(o[np.arange(s), runner])
        d_cur[rows] = np.linalg.norm(X0[rows] - Xhat[rows], axis=1)
        improved = active & (v < v_best)
        v_best[improved] = v[improved]
        d_best[improved] = d_cur[improved]
        boundary[improved] = Xhat[improved]
        pair_j[improved] = runner[improved]
        iters += 1
        steps[active] = iters

        # the whole batch stops together, on stabilization of the mean distance
        mean_d = float(d_cur.mean())
        if abs(mean_d - mean_prev) < cfg.stop_tolerance:
            status[active] = SearchStatus.CONVERGED
            break
        mean_prev = mean_d
        if iters >= cfg.max_iters:
            status[active] = SearchStatus.MAX_ITERS
            break

    results = []
    for k in range(s):
        left = (_left_subspace(boundary[k] - X0[k], projector)
                if projector is not None else False)
        results.append(MarginResult(
            d_best=float(d_best[k]), v_best=float(v_best[k]),
            class_pair=(int(base[k]), int(pair_j[k])), steps=int(steps[k]),
            status=status[k], boundary_point=boundary[k].copy(),
            left_subspace=left))
    return results


def deepfool_margin(net: Network, lam: int, activ: np.ndarray,
                    cfg: SearchConfig, signed_step: bool = True,
                    collect_trace: bool = False) -> MarginResult:
    """Iterative boundary search from one activation vector at layer ``lam``.

    Steps use the signed logit gap by default, which lets the search walk
    back after overshooting the boundary.
    """
    return _search_single(net, lam, activ, cfg, signed_step, None,
                          collect_trace)


def deepfool_margin_batch(net: Network, lam: int, samples: np.ndarray,
                          cfg: SearchConfig,
                          signed_step: bool = True) -> list[MarginResult]:
    """Batched boundary search; one result per row of ``samples``.

    Unlike the single-sample mode, the only stopping rule is stabilization
    of the mean distance across the batch, so per-sample statuses report
    how each row stood when the batch stopped. Each result carries the
    smallest-violation iterate that row ever visited.
    """
    return _search_batch(net, lam, samples, cfg, signed_step)


def constrained_deepfool_margin(net: Network, x: np.ndarray, pca: PcaModel,
                                m: int, cfg: SearchConfig,
                                signed_step: bool = False,
                                collect_trace: bool = False) -> MarginResult:
    """Boundary search restricted to the span of the top ``m`` principal
    directions (input space only); distance is measured in the original
    space. Magnitude steps (|o|) are the default here. When clipping to the
    data box pushes the returned iterate off the subspace, the result's
    ``left_subspace`` flag records it.
    """
    if not 1 <= m <= pca.components.shape[0]:
        raise DomainError(f"m={m} outside [1, {pca.components.shape[0]}]")
    return _search_single(net, 0, x, cfg, signed_step, pca.components[:m],
                          collect_trace)


# ---------------------------------------------------------------------------
# total-variation normalization


def compute_total_variation(acts: np.ndarray) -> float:
    """sqrt of the summed per-feature population variance of ``acts``."""
    A = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    if A.shape[0] < 2:
        raise DomainError("total variation needs at least two samples")
    return float(np.sqrt(np.var(A, axis=0).sum()))


def tv_normalize(margins: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """Divide margins by the total variation of the activations they were
    measured at; raises DegenerateVarianceError when that scale vanishes."""
    tv = compute_total_variation(acts)
    if tv < _DEGENERATE:
        raise DegenerateVarianceError(
            "activation total variation is numerically zero")
    return np.asarray(margins, dtype=np.float64) / tv


@dataclass(frozen=True)
class TvNormalizer:
    """Per-layer total-variation scales fitted on a reference batch."""

    per_layer_tv: dict[int, float]

    def normalize(self, margins: np.ndarray, lam: int) -> np.ndarray:
        if lam not in self.per_layer_tv:
            raise DomainError(f"no total-variation scale for layer {lam}")
        tv = self.per_layer_tv[lam]
        if tv < _DEGENERATE:
            raise DegenerateVarianceError(
                f"layer {lam} activations have zero total variation")
        return np.asarray(margins, dtype=np.float64) / tv


def fit_tv_normalizer(net: Network, X: np.ndarray) -> TvNormalizer:
    """Total variation of every activation layer of ``net`` over ``X``."""
    acts = forward_batch(net, np.asarray(X, dtype=np.float64))
    return TvNormalizer(per_layer_tv={
        lam: compute_total_variation(A) for lam, A in enumerate(acts)})
