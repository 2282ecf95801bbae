"""Ranking metrics, margin signatures, and the linear gap predictor.

Everything here consumes plain values produced elsewhere: complexity
measures, generalization gaps, test accuracies, and margin distributions.
``kendall_tau`` is implemented from its defining double sum (the common
tau-b variant handles ties differently, so a library routine would not
match); the granulated variant averages tau over single-axis model groups;
``cmi_score`` runs a plug-in conditional-independence estimate over sign
patterns. Signatures condense a margin distribution into five robust
statistics that feed a small ridge-stabilized linear predictor.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._seed import derive_seed
from .errors import DomainError, FitError, UndefinedMetricError

_LOG_CLAMP = 1e-12
_RIDGE = 1e-10


@dataclass(frozen=True)
class HyperparamConfig:
    """Named discrete hyperparameter tokens for one trained model.

    Tokens are stringified on construction so that numerically-sourced and
    text-sourced configurations compare equal.
    """

    values: Mapping[str, str]

    def __post_init__(self):
        if not self.values:
            raise DomainError("hyperparameter config must not be empty")
        coerced = {str(k): str(v) for k, v in self.values.items()}
        object.__setattr__(self, "values", coerced)

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.values))


@dataclass(frozen=True)
class EvaluatedModel:
    """One model's complexity measure and generalization outcome."""

    config: HyperparamConfig
    complexity: float
    gen_gap: float
    test_accuracy: float

    def __post_init__(self):
        for name in ("complexity", "gen_gap", "test_accuracy"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")


_TARGETS = ("gen_gap", "test_accuracy")


def _target_values(models, target):
    if target not in _TARGETS:
        raise DomainError(f"unknown target {target!r}; expected one of "
                          f"{_TARGETS}")
    return [getattr(m, target) for m in models]


def _shared_schema(models: Sequence[EvaluatedModel]) -> tuple[str, ...]:
    if not models:
        raise DomainError("no models given")
    names = models[0].config.names()
    for m in models[1:]:
        if m.config.names() != names:
            raise DomainError("models do not share one hyperparameter schema")
    return names


def _sign(x: float) -> int:
    return int(x > 0) - int(x < 0)


# ---------------------------------------------------------------------------
# Kendall rank correlation


def kendall_tau(pairs: Sequence[tuple[float, float]]) -> float:
    """Rank correlation from the defining double sum over ordered pairs.

    Tied pairs contribute zero in either coordinate; the normalization is
    n(n-1), so heavy ties shrink |tau| rather than being renormalized away.
    """
    n = len(pairs)
    if n < 2:
        raise DomainError("kendall_tau needs at least two pairs")
    total = 0
    for a in range(n):
        sa, ga = pairs[a]
        for b in range(n):
            if a == b:
                continue
            sb, gb = pairs[b]
            total += _sign(sa - sb) * _sign(ga - gb)
    return total / (n * (n - 1))


@dataclass(frozen=True)
class GranulatedResult:
    """Single-axis rank correlation with grouping diagnostics."""

    psi: float
    included_groups: int
    skipped_groups: int


def granulated_kendall(models: Sequence[EvaluatedModel], hyperparam: str,
                       target: str = "gen_gap") -> GranulatedResult:
    """Mean Kendall tau over groups in which only ``hyperparam`` varies.

    Models are grouped by their values on every other axis; a group enters
    the average only if it holds at least two models with at least two
    distinct tokens for ``hyperparam`` (a group where the axis never moves
    says nothing about it). Groups failing that bar are skipped and
    counted. When no group qualifies the statistic is undefined.
    """
    names = _shared_schema(models)
    if hyperparam not in names:
        raise DomainError(f"unknown hyperparameter {hyperparam!r}")
    targets = _target_values(models, target)

    groups: dict[tuple, list[int]] = {}
    for idx, m in enumerate(models):
        key = tuple(sorted((n, v) for n, v in m.config.values.items()
                           if n != hyperparam))
        groups.setdefault(key, []).append(idx)

    taus = []
    skipped = 0
    for key in sorted(groups):
        members = groups[key]
        distinct = {models[i].config.values[hyperparam] for i in members}
        if len(members) < 2 or len(distinct) < 2:
            skipped += 1
            continue
        taus.append(kendall_tau([(models[i].complexity, targets[i])
                                 for i in members]))
    if not taus:
        raise UndefinedMetricError(
            f"no group varies hyperparameter {hyperparam!r}; its granulated "
            f"correlation is undefined")
    return GranulatedResult(psi=sum(taus) / len(taus),
                            included_groups=len(taus),
                            skipped_groups=skipped)


def mean_granulated(psis: Sequence[float]) -> float:
    """Average of per-axis granulated correlations."""
    if not psis:
        raise DomainError("mean_granulated needs at least one value")
    return sum(psis) / len(psis)


# ---------------------------------------------------------------------------
# conditional mutual information score


@dataclass(frozen=True)
class CmiScore:
    """Per-axis-pair normalized conditional mutual information and the
    final minimum, scaled to [0, 100]."""

    per_pair: Mapping[tuple[str, str], float]
    final: float


def cmi_score(models: Sequence[EvaluatedModel],
              target: str = "gen_gap") -> CmiScore:
    """Conditional-independence score between measure and gap sign changes.

    For every pair S of hyperparameter axes, models are partitioned by
    their values on S. Within each cell, every unordered model pair yields
    a (sign of measure difference, sign of target difference) event; tied
    events are dropped, and each retained event is counted in both
    orientations so the tables do not depend on enumeration order. Cells
    are weighted by their retained-pair counts. The per-S statistic is the
    mutual information of the sign variables given the cell, normalized by
    the conditional entropy of the target signs (zero entropy, or no
    retained pairs, scores 0). The final score is 100 times the minimum
    over S.
    """
    names = _shared_schema(models)
    if len(names) < 3:
        raise DomainError("cmi_score needs at least three hyperparameter axes")
    targets = _target_values(models, target)

    per_pair: dict[tuple[str, str], float] = {}
    for S in itertools.combinations(names, 2):
        cells: dict[tuple[str, str], list[int]] = {}
        for idx, m in enumerate(models):
            key = (m.config.values[S[0]], m.config.values[S[1]])
            cells.setdefault(key, []).append(idx)

        tables: list[tuple[int, dict[tuple[int, int], int]]] = []
        for members in cells.values():
            table: dict[tuple[int, int], int] = {}
            retained = 0
            for a, b in itertools.combinations(members, 2):
                v_s = _sign(models[a].complexity - models[b].complexity)
                v_g = _sign(targets[a] - targets[b])
                if v_s == 0 or v_g == 0:
                    continue
                table[(v_s, v_g)] = table.get((v_s, v_g), 0) + 1
                table[(-v_s, -v_g)] = table.get((-v_s, -v_g), 0) + 1
                retained += 1
            if retained:
                tables.append((retained, table))

        total = sum(w for w, _ in tables)
        if total == 0:
            per_pair[S] = 0.0
            continue
        info = 0.0
        entropy = 0.0
        for weight, table in tables:
            p_cell = weight / total
            count = sum(table.values())
            joint = {vw: c / count for vw, c in table.items()}
            marg_s: dict[int, float] = {}
            marg_g: dict[int, float] = {}
            for (v_s, v_g), p in joint.items():
                marg_s[v_s] = marg_s.get(v_s, 0.0) + p
                marg_g[v_g] = marg_g.get(v_g, 0.0) + p
            for (v_s, v_g), p in joint.items():
                # p > 0 by construction, so 0*log0 terms never appear
                info += p_cell * p * np.log(p / (marg_s[v_s] * marg_g[v_g]))
            for p in marg_g.values():
                entropy -= p_cell * p * np.log(p)
        if entropy == 0.0:
            per_pair[S] = 0.0
        else:
            per_pair[S] = min(max(info / entropy, 0.0), 1.0)

    return CmiScore(per_pair=per_pair, final=100.0 * min(per_pair.values()))


# ---------------------------------------------------------------------------
# coefficient of determination


def r_squared(z: np.ndarray, z_hat: np.ndarray) -> float:
    """1 - SSE/SST; unbounded below, at most 1."""
    z = np.asarray(z, dtype=np.float64).ravel()
    z_hat = np.asarray(z_hat, dtype=np.float64).ravel()
    if z.shape != z_hat.shape or z.size < 2:
        raise DomainError("r_squared needs two equal-length vectors of "
                          "at least two points")
    sst = float(np.sum((z - z.mean()) ** 2))
    if sst == 0.0:
        raise UndefinedMetricError("r_squared is undefined for a constant "
                                   "target")
    sse = float(np.sum((z_hat - z) ** 2))
    return 1.0 - sse / sst


# ---------------------------------------------------------------------------
# margin-distribution signatures


@dataclass(frozen=True)
class MarginSignature:
    """Five-number summary of a margin distribution: quartiles plus the
    Tukey fences at 1.5 IQR."""

    q1: float
    q2: float
    q3: float
    lower_fence: float
    upper_fence: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.q1, self.q2, self.q3,
                         self.lower_fence, self.upper_fence])


def extract_signature(margins: np.ndarray) -> MarginSignature:
    """Quartiles via linear interpolation between order statistics."""
    arr = np.asarray(margins, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("cannot summarize an empty margin distribution")
    if not np.all(np.isfinite(arr)):
        raise DomainError("margin distribution contains non-finite values")
    q1, q2, q3 = (float(q) for q in np.percentile(arr, [25.0, 50.0, 75.0]))
    iqr = q3 - q1
    return MarginSignature(q1=q1, q2=q2, q3=q3,
                           lower_fence=q1 - 1.5 * iqr,
                           upper_fence=q3 + 1.5 * iqr)


# ---------------------------------------------------------------------------
# linear generalization predictor


@dataclass(frozen=True)
class PredictorFit:
    """Coefficients of ghat = alpha . ln(theta) + intercept."""

    alpha: np.ndarray
    intercept: float
    underdetermined: bool


def _log_features(features: np.ndarray) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if F.ndim != 2:
        raise DomainError("signature features must form a 2-D matrix")
    # lower fences can be negative or zero; clamp before the log transform
    return np.log(np.maximum(F, _LOG_CLAMP))


def fit_linear_predictor(features: np.ndarray,
                         gaps: np.ndarray) -> PredictorFit:
    """Least squares on log-transformed signatures via normal equations.

    A tiny ridge keeps the system solvable when signatures are collinear;
    fits with fewer samples than coefficients are flagged, not rejected.
    """
    Phi = _log_features(features)
    g = np.asarray(gaps, dtype=np.float64).ravel()
    if Phi.shape[0] != g.size:
        raise DomainError("feature rows and gap values must correspond")
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(g))):
        raise DomainError("predictor inputs contain non-finite values")
    X = np.hstack([Phi, np.ones((Phi.shape[0], 1))])
    A = X.T @ X + _RIDGE * np.eye(X.shape[1])
    try:
        beta = np.linalg.solve(A, X.T @ g)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"normal equations unsolvable: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise FitError("predictor coefficients are non-finite")
    return PredictorFit(alpha=beta[:-1], intercept=float(beta[-1]),
                        underdetermined=g.size < X.shape[1])


def predict_gap(fit: PredictorFit, features: np.ndarray):
    """Predicted gap(s); a single signature vector yields a scalar."""
    single = np.asarray(features).ndim == 1
    Phi = _log_features(features)
    out = Phi @ fit.alpha + fit.intercept
    return float(out[0]) if single else out


def kfold_splits(n: int, k: int, seed: int,
                 shuffle_index: int) -> list[np.ndarray]:
    """Deterministic k-fold index partition for one shuffle round."""
    if not 2 <= k <= n:
        raise DomainError(f"k={k} must lie in [2, {n}]")
    rng = np.random.default_rng(derive_seed(seed, "cv", shuffle_index))
    return np.array_split(rng.permutation(n), k)


@dataclass(frozen=True)
class CrossValResult:
    mean_r2: float
    per_fold: tuple[float, ...]


def cross_validate_predictor(features: np.ndarray, gaps: np.ndarray,
                             k: int = 3, shuffles: int = 5,
                             seed: int = 0) -> CrossValResult:
    """Held-out R^2 of the linear predictor over k folds x shuffle rounds."""
    F = np.asarray(features, dtype=np.float64)
    g = np.asarray(gaps, dtype=np.float64).ravel()
    scores = []
    for shuffle_index in range(shuffles):
        for fold in kfold_splits(g.size, k, seed, shuffle_index):
            mask = np.ones(g.size, dtype=bool)
            mask[fold] = False
            fit = fit_linear_predictor(F[mask], g[mask])
            scores.append(r_squared(g[fold], predict_gap(fit, F[fold])))
    return CrossValResult(mean_r2=sum(scores) / len(scores),
                          per_fold=tuple(scores))
