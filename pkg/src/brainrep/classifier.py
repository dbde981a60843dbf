"""Per-category L2-regularized logistic regression over representation
vectors, with class-balanced 5-fold splits and nested cross-validation
for picking the regularization strength.

Splitting is balanced per class: positives are shuffled and dealt
round-robin into k subsets, negatives likewise, and fold i is the union
of positive subset i and negative subset i, so every fold carries its
share of the (heavily outnumbered) positives.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DataError, DegenerateLabelsError,
                     ShapeError)
from .ioutil import atomic_write_text
from .metrics import AucReport, CategoryResult, roc_auc
from .tensor import DTYPE, Rng

DEFAULT_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
DEFAULT_POSITIVE_BOUNDS = (15, 500)

GRAD_TOL = 1e-6
MAX_ITER = 10_000


@dataclass
class AnnotationTable:
    """Flat category membership: category id -> set of positive gene ids,
    over a fixed gene universe."""
    categories: dict[str, frozenset[str]]
    universe: tuple[str, ...]

    def __post_init__(self) -> None:
        known = set(self.universe)
        if len(known) != len(self.universe):
            raise DataError("gene universe contains duplicate ids")
        for cat, genes in self.categories.items():
            missing = genes - known
            if missing:
                raise DataError(
                    f"category {cat!r} annotates unknown genes: "
                    f"{sorted(missing)[:5]}...")

    @classmethod
    def from_pairs(cls, pairs, universe,
                   bounds: tuple[int, int] = DEFAULT_POSITIVE_BOUNDS
                   ) -> "AnnotationTable":
        """Build from (category_id, gene_id) pairs against a known gene
        universe. Pairs naming unknown genes are dropped with a warning;
        categories whose surviving positive count falls outside ``bounds``
        are dropped with a warning. An empty result is an error."""
        universe = tuple(universe)
        known = set(universe)
        grouped: dict[str, set[str]] = {}
        unknown: set[str] = set()
        for cat, gene in pairs:
            if gene not in known:
                unknown.add(gene)
                continue
            grouped.setdefault(cat, set()).add(gene)
        if unknown:
            warnings.warn(
                f"skipped {len(unknown)} unknown gene ids in annotations: "
                f"{sorted(unknown)[:10]}")
        lo, hi = bounds
        kept: dict[str, frozenset[str]] = {}
        for cat in sorted(grouped):
            n = len(grouped[cat])
            if lo <= n <= hi:
                kept[cat] = frozenset(grouped[cat])
            else:
                warnings.warn(
                    f"category {cat!r} has {n} positives, outside [{lo}, {hi}]; dropped")
        if not kept:
            raise DataError("no categories left after filtering annotations")
        return cls(categories=kept, universe=universe)


@dataclass(frozen=True)
class Fold:
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.positives)),
                               np.zeros(len(self.negatives))])


@dataclass
class FoldPlan:
    folds: list[Fold]


def make_folds(positives, negatives, k: int = 5, *, rng: Rng) -> FoldPlan:
    """Shuffle each class with ``rng``, deal round-robin into ``k``
    subsets, and pair positive subset i with negative subset i."""
    pos = np.asarray(list(positives), dtype=np.intp)
    neg = np.asarray(list(negatives), dtype=np.intp)
    if len(pos) < k:
        raise ConfigError(f"need at least {k} positives to build {k} folds, "
                          f"got {len(pos)}")
    if len(neg) < k:
        raise ConfigError(f"need at least {k} negatives to build {k} folds, "
                          f"got {len(neg)}")
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    folds = [Fold(positives=pos[i::k].copy(), negatives=neg[i::k].copy())
             for i in range(k)]
    return FoldPlan(folds=folds)


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    lam: float
    converged: bool = True


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-softplus(-z)) is exact and never overflows
    return np.exp(-np.logaddexp(0.0, -z))


def logreg_objective(X, y, w, b: float, lam: float) -> float:
    """Mean cross-entropy plus (lam/2) * ||w||^2; the bias is not
    regularized."""
    z = X @ w + b
    ce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return ce + 0.5 * lam * float(w @ w)


def logreg_gradient(X, y, w, b: float, lam: float):
    """Exact gradient of ``logreg_objective`` w.r.t. (w, b)."""
    n = len(y)
    r = (_sigmoid(X @ w + b) - y) / n
    return X.T @ r + lam * w, float(r.sum())


def train_logreg(X, y, lam: float) -> LogRegModel:
    """Full-batch gradient descent with backtracking (Armijo) line search
    from zero-initialized parameters, until the gradient infinity-norm
    drops below 1e-6 or 10,000 iterations elapse."""
    X = np.ascontiguousarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != len(y):
        raise ShapeError(f"X must be [n, d] with matching y, got {X.shape} "
                         f"and {y.shape}")
    if not np.isfinite(X).all():
        raise DataError("feature matrix contains non-finite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DegenerateLabelsError("training labels contain a single class")
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")

    n, d = X.shape
    w = np.zeros(d, dtype=DTYPE)
    b = 0.0
    z = np.zeros(n, dtype=DTYPE)
    f = logreg_objective(X, y, w, b, lam)
    step = 1.0
    converged = False
    for _ in range(MAX_ITER):
        p = _sigmoid(z)
        r = (p - y) / n
        gw = X.T @ r + lam * w
        gb = float(r.sum())
        if max(float(np.abs(gw).max(initial=0.0)), abs(gb)) < GRAD_TOL:
            converged = True
            break
        dz = X @ gw + gb
        gg = float(gw @ gw) + gb * gb
        w_dot_g = float(w @ gw)
        g_norm2 = float(gw @ gw)
        w_norm2 = float(w @ w)
        step = min(step * 2.0, 1e8)
        while True:
            z_new = z - step * dz
            ce = float(np.mean(np.logaddexp(0.0, z_new) - y * z_new))
            reg = 0.5 * lam * (w_norm2 - 2.0 * step * w_dot_g
                               + step * step * g_norm2)
            f_new = ce + reg
            if f_new <= f - 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-20:
                # no float64-representable descent left along -grad
                return LogRegModel(weights=w, bias=b, lam=lam, converged=False)
        w -= step * gw
        b -= step * gb
        z = z_new
        f = f_new
    return LogRegModel(weights=w, bias=b, lam=lam, converged=converged)


def predict_proba(model: LogRegModel, x):
    """Sigmoid of w.x + b; accepts one vector or a [n, d] matrix."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != len(model.weights) or x.ndim not in (1, 2):
        raise ShapeError(f"expected feature dimension {len(model.weights)}, "
                         f"got input shape {x.shape}")
    z = x @ model.weights + model.bias
    p = _sigmoid(np.atleast_1d(z))
    return float(p[0]) if x.ndim == 1 else p


@dataclass
class RepresentationSet:
    """Gene ids with their feature vectors, row-aligned."""
    gene_ids: tuple[str, ...]
    X: np.ndarray  # [n_genes, dim]

    def __post_init__(self) -> None:
        self.X = np.ascontiguousarray(self.X, dtype=DTYPE)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.gene_ids):
            raise ShapeError(f"X must be [{len(self.gene_ids)}, dim], "
                             f"got {self.X.shape}")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise DataError("duplicate gene ids in representation set")
        if not np.isfinite(self.X).all():
            raise DataError("representation matrix contains non-finite values")
        self.index = {g: i for i, g in enumerate(self.gene_ids)}


def _standardize(train: np.ndarray):
    """Per-dimension mean/std from the training rows; constant columns
    keep std 1 so they map to zero instead of dividing by zero."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    return mu, sd


def _fit_fold(X: np.ndarray, train_pos, train_neg, lam: float):
    rows = np.concatenate([train_pos, train_neg])
    y = np.concatenate([np.ones(len(train_pos)), np.zeros(len(train_neg))])
    Xt = X[rows]
    mu, sd = _standardize(Xt)
    model = train_logreg((Xt - mu) / sd, y, lam)
    return model, mu, sd


def _score_fold(X, model, mu, sd, fold: Fold) -> float:
    scores = predict_proba(model, (X[fold.rows] - mu) / sd)
    return roc_auc(scores, fold.labels)


def _select_lambda(X, train_pos, train_neg, lambda_grid, rng: Rng) -> float:
    """Inner 5-fold CV over the outer-training rows; the grid is scanned
    in ascending order so ties resolve to the smaller lambda. When the
    outer-training set is too small to split again (under 5 per class),
    the smallest lambda is used."""
    grid = sorted(float(l) for l in lambda_grid)
    if len(train_pos) < 5 or len(train_neg) < 5:
        warnings.warn("outer training set too small for inner CV; "
                      "defaulting to the smallest lambda")
        return grid[0]
    plan = make_folds(train_pos, train_neg, 5, rng=rng)
    best_lam, best_auc = grid[0], -1.0
    for lam in grid:
        aucs = []
        for i in range(5):
            test = plan.folds[i]
            tp = np.concatenate([plan.folds[j].positives for j in range(5) if j != i])
            tn = np.concatenate([plan.folds[j].negatives for j in range(5) if j != i])
            if len(test.positives) == 0 or len(test.negatives) == 0:
                continue  # unscorable split; happens only for tiny classes
            model, mu, sd = _fit_fold(X, tp, tn, lam)
            aucs.append(_score_fold(X, model, mu, sd, test))
        mean_auc = float(np.mean(aucs)) if aucs else -1.0
        if mean_auc > best_auc:
            best_auc, best_lam = mean_auc, lam
    return best_lam


def tune_and_evaluate_category(representations: RepresentationSet, positives,
                               rng: Rng,
                               lambda_grid=DEFAULT_LAMBDA_GRID, *,
                               category_id: str = "") -> CategoryResult:
    """Outer 5-fold evaluation with nested lambda selection.

    For each outer fold: pick lambda by inner 5-fold CV on the remaining
    four folds (mean AUC, ties to the smaller value), retrain on the full
    outer-training set, and score the held-out fold. Negatives are every
    gene not annotated to the category.
    """
    missing = [g for g in positives if g not in representations.index]
    if missing:
        raise DataError(f"positives not present in representations: "
                        f"{sorted(missing)[:5]}...")
    pos_set = set(positives)
    pos_idx = sorted(representations.index[g] for g in pos_set)
    neg_idx = [i for i, g in enumerate(representations.gene_ids) if g not in pos_set]
    X = representations.X
    plan = make_folds(pos_idx, neg_idx, 5, rng=rng.derive("folds"))
    fold_aucs = []
    lambdas = []
    for i in range(5):
        test = plan.folds[i]
        train_pos = np.concatenate([plan.folds[j].positives for j in range(5) if j != i])
        train_neg = np.concatenate([plan.folds[j].negatives for j in range(5) if j != i])
        lam = _select_lambda(X, train_pos, train_neg, lambda_grid,
                             rng.derive("inner", i))
        model, mu, sd = _fit_fold(X, train_pos, train_neg, lam)
        fold_aucs.append(_score_fold(X, model, mu, sd, test))
        lambdas.append(lam)
    return CategoryResult(category_id=category_id, fold_aucs=tuple(fold_aucs),
                          lambdas=tuple(lambdas))


def _category_task(args):
    reps, positives, seed, grid, cat = args
    return tune_and_evaluate_category(reps, positives, Rng(seed), grid,
                                      category_id=cat)


def evaluate_all(representations: RepresentationSet, table: AnnotationTable,
                 rng: Rng, lambda_grid=DEFAULT_LAMBDA_GRID, *,
                 workers: int = 1) -> AucReport:
    """Evaluate every category in the table (sorted order). Each category
    gets an rng derived from (seed, category id), so results do not
    depend on evaluation order or worker count. Categories with fewer
    than 5 positives are skipped with a warning."""
    tasks = []
    for cat in sorted(table.categories):
        positives = sorted(table.categories[cat])
        if len(positives) < 5:
            warnings.warn(f"category {cat!r} has {len(positives)} positives "
                          f"(< 5); skipped")
            continue
        tasks.append((representations, positives, rng.derive(cat).seed,
                      tuple(lambda_grid), cat))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_category_task, tasks))
    else:
        results = [_category_task(t) for t in tasks]
    results.sort(key=lambda r: r.category_id)
    return AucReport(categories=results)


REPRESENTATION_HEADER_FIELDS = 2


def write_representations(path, gene_ids, X) -> None:
    """Tab-separated representation file: a ``count<TAB>dim`` header line,
    then one ``gene_id<TAB>v1<TAB>...`` row per gene. Values are written
    with repr so they round-trip bit-exactly."""
    X = np.asarray(X, dtype=DTYPE)
    lines = [f"{X.shape[0]}\t{X.shape[1]}"]
    for gid, row in zip(gene_ids, X):
        lines.append(gid + "\t" + "\t".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_representations(path) -> RepresentationSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read representations {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty representation file")
    head = lines[0].split("\t")
    if len(head) != REPRESENTATION_HEADER_FIELDS:
        raise DataError(f"{path}: bad header {lines[0]!r}, expected 'count<TAB>dim'")
    try:
        count, dim = int(head[0]), int(head[1])
    except ValueError as exc:
        raise DataError(f"{path}: non-integer header {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if ln]
    if len(rows) != count:
        raise DataError(f"{path}: header promises {count} rows, found {len(rows)}")
    gene_ids = []
    X = np.empty((count, dim), dtype=DTYPE)
    for i, ln in enumerate(rows):
        parts = ln.split("\t")
        if len(parts) != dim + 1:
            raise DataError(f"{path}: row {i + 2} has {len(parts) - 1} values, "
                            f"expected {dim}")
        gene_ids.append(parts[0])
        try:
            X[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: row {i + 2} has a non-numeric value") from exc
    return RepresentationSet(gene_ids=tuple(gene_ids), X=X)
