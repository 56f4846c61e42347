"""Statistical fidelity evaluation of synthetic flows.

The headline metric is the inlier rate of a linear one-class SVM fit on
real data: the fraction of scored points with decision value
d(x) = w . x_std - rho >= 0. We solve the primal

    min  0.5 ||w||^2 + (1/(nu n)) sum_i max(0, rho - w . x_i) - rho

by epoch-shuffled stochastic subgradient descent with step 1/(lambda t),
lambda = 1, followed by one exact coordinate step on rho (its optimum
given w is the nu-th order statistic of the projections, which also
pins the nu-property: the training outlier fraction lands just below
nu). A fit whose outlier fraction leaves [nu - 0.05, nu + 0.02] is
rejected, never silently accepted.

The one-class SVM and PCA drift operate on the numeric feature columns;
the discriminator additionally sees categorical features as one-hot
indicator columns, and per-feature total-variation distance on the
codebook's symbol bins covers marginal fidelity for every feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CategoryMap, Codebook, NumericBins, encode_categorical_column, encode_numeric_column
from .errors import ConvergenceError, DataError
from .ingest import FlowTable, jacobi_eigenvalues
from .rng import Rng, derive_seed

NU_TOLERANCE_LOW = 0.05  # accepted band: [nu - low, nu + high]
NU_TOLERANCE_HIGH = 0.02


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        dead = np.where(std < 1e-12)[0]
        if dead.size:
            raise DataError(f"zero-variance feature column(s) at index {dead.tolist()}; cannot standardize")
        return cls(mean=mean, std=std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class OcsvmModel:
    w: np.ndarray  # weights over standardized features
    rho: float
    nu: float
    standardizer: Standardizer
    train_outlier_fraction: float
    objective: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.standardizer.apply(np.asarray(x, dtype=np.float64)) @ self.w - self.rho


def ocsvm_objective(x_std: np.ndarray, w: np.ndarray, rho: float, nu: float) -> float:
    """Primal objective on pre-standardized data."""
    slack = np.maximum(0.0, rho - x_std @ w)
    return float(0.5 * w @ w + slack.mean() / nu - rho)


def solve_ocsvm_primal(
    x_std: np.ndarray, nu: float, epochs: int, rng: Rng
) -> tuple[np.ndarray, float]:
    """Subgradient descent on the primal over pre-standardized rows.

    Per-sample objective 0.5||w||^2 + (1/nu) max(0, rho - w.x) - rho,
    step 1/t with a global step counter; one final exact minimization of
    rho given w (the ceil(nu*n)-th smallest projection).
    """
    n, d = x_std.shape
    w = np.zeros(d)
    rho = 0.0
    t = 0
    inv_nu = 1.0 / nu
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in order:
            t += 1
            eta = 1.0 / t
            x = x_std[i]
            if x @ w < rho:  # hinge active: this point is an outlier
                w = (1.0 - eta) * w + (eta * inv_nu) * x
                rho = rho + eta * (1.0 - inv_nu)
            else:
                w = (1.0 - eta) * w
                rho = rho + eta
    projections = x_std @ w
    k = max(1, math.ceil(nu * n))
    rho = float(np.partition(projections, k - 1)[k - 1])
    return w, rho


def fit_ocsvm(
    data: FlowTable | np.ndarray,
    nu: float = 0.1,
    epochs: int = 50,
    rng: Rng | None = None,
    numeric_features: list[str] | None = None,
) -> OcsvmModel:
    """Standardize real rows and fit the linear one-class SVM."""
    x = _numeric_matrix(data, numeric_features)
    n = x.shape[0]
    if n < 100:
        raise DataError(f"one-class SVM needs at least 100 rows, got {n}")
    if not 0.0 < nu < 1.0:
        raise DataError(f"nu must be in (0, 1), got {nu}")
    if rng is None:
        rng = Rng(0)
    standardizer = Standardizer.fit(x)
    x_std = standardizer.apply(x)
    w, rho = solve_ocsvm_primal(x_std, nu, epochs, rng)
    outlier_fraction = float(np.mean(x_std @ w - rho < 0))
    if not (nu - NU_TOLERANCE_LOW <= outlier_fraction <= nu + NU_TOLERANCE_HIGH):
        raise ConvergenceError(
            f"one-class SVM failed the nu-property: training outlier fraction "
            f"{outlier_fraction:.4f} outside [{nu - NU_TOLERANCE_LOW:.3f}, {nu + NU_TOLERANCE_HIGH:.3f}]"
        )
    return OcsvmModel(
        w=w,
        rho=rho,
        nu=nu,
        standardizer=standardizer,
        train_outlier_fraction=outlier_fraction,
        objective=ocsvm_objective(x_std, w, rho, nu),
    )


def inlier_rate(model: OcsvmModel, data: FlowTable | np.ndarray, numeric_features: list[str] | None = None) -> float:
    """Percentage of rows with non-negative decision value."""
    x = _numeric_matrix(data, numeric_features)
    if x.shape[0] == 0:
        raise DataError("cannot score an empty matrix")
    if x.shape[1] != model.w.shape[0]:
        raise DataError(f"feature count {x.shape[1]} != model dimension {model.w.shape[0]}")
    return float(100.0 * np.mean(model.decision(x) >= 0))


def _numeric_matrix(data: FlowTable | np.ndarray, numeric_features: list[str] | None) -> np.ndarray:
    if isinstance(data, FlowTable):
        names = numeric_features if numeric_features is not None else data.numeric_names
        return data.numeric_matrix(names).astype(np.float64)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def marginal_tv_distance(
    real: FlowTable, synth: FlowTable, codebook: Codebook, feature: str
) -> float:
    """Total variation between the binned marginals of one feature.

    Both columns run through the codebook's symbol map (clamping and
    overflow included), so the distance is over at most K cells.
    """
    spec = codebook.specs.get(feature)
    if spec is None:
        raise DataError(f"feature {feature!r} not in codebook")
    if isinstance(spec, NumericBins):
        a = encode_numeric_column(real.numeric_column(feature), spec)
        b = encode_numeric_column(synth.numeric_column(feature), spec)
    else:
        a = encode_categorical_column(real.categorical_column(feature), spec, codebook.overflow_symbol)
        b = encode_categorical_column(synth.categorical_column(feature), spec, codebook.overflow_symbol)
    p = np.bincount(a, minlength=codebook.k) / max(len(a), 1)
    q = np.bincount(b, minlength=codebook.k) / max(len(b), 1)
    return float(0.5 * np.abs(p - q).sum())


def discriminative_score(
    real: np.ndarray, synth: np.ndarray, rng: Rng, epochs: int = 500, lr: float = 0.1
) -> float:
    """Accuracy of a logistic regression told to separate real from synth.

    70/30 split, features standardized on the training portion (columns
    constant there are dropped), full-batch gradient descent. Returns
    max(acc, 1 - acc); 0.5 means the two sets are indistinguishable to a
    linear model.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.shape[0] < 200 or synth.shape[0] < 200:
        raise DataError("discriminative score needs at least 200 rows per side")
    if real.shape[1] != synth.shape[1]:
        raise DataError("real and synthetic feature counts differ")
    # balance the classes; otherwise a constant prediction already beats 0.5
    n_side = min(real.shape[0], synth.shape[0])
    real = real[rng.permutation(real.shape[0])[:n_side]]
    synth = synth[rng.permutation(synth.shape[0])[:n_side]]
    x = np.vstack([real, synth])
    y = np.concatenate([np.ones(n_side), np.zeros(n_side)])
    perm = rng.permutation(x.shape[0])
    x, y = x[perm], y[perm]
    n_train = int(0.7 * x.shape[0])
    if n_train == 0 or n_train == x.shape[0] or len(set(y[:n_train])) < 2:
        raise DataError("degenerate train/test split")
    usable = np.where(x[:n_train].std(axis=0) > 1e-12)[0]
    if usable.size == 0:
        raise DataError("no usable feature columns for the discriminator")
    x = x[:, usable]
    std = Standardizer.fit(x[:n_train])
    x_std = np.column_stack([std.apply(x), np.ones(x.shape[0])])  # bias column
    xtr, ytr = x_std[:n_train], y[:n_train]
    xte, yte = x_std[n_train:], y[n_train:]
    w = np.zeros(x_std.shape[1])
    for _ in range(epochs):
        z = xtr @ w
        p = 1.0 / (1.0 + np.exp(-z))
        w -= lr * (xtr.T @ (p - ytr)) / len(ytr)
    acc = float(np.mean((xte @ w >= 0).astype(float) == yte))
    return max(acc, 1.0 - acc)


def discriminator_matrix(table: FlowTable, codebook: Codebook) -> np.ndarray:
    """Feature matrix for the real-vs-synth discriminator: raw numeric
    columns plus one indicator column per known category (and one for
    the overflow) of every categorical feature."""
    cols: list[np.ndarray] = []
    for name in codebook.features:
        spec = codebook.specs[name]
        if isinstance(spec, NumericBins):
            cols.append(table.numeric_column(name).astype(np.float64))
        else:
            values = table.categorical_column(name)
            known = set(spec.categories)
            for cat in spec.categories:
                cols.append(np.array([1.0 if v == cat else 0.0 for v in values]))
            cols.append(np.array([0.0 if v in known else 1.0 for v in values]))
    return np.column_stack(cols)


@dataclass
class EvalReport:
    nu: float
    seed: int
    inlier_pct: float
    real_holdout_inlier_pct: float
    tv_distances: dict[str, float]
    pca_drift: np.ndarray  # |real EVR - synth EVR| per component
    discriminative_accuracy: float

    @property
    def mean_tv(self) -> float:
        return float(np.mean(list(self.tv_distances.values()))) if self.tv_distances else 0.0

    @property
    def max_pca_drift(self) -> float:
        return float(self.pca_drift.max()) if self.pca_drift.size else 0.0

    def to_text(self) -> str:
        lines = [
            f"nu = {self.nu}",
            f"seed = {self.seed}",
            f"inlier_pct = {self.inlier_pct:.4f}",
            f"real_holdout_inlier_pct = {self.real_holdout_inlier_pct:.4f}",
            f"discriminative_accuracy = {self.discriminative_accuracy:.4f}",
            f"mean_tv_distance = {self.mean_tv:.6f}",
            f"max_pca_drift = {self.max_pca_drift:.6f}",
        ]
        for name in sorted(self.tv_distances):
            lines.append(f"tv[{name}] = {self.tv_distances[name]:.6f}")
        return "\n".join(lines)

    def csv_header(self) -> str:
        return "inlier_pct,real_holdout_inlier_pct,discriminative_accuracy,mean_tv,max_pca_drift,nu,seed"

    def csv_row(self) -> str:
        return (
            f"{self.inlier_pct:.4f},{self.real_holdout_inlier_pct:.4f},"
            f"{self.discriminative_accuracy:.4f},{self.mean_tv:.6f},{self.max_pca_drift:.6f},"
            f"{self.nu},{self.seed}"
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text() + "\n", encoding="utf-8")


_HOLDOUT_FRACTION = 0.3  # calibration split for the real data


def evaluate(
    real: FlowTable,
    synth: FlowTable,
    codebook: Codebook,
    nu: float = 0.1,
    seed: int = 0,
    ocsvm_epochs: int = 50,
) -> EvalReport:
    """Full fidelity report: OCSVM inlier rates, TV distances, PCA drift,
    and the discriminative score. Deterministic given the seed."""
    numeric_features = [f for f in codebook.features if isinstance(codebook.specs[f], NumericBins)]
    if len(numeric_features) < 1:
        raise DataError("evaluation needs at least one numeric feature")
    for f in codebook.features:
        if isinstance(codebook.specs[f], NumericBins):
            synth.numeric_column(f)  # raises if the synth table lacks it
        else:
            synth.categorical_column(f)

    real_x = real.numeric_matrix(numeric_features).astype(np.float64)
    synth_x = synth.numeric_matrix(numeric_features).astype(np.float64)

    split_rng = Rng(derive_seed(seed, "eval-split"))
    perm = split_rng.permutation(real_x.shape[0])
    n_hold = int(_HOLDOUT_FRACTION * real_x.shape[0])
    hold_x = real_x[perm[:n_hold]]
    train_x = real_x[perm[n_hold:]]

    model = fit_ocsvm(train_x, nu=nu, epochs=ocsvm_epochs, rng=Rng(derive_seed(seed, "ocsvm")))
    synth_inliers = inlier_rate(model, synth_x)
    holdout_inliers = inlier_rate(model, hold_x)

    tv = {f: marginal_tv_distance(real, synth, codebook, f) for f in codebook.features}
    pca_drift = _pca_drift(real_x, synth_x)
    disc = discriminative_score(
        discriminator_matrix(real, codebook),
        discriminator_matrix(synth, codebook),
        Rng(derive_seed(seed, "disc")),
    )
    return EvalReport(
        nu=nu,
        seed=seed,
        inlier_pct=synth_inliers,
        real_holdout_inlier_pct=holdout_inliers,
        tv_distances=tv,
        pca_drift=pca_drift,
        discriminative_accuracy=disc,
    )


def _pca_drift(real_x: np.ndarray, synth_x: np.ndarray) -> np.ndarray:
    """|explained-variance-ratio| gap, on columns usable in both tables."""
    usable = [
        j
        for j in range(real_x.shape[1])
        if real_x[:, j].std() > 1e-12 and synth_x[:, j].std() > 1e-12
    ]
    if len(usable) < 2:
        return np.zeros(0)
    return np.abs(_evr(real_x[:, usable]) - _evr(synth_x[:, usable]))


def _evr(x: np.ndarray) -> np.ndarray:
    z = (x - x.mean(axis=0)) / x.std(axis=0)
    cov = (z.T @ z) / (x.shape[0] - 1)
    eig = np.clip(jacobi_eigenvalues(cov), 0.0, None)
    return eig / eig.sum()
