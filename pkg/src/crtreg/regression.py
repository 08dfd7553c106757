"""Regression heads trained on fused embeddings with a mean-squared-error objective."""

from __future__ import annotations

import enum
import io
import pickle
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .dataset import atomic_write_bytes

MODEL_FORMAT = "crtreg-model"
MODEL_VERSION = 1


class RegressorKind(str, enum.Enum):
    LINEAR = "LINEAR"
    RANDOM_FOREST = "RANDOM_FOREST"
    GRADIENT_BOOSTING = "GRADIENT_BOOSTING"
    SVM = "SVM"
    MLP = "MLP"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, value: "str | RegressorKind") -> "RegressorKind":
        if isinstance(value, cls):
            return value
        text = str(value).upper()
        for kind, short in _SHORT.items():
            if text in (kind.value, short.upper()):
                return kind
        raise ValueError(f"unknown regressor {value!r}")


_SHORT = {
    RegressorKind.LINEAR: "LR",
    RegressorKind.RANDOM_FOREST: "RF",
    RegressorKind.GRADIENT_BOOSTING: "GB",
    RegressorKind.SVM: "SVM",
    RegressorKind.MLP: "MLP",
}


class RegressionError(ValueError):
    pass


def mse(y_true: Sequence[float], y_pred: Sequence[float]) -> float:
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise RegressionError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise RegressionError("mse of empty sequences")
    return float(np.mean((a - b) ** 2))


def load_hyperparameters(path: str | Path | None = None, section: str = "regressors") -> dict[str, dict[str, Any]]:
    """Pinned defaults per regressor kind, from the bundled ``regressors.yaml`` unless overridden.

    ``section="grid"`` returns the small search grid instead.
    """
    if path is None:
        text = resources.files("crtreg").joinpath("regressors.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    return {RegressorKind.parse(k).value: dict(v or {}) for k, v in (doc.get(section) or {}).items()}


# -------------------------------------------------------------------- MLP


@dataclass(frozen=True)
class MLPConfig:
    hidden: tuple[int, ...] = (512, 256)
    batch_norm: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, params: dict) -> "MLPConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in params.items() if k in names}
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLP:
    """Fully connected net: [Linear -> BatchNorm -> ReLU] x len(hidden) -> Linear -> sigmoid.

    Trained with Adam on mini-batches to minimise the mean squared error,
    early-stopped on a held-out validation fraction.
    """

    def __init__(self, input_dim: int, config: MLPConfig = MLPConfig(), seed: int = 0):
        self.input_dim = input_dim
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.running: dict[str, np.ndarray] = {}
        sizes = (input_dim, *config.hidden)
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0, np.sqrt(2.0 / n_in), (n_in, n_out)).astype(self.dtype)
            if config.batch_norm:
                self.params[f"gamma{i}"] = np.ones(n_out, self.dtype)
                self.params[f"beta{i}"] = np.zeros(n_out, self.dtype)
                self.running[f"mean{i}"] = np.zeros(n_out, self.dtype)
                self.running[f"var{i}"] = np.ones(n_out, self.dtype)
            else:
                self.params[f"b{i}"] = np.zeros(n_out, self.dtype)
        n_last = sizes[-1]
        # zero output layer: the untrained net predicts sigmoid(bout) everywhere
        self.params["Wout"] = np.zeros((n_last, 1), self.dtype)
        self.params["bout"] = np.zeros(1, self.dtype)
        self._rng = rng

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden)

    # forward / backward -------------------------------------------------

    def _forward(self, X, training: bool):
        cfg = self.config
        cache = []
        h = X
        for i in range(self.n_hidden):
            z = h @ self.params[f"W{i}"]
            if cfg.batch_norm:
                if training:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                else:
                    mu, var = self.running[f"mean{i}"], self.running[f"var{i}"]
                inv = 1.0 / np.sqrt(var + cfg.bn_eps)
                xhat = (z - mu) * inv
                y = self.params[f"gamma{i}"] * xhat + self.params[f"beta{i}"]
                cache.append((h, xhat, inv, y, mu, var))
            else:
                y = z + self.params[f"b{i}"]
                cache.append((h, None, None, y, None, None))
            h = np.maximum(y, 0)
        out = _sigmoid(h @ self.params["Wout"] + self.params["bout"])[:, 0]
        return out, h, cache

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        out, _, _ = self._forward(np.asarray(X, dtype=self.dtype), training=False)
        return out.astype(np.float64)

    def loss(self, X: np.ndarray, y: np.ndarray) -> float:
        """Training-mode (batch statistics) mean squared error."""
        out, _, _ = self._forward(np.asarray(X, dtype=self.dtype), training=True)
        return float(np.mean((out - y) ** 2))

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Loss and analytic gradients w.r.t. every parameter, batch statistics in BatchNorm."""
        loss, grads, _ = self._backprop(X, y)
        return loss, grads

    def _backprop(self, X, y):
        X = np.asarray(X, dtype=self.dtype)
        y = np.asarray(y, dtype=self.dtype)
        n = X.shape[0]
        out, h_last, cache = self._forward(X, training=True)
        loss = float(np.mean((out - y) ** 2))
        grads: dict[str, np.ndarray] = {}

        dz = (2.0 / n) * (out - y) * out * (1.0 - out)
        dz = dz[:, None]
        grads["Wout"] = h_last.T @ dz
        grads["bout"] = dz.sum(axis=0)
        dh = dz @ self.params["Wout"].T
        for i in reversed(range(self.n_hidden)):
            h_in, xhat, inv, y_pre, _, _ = cache[i]
            dy = dh * (y_pre > 0)
            if self.config.batch_norm:
                grads[f"gamma{i}"] = (dy * xhat).sum(axis=0)
                grads[f"beta{i}"] = dy.sum(axis=0)
                dxhat = dy * self.params[f"gamma{i}"]
                dz_i = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                grads[f"b{i}"] = dy.sum(axis=0)
                dz_i = dy
            grads[f"W{i}"] = h_in.T @ dz_i
            if i:
                dh = dz_i @ self.params[f"W{i}"].T
        return loss, grads, cache

    def _update_running(self, cache):
        m = self.config.bn_momentum
        for i, (_, _, _, _, mu, var) in enumerate(cache):
            self.running[f"mean{i}"] = ((1 - m) * self.running[f"mean{i}"] + m * mu).astype(self.dtype)
            self.running[f"var{i}"] = ((1 - m) * self.running[f"var{i}"] + m * var).astype(self.dtype)

    # training -------------------------------------------------------------

    def fit(self, X: np.ndarray, y: np.ndarray) -> "MLP":
        cfg = self.config
        X = np.asarray(X, dtype=self.dtype)
        y = np.asarray(y, dtype=self.dtype)
        n = X.shape[0]
        rng = self._rng
        order = rng.permutation(n)
        n_val = int(round(cfg.val_fraction * n))
        if n_val < 2 or n - n_val < 2:
            n_val = 0
        val_idx, tr_idx = order[:n_val], order[n_val:]
        Xt, yt = X[tr_idx], y[tr_idx]
        Xv, yv = X[val_idx], y[val_idx]

        mean_y = float(np.clip(yt.mean(), 1e-3, 1 - 1e-3))
        self.params["bout"][:] = np.log(mean_y / (1 - mean_y))

        adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, cfg.learning_rate
        step = 0
        best = (np.inf, None, None)
        stale = 0
        n_tr = len(tr_idx)
        for _epoch in range(cfg.max_epochs):
            perm = rng.permutation(n_tr)
            for start in range(0, n_tr, cfg.batch_size):
                batch = perm[start : start + cfg.batch_size]
                if len(batch) < 2 and cfg.batch_norm:
                    continue
                _, grads, cache = self._backprop(Xt[batch], yt[batch])
                if cfg.batch_norm:
                    self._update_running(cache)
                step += 1
                for k, g in grads.items():
                    adam_m[k] = b1 * adam_m[k] + (1 - b1) * g
                    adam_v[k] = b2 * adam_v[k] + (1 - b2) * g * g
                    mhat = adam_m[k] / (1 - b1**step)
                    vhat = adam_v[k] / (1 - b2**step)
                    self.params[k] = (self.params[k] - lr * mhat / (np.sqrt(vhat) + eps)).astype(self.dtype)
            if n_val:
                score = float(np.mean((self.predict_raw(Xv) - yv) ** 2))
                if score < best[0] - 1e-12:
                    best = (score, _copy(self.params), _copy(self.running))
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
        if best[1] is not None:
            self.params, self.running = best[1], best[2]
        return self


def gradient_check(model: MLP, X: np.ndarray, y: np.ndarray, eps: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Relative error per parameter entry is ``|a - n| / max(|a| + |n|, 1e-8)``.
    Use a float64 model; float32 rounding swamps the differences.
    """
    _, grads = model.loss_and_grads(X, y)
    worst = 0.0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        numeric = np.empty_like(flat, dtype=np.float64)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = model.loss(X, y)
            flat[j] = old - eps
            down = model.loss(X, y)
            flat[j] = old
            numeric[j] = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1).astype(np.float64)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def _copy(d):
    return {k: v.copy() for k, v in d.items()}


# --------------------------------------------------------------- train API


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return cls(mean, scale)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class TrainedRegressor:
    kind: RegressorKind
    input_dim: int
    params: Any
    seed: int
    train_loss: float
    hyperparameters: dict = field(default_factory=dict)
    standardizer: Standardizer | None = None

    def predict_raw(self, X) -> np.ndarray:
        X = as_matrix(X)
        if X.shape[1] != self.input_dim:
            raise RegressionError(f"expected {self.input_dim}-dim inputs, got {X.shape[1]}")
        if self.standardizer is not None:
            X = self.standardizer(X)
        if isinstance(self.params, MLP):
            return self.params.predict_raw(X)
        return np.asarray(self.params.predict(X), dtype=np.float64)

    def predict(self, X) -> np.ndarray:
        raw = self.predict_raw(X)
        if not np.all(np.isfinite(raw)):
            raise RegressionError("non-finite prediction")
        return np.clip(raw, 0.0, 1.0)

    def save(self, path: str | Path) -> Path:
        blob = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "hyperparameters": self.hyperparameters,
            "standardizer": self.standardizer,
            "params": self.params,
        }
        buf = io.BytesIO()
        pickle.dump(blob, buf, protocol=4)
        return atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "TrainedRegressor":
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
        if not isinstance(blob, dict) or blob.get("format") != MODEL_FORMAT:
            raise RegressionError(f"{path} is not a saved regressor")
        if blob["version"] != MODEL_VERSION:
            raise RegressionError(f"{path}: unsupported model version {blob['version']}")
        return cls(
            kind=RegressorKind(blob["kind"]),
            input_dim=blob["input_dim"],
            params=blob["params"],
            seed=blob["seed"],
            train_loss=blob["train_loss"],
            hyperparameters=blob["hyperparameters"],
            standardizer=blob["standardizer"],
        )


def as_matrix(X) -> np.ndarray:
    if isinstance(X, np.ndarray):
        M = X
    else:
        rows = [getattr(x, "vector", x) for x in X]
        if not rows:
            raise RegressionError("no inputs")
        dims = {np.asarray(r).shape for r in rows}
        if len(dims) != 1:
            raise RegressionError(f"embeddings differ in dim: {sorted(dims)}")
        M = np.stack([np.asarray(r) for r in rows])
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None]
    if M.ndim != 2:
        raise RegressionError(f"inputs must be 2-D, got shape {M.shape}")
    return M


def _build(kind: RegressorKind, params: dict, seed: int, input_dim: int):
    if kind is RegressorKind.LINEAR:
        from sklearn.linear_model import LinearRegression

        return LinearRegression(**params)
    if kind is RegressorKind.RANDOM_FOREST:
        from sklearn.ensemble import RandomForestRegressor

        return RandomForestRegressor(random_state=seed, n_jobs=1, **params)
    if kind is RegressorKind.GRADIENT_BOOSTING:
        from sklearn.ensemble import GradientBoostingRegressor

        return GradientBoostingRegressor(random_state=seed, **params)
    if kind is RegressorKind.SVM:
        from sklearn.svm import SVR

        return SVR(**params)
    return MLP(input_dim, MLPConfig.from_dict(params), seed=seed)


_STANDARDIZED = {RegressorKind.SVM, RegressorKind.MLP}


def train(
    kind: RegressorKind | str,
    X,
    y: Sequence[float],
    seed: int = 0,
    hyperparameters: dict | None = None,
) -> TrainedRegressor:
    kind = RegressorKind.parse(kind)
    X = as_matrix(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0]:
        raise RegressionError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if X.shape[0] < 2:
        raise RegressionError("need at least 2 training samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise RegressionError("NaN or infinite values in training data")
    if hyperparameters is None:
        hyperparameters = load_hyperparameters()[kind.value]
    standardizer = Standardizer.fit(X) if kind in _STANDARDIZED else None
    Xs = standardizer(X) if standardizer is not None else X
    model = _build(kind, dict(hyperparameters), seed, X.shape[1])
    model.fit(Xs, y)
    trained = TrainedRegressor(kind, X.shape[1], model, seed, 0.0, dict(hyperparameters), standardizer)
    trained.train_loss = mse(y, trained.predict_raw(X))
    return trained


def predict(model: TrainedRegressor, x) -> np.ndarray | float:
    """Clipped prediction(s); a single embedding/vector gives a float."""
    single = not isinstance(x, (list, tuple)) and np.ndim(getattr(x, "vector", x)) == 1
    out = model.predict(as_matrix([x]) if single else x)
    return float(out[0]) if single else out
