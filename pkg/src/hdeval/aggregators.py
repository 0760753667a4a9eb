"""White-box regressors from criterion scores to human aspect scores.

Every kind exposes the same joint interface: one model maps a feature vector
of criterion scores to one prediction per aspect. Outputs are never clamped;
continuous predictions are what make fine-grained ranking possible.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DimensionMismatchError, ValidationError

KINDS = ("mean_baseline", "linear", "tree", "forest", "mlp")
SHORT_NAMES = {"mean": "mean_baseline", "lr": "linear", "dt": "tree", "rf": "forest", "nn": "mlp"}

HYPER_DEFAULTS: dict[str, dict[str, Any]] = {
    "mean_baseline": {},
    "linear": {"ridge": 1e-6},
    "tree": {"max_depth": 6, "min_samples_leaf": 5},
    "forest": {"n_trees": 100, "max_depth": 6, "min_samples_leaf": 5, "max_features": "sqrt"},
    "mlp": {"hidden_sizes": [64], "learning_rate": 1e-3, "epochs": 500, "batch_size": 32},
}


def resolve_kind(kind: str) -> str:
    kind = SHORT_NAMES.get(kind, kind)
    if kind not in KINDS:
        raise ValidationError(f"unknown aggregator kind {kind!r}; expected one of {KINDS} or {tuple(SHORT_NAMES)}")
    return kind


def merged_hyper(kind: str, hyper: dict[str, Any] | None) -> dict[str, Any]:
    out = copy.deepcopy(HYPER_DEFAULTS[kind])
    for k, v in (hyper or {}).items():
        if k not in out:
            raise ValidationError(f"unknown hyperparameter {k!r} for {kind}")
        out[k] = v
    return out


@dataclass
class TrainingSet:
    X: np.ndarray
    Y: np.ndarray
    feature_ids: list[str]
    aspect_names: list[str]

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        self.feature_ids = list(self.feature_ids)
        self.aspect_names = list(self.aspect_names)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DimensionMismatchError("X and Y must be 2-D")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionMismatchError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.X.shape[0] < 1:
            raise ValidationError("training set is empty")
        if self.X.shape[1] != len(self.feature_ids):
            raise DimensionMismatchError(f"{self.X.shape[1]} columns but {len(self.feature_ids)} feature ids")
        if self.Y.shape[1] != len(self.aspect_names):
            raise DimensionMismatchError(f"{self.Y.shape[1]} label columns but {len(self.aspect_names)} aspects")
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ValidationError("training set contains non-finite values")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def select_features(self, ids: Sequence[str]) -> TrainingSet:
        cols = [self.feature_ids.index(i) for i in ids]
        return TrainingSet(self.X[:, cols], self.Y, list(ids), self.aspect_names)

    def select_aspects(self, names: Sequence[str]) -> TrainingSet:
        cols = [self.aspect_names.index(a) for a in names]
        return TrainingSet(self.X, self.Y[:, cols], self.feature_ids, list(names))


@dataclass
class AggregatorModel:
    kind: str
    parameters: dict[str, Any]
    feature_ids: list[str]
    aspect_names: list[str]
    seed: int = 0
    hyper: dict[str, Any] = field(default_factory=dict)
    train_mse: list[float] = field(default_factory=list)
    loss_log: list[float] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def predict(self, x: Any) -> np.ndarray:
        """Predict aspects for one vector (returns shape (p,)) or a matrix (shape (n, p))."""
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        X = arr[None, :] if single else arr
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatchError(f"expected {self.n_features} features, got shape {arr.shape}")
        if not np.isfinite(X).all():
            raise ValidationError("non-finite input to predict")
        out = _PREDICTORS[self.kind](self.parameters, X, len(self.aspect_names))
        return out[0] if single else out

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "feature_ids": list(self.feature_ids),
            "aspect_names": list(self.aspect_names),
            "seed": self.seed,
            "hyper": self.hyper,
            "train_mse": [float(v) for v in self.train_mse],
            "parameters": _to_jsonable(self.parameters),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AggregatorModel:
        kind = resolve_kind(data["kind"])
        return cls(
            kind=kind,
            parameters=_PARAM_LOADERS[kind](data["parameters"]),
            feature_ids=list(data["feature_ids"]),
            aspect_names=list(data["aspect_names"]),
            seed=int(data.get("seed", 0)),
            hyper=dict(data.get("hyper", {})),
            train_mse=[float(v) for v in data.get("train_mse", [])],
        )

    @classmethod
    def from_json(cls, text: str) -> AggregatorModel:
        return cls.from_dict(json.loads(text))


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --- mean baseline ---------------------------------------------------------


def _predict_mean(params: dict, X: np.ndarray, p: int) -> np.ndarray:
    return np.repeat(X.mean(axis=1, keepdims=True), p, axis=1)


# --- ridge linear ----------------------------------------------------------


def fit_ridge(X: np.ndarray, Y: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge with an unpenalised intercept; weights shaped (p, d)."""
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    A = Xc.T @ Xc + ridge * np.eye(X.shape[1])
    W = np.linalg.solve(A, Xc.T @ Yc)
    intercept = y_mean - x_mean @ W
    return W.T.copy(), intercept


def _predict_linear(params: dict, X: np.ndarray, p: int) -> np.ndarray:
    return X @ params["weights"].T + params["intercepts"]


# --- CART ------------------------------------------------------------------


def _best_split(
    X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int
) -> tuple[int, float, float] | None:
    n = y.shape[0]
    total_sse = float(((y - y.mean()) ** 2).sum())
    best: tuple[int, float, float] | None = None
    best_sse = total_sse - 1e-12
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        left_n = np.arange(1, n)
        sum_l, sq_l = csum[:-1], csq[:-1]
        sum_r, sq_r = csum[-1] - sum_l, csq[-1] - sq_l
        sse = (sq_l - sum_l ** 2 / left_n) + (sq_r - sum_r ** 2 / (n - left_n))
        valid = (xs[:-1] < xs[1:]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        if sse[i] < best_sse:
            best_sse = float(sse[i])
            best = (f, 0.5 * (xs[i] + xs[i + 1]), best_sse)
    return best


def fit_cart(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int | None,
    min_samples_leaf: int,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, list]:
    """Variance-reduction regression tree as flat node arrays (leaf feature = -1)."""
    nodes: dict[str, list] = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
    n_features = X.shape[1]
    min_leaf = max(int(min_samples_leaf), 1)

    def new_node(value: float) -> int:
        nodes["feature"].append(-1)
        nodes["threshold"].append(0.0)
        nodes["left"].append(-1)
        nodes["right"].append(-1)
        nodes["value"].append(float(value))
        return len(nodes["value"]) - 1

    stack = [(np.arange(X.shape[0]), 0, new_node(y.mean()))]
    while stack:
        idx, depth, node = stack.pop()
        if (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_leaf:
            continue
        if max_features is not None and max_features < n_features:
            feats = sorted(rng.choice(n_features, size=max_features, replace=False).tolist())
        else:
            feats = range(n_features)
        found = _best_split(X[idx], y[idx], feats, min_leaf)
        if found is None:
            continue
        f, threshold, _ = found
        go_left = X[idx, f] <= threshold
        li, ri = idx[go_left], idx[~go_left]
        left = new_node(y[li].mean())
        right = new_node(y[ri].mean())
        nodes["feature"][node] = int(f)
        nodes["threshold"][node] = float(threshold)
        nodes["left"][node] = left
        nodes["right"][node] = right
        stack.append((ri, depth + 1, right))
        stack.append((li, depth + 1, left))
    return nodes


def predict_cart(tree: dict[str, Any], X: np.ndarray) -> np.ndarray:
    feature = np.asarray(tree["feature"], dtype=int)
    threshold = np.asarray(tree["threshold"], dtype=float)
    left = np.asarray(tree["left"], dtype=int)
    right = np.asarray(tree["right"], dtype=int)
    value = np.asarray(tree["value"], dtype=float)
    node = np.zeros(X.shape[0], dtype=int)
    rows = np.arange(X.shape[0])
    while True:
        f = feature[node]
        active = f >= 0
        if not active.any():
            return value[node]
        go_left = X[rows[active], f[active]] <= threshold[node[active]]
        node[active] = np.where(go_left, left[node[active]], right[node[active]])


def _predict_tree(params: dict, X: np.ndarray, p: int) -> np.ndarray:
    return np.column_stack([predict_cart(t, X) for t in params["trees"]])


def _predict_forest(params: dict, X: np.ndarray, p: int) -> np.ndarray:
    cols = []
    for members in params["forests"]:
        stacked = np.stack([predict_cart(t, X) for t in members])
        cols.append(stacked.mean(axis=0))
    return np.column_stack(cols)


def _max_features(setting: Any, n_features: int) -> int:
    if setting in (None, "all"):
        return n_features
    if setting == "sqrt":
        return max(1, math.ceil(math.sqrt(n_features)))
    if isinstance(setting, float):
        return max(1, min(n_features, math.ceil(setting * n_features)))
    return max(1, min(n_features, int(setting)))


def member_rng(seed: int, aspect: int, member: int) -> np.random.Generator:
    # Seed depends only on (seed, aspect, member), so members may be fit in any order.
    return np.random.default_rng([seed, aspect, member])


# --- MLP -------------------------------------------------------------------


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append({"W": W, "b": np.zeros(fan_out)})
    return layers


def mlp_forward(layers: Sequence[dict[str, np.ndarray]], X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return output and the list of layer inputs (needed for backprop)."""
    acts = [X]
    h = X
    for i, layer in enumerate(layers):
        z = h @ layer["W"] + layer["b"]
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_loss_and_grad(
    layers: Sequence[dict[str, np.ndarray]], X: np.ndarray, Y: np.ndarray
) -> tuple[float, list[dict[str, np.ndarray]]]:
    """Mean squared error over all entries and its analytic gradient."""
    out, acts = mlp_forward(layers, X)
    diff = out - Y
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / diff.size
    grads: list[dict[str, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        grads[i] = {"W": acts[i].T @ delta, "b": delta.sum(axis=0)}
        if i > 0:
            delta = (delta @ layers[i]["W"].T) * (acts[i] > 0)
    return loss, grads


def fit_mlp(
    X: np.ndarray,
    Y: np.ndarray,
    hidden_sizes: Sequence[int],
    learning_rate: float,
    epochs: int,
    batch_size: int,
    seed: int,
) -> tuple[dict[str, Any], list[float]]:
    rng = np.random.default_rng(seed)
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    Xs = (X - x_mean) / x_scale
    layers = init_mlp([X.shape[1], *hidden_sizes, Y.shape[1]], rng)
    layers[-1]["b"] = Y.mean(axis=0).copy()

    # Adam moments, one pair per parameter array
    m = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in layers]
    v = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in layers]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    n = X.shape[0]
    batch = max(1, min(batch_size, n))
    history = [mlp_loss_and_grad(layers, Xs, Y)[0]]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start:start + batch]
            _, grads = mlp_loss_and_grad(layers, Xs[rows], Y[rows])
            step += 1
            for layer, g, mi, vi in zip(layers, grads, m, v):
                for k in layer:
                    mi[k] = beta1 * mi[k] + (1 - beta1) * g[k]
                    vi[k] = beta2 * vi[k] + (1 - beta2) * g[k] ** 2
                    m_hat = mi[k] / (1 - beta1 ** step)
                    v_hat = vi[k] / (1 - beta2 ** step)
                    layer[k] = layer[k] - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        history.append(mlp_loss_and_grad(layers, Xs, Y)[0])
    params = {"x_mean": x_mean, "x_scale": x_scale, "layers": layers}
    return params, history


def _predict_mlp(params: dict, X: np.ndarray, p: int) -> np.ndarray:
    Xs = (X - params["x_mean"]) / params["x_scale"]
    return mlp_forward(params["layers"], Xs)[0]


# --- dispatch --------------------------------------------------------------

_PREDICTORS = {
    "mean_baseline": _predict_mean,
    "linear": _predict_linear,
    "tree": _predict_tree,
    "forest": _predict_forest,
    "mlp": _predict_mlp,
}


def _load_tree(t: dict[str, Any]) -> dict[str, list]:
    return {
        "feature": [int(v) for v in t["feature"]],
        "threshold": [float(v) for v in t["threshold"]],
        "left": [int(v) for v in t["left"]],
        "right": [int(v) for v in t["right"]],
        "value": [float(v) for v in t["value"]],
    }


_PARAM_LOADERS = {
    "mean_baseline": lambda p: {},
    "linear": lambda p: {
        "weights": np.asarray(p["weights"], dtype=float).reshape(len(p["intercepts"]), -1),
        "intercepts": np.asarray(p["intercepts"], dtype=float),
    },
    "tree": lambda p: {"trees": [_load_tree(t) for t in p["trees"]]},
    "forest": lambda p: {"forests": [[_load_tree(t) for t in members] for members in p["forests"]]},
    "mlp": lambda p: {
        "x_mean": np.asarray(p["x_mean"], dtype=float),
        "x_scale": np.asarray(p["x_scale"], dtype=float),
        "layers": [
            {"W": np.asarray(layer["W"], dtype=float).reshape(len(layer["W"]), -1), "b": np.asarray(layer["b"], dtype=float)}
            for layer in p["layers"]
        ],
    },
}


def fit(
    kind: str,
    data: TrainingSet,
    hyper: dict[str, Any] | None = None,
    seed: int = 0,
) -> AggregatorModel:
    kind = resolve_kind(kind)
    hp = merged_hyper(kind, hyper)
    X, Y = data.X, data.Y
    loss_log: list[float] = []
    if kind == "mean_baseline":
        params: dict[str, Any] = {}
    elif kind == "linear":
        W, b = fit_ridge(X, Y, float(hp["ridge"]))
        params = {"weights": W, "intercepts": b}
    elif kind == "tree":
        params = {
            "trees": [
                fit_cart(X, Y[:, t], hp["max_depth"], hp["min_samples_leaf"]) for t in range(Y.shape[1])
            ]
        }
    elif kind == "forest":
        n = X.shape[0]
        k = _max_features(hp["max_features"], X.shape[1])
        forests = []
        for t in range(Y.shape[1]):
            members = []
            for b in range(int(hp["n_trees"])):
                rng = member_rng(seed, t, b)
                rows = rng.integers(0, n, size=n)
                members.append(fit_cart(X[rows], Y[rows, t], hp["max_depth"], hp["min_samples_leaf"], k, rng))
            forests.append(members)
        params = {"forests": forests}
    else:
        params, loss_log = fit_mlp(
            X, Y,
            hidden_sizes=[int(h) for h in hp["hidden_sizes"]],
            learning_rate=float(hp["learning_rate"]),
            epochs=int(hp["epochs"]),
            batch_size=int(hp["batch_size"]),
            seed=seed,
        )
    model = AggregatorModel(
        kind=kind,
        parameters=params,
        feature_ids=list(data.feature_ids),
        aspect_names=list(data.aspect_names),
        seed=seed,
        hyper=hp,
        loss_log=loss_log,
    )
    model.train_mse = evaluate_mse(model, data).tolist()
    return model


def predict(model: AggregatorModel, x: Any) -> np.ndarray:
    return model.predict(x)


def _check_matches(model: AggregatorModel, data: TrainingSet) -> None:
    if data.feature_ids != model.feature_ids:
        raise DimensionMismatchError("training set features do not match the model")
    if data.aspect_names != model.aspect_names:
        raise DimensionMismatchError("training set aspects do not match the model")


def evaluate_mse(model: AggregatorModel, data: TrainingSet) -> np.ndarray:
    _check_matches(model, data)
    return np.mean((model.predict(data.X) - data.Y) ** 2, axis=0)
