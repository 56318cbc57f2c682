"""Training, evaluation and whole-graph gradient verification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .graph import ModelGraph, _mix
from .optim import AdamState, OptimizerConfig, adam_step
from .tensor import GradCheckReport, finite_difference_check

log = logging.getLogger(__name__)

LOSSES = ("clf", "mse", "ce")


class TrainingDiverged(FloatingPointError):
    pass


class TaskMismatch(ValueError):
    pass


def check_loss(graph: ModelGraph, loss: str) -> None:
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; choose from {', '.join(LOSSES)}")
    if (loss == "ce") != (graph.head == "softmax_2"):
        raise TaskMismatch(f"loss {loss!r} is incompatible with the {graph.head} head of {graph.arch!r}")


def loss_and_grad(graph: ModelGraph, out: np.ndarray, y: np.ndarray, loss: str,
                  clf: M.ClfConfig | None = None) -> tuple[float, np.ndarray]:
    if loss == "ce":
        return M.cross_entropy_loss(out, y)
    batch = M.EvaluationBatch(y, out[:, 0])
    if loss == "clf":
        value, g = M.clf_loss(batch, clf or M.ClfConfig())
    else:
        value, g = M.mse_loss(batch)
    return value, g[:, None]


def init_output_bias(graph: ModelGraph, y) -> None:
    """Start regression heads at the mean training target."""
    if graph.head == "regression_1":
        graph.params["out.b"][...] = float(np.mean(y))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    state: AdamState = field(default_factory=AdamState)


def train(graph: ModelGraph, X, y, loss: str = "clf", opt: OptimizerConfig | None = None,
          epochs: int = 1, batch_size: int = 32, seed: int = 0,
          X_val=None, y_val=None, clf: M.ClfConfig | None = None,
          state: AdamState | None = None, max_steps: int | None = None) -> TrainResult:
    """Minibatch Adam training; deterministic given ``seed`` and a single BLAS thread.

    Returns per-epoch ``{"epoch", "train_loss", "val_loss"}`` records; the
    training loss is the mean minibatch loss in train mode.
    """
    check_loss(graph, loss)
    opt = opt or OptimizerConfig()
    state = state or AdamState()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = len(X)
    if n < 2:
        raise ValueError("training needs at least two samples")
    rng = np.random.default_rng(seed)
    result = TrainResult(state=state)
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            out = graph.forward(X[idx], "train", seed=_mix(seed, state.step))
            value, g = loss_and_grad(graph, out, y[idx], loss, clf)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.step}")
            grads = graph.backward(g)
            adam_step(graph.params, grads, state, opt)
            losses.append(value)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if X_val is not None and len(X_val):
            out = predict_raw(graph, X_val)
            rec["val_loss"] = loss_and_grad(graph, out, np.asarray(y_val), loss, clf)[0]
        else:
            rec["val_loss"] = float("nan")
        log.info("epoch %d train %.4f val %.4f", epoch, rec["train_loss"], rec["val_loss"])
        result.history.append(rec)
        if max_steps is not None and steps >= max_steps:
            break
    return result


def predict_raw(graph: ModelGraph, X, chunk: int = 128) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    outs = [graph.forward(X[i:i + chunk], "infer") for i in range(0, len(X), chunk)]
    return np.concatenate(outs, axis=0)


def evaluate(graph: ModelGraph, X, y, task: str = "age"):
    """Inference-mode predictions packaged for the metrics module."""
    if task == "age":
        if graph.head != "regression_1":
            raise TaskMismatch(f"{graph.arch!r} has a {graph.head} head, not an age regressor")
        return M.EvaluationBatch(y, predict_raw(graph, X)[:, 0])
    if task == "gender":
        if graph.head != "softmax_2":
            raise TaskMismatch(f"{graph.arch!r} has a {graph.head} head, not a gender classifier")
        pred = predict_raw(graph, X).argmax(axis=1)
        return M.ClassificationCounts.from_labels(y, pred)
    raise ValueError(f"unknown task {task!r}")


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

@dataclass
class GraphGradReport:
    max_relative_error: float
    worst: str
    n_checked: int
    n_skipped: int
    per_param: dict

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_relative_error < tol


def sample_coordinates(graph: ModelGraph, n: int, rng) -> list[tuple[str, tuple]]:
    """At least one coordinate per parameter, the rest spread round-robin."""
    names = sorted(graph.params)
    coords = []
    i = 0
    while len(coords) < max(n, len(names)):
        name = names[i % len(names)]
        shape = graph.params[name].shape
        coords.append((name, tuple(int(rng.integers(s)) for s in shape)))
        i += 1
    return coords


def graph_gradcheck(graph: ModelGraph, X, y, loss: str, n_coords: int = 100, seed: int = 0,
                    epsilon: float = 1e-4, clf: M.ClfConfig | None = None,
                    backward_hook=None) -> GraphGradReport:
    """Central-difference check of every sampled parameter coordinate.

    The graph runs in train mode with a fixed seed so dropout masks and
    latent noise are frozen. Coordinates whose perturbation flips a relu,
    a pooling argmax, or a loss branch are skipped and counted.
    ``backward_hook`` lets tests corrupt the analytic gradients.
    """
    check_loss(graph, loss)
    clf = clf or M.ClfConfig()
    y = np.asarray(y)
    fwd_seed = 12345
    snapshot = graph.copy_state()
    out = graph.forward(X, "train", seed=fwd_seed)
    _, g = loss_and_grad(graph, out, y, loss, clf)
    grads = graph.backward(g)
    if backward_hook is not None:
        grads = backward_hook(grads)

    # one forward returns both value and signature to halve the cost
    def f_sig():
        out = graph.forward(X, "train", seed=fwd_seed)
        value = loss_and_grad(graph, out, y, loss, clf)[0]
        extra = M.clf_branches(M.EvaluationBatch(y, out[:, 0]), clf) if loss == "clf" else b""
        f_sig.last = graph.branch_signature() + extra
        return value

    rng = np.random.default_rng(seed)
    coords = sample_coordinates(graph, n_coords, rng)
    names = sorted(graph.params)
    worst, worst_name, checked, skipped, per = 0.0, "", 0, 0, {}
    i = 0
    # keep drawing until n_coords smooth coordinates were compared
    while checked < n_coords or i < len(coords):
        if i < len(coords):
            name, idx = coords[i]
        else:
            if i > 10 * len(coords):
                break
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(s)) for s in graph.params[name].shape)
        i += 1
        rep: GradCheckReport = finite_difference_check(
            f_sig, graph.params[name], grads[name], epsilon, [idx], smooth=lambda: f_sig.last,
        )
        checked += rep.n_checked
        skipped += rep.n_skipped
        if rep.n_checked:
            per[name] = max(per.get(name, 0.0), rep.max_relative_error)
            if rep.max_relative_error >= worst:
                worst, worst_name = rep.max_relative_error, f"{name}{list(idx)}"
    graph.load_state(snapshot)
    return GraphGradReport(worst, worst_name, checked, skipped, per)
