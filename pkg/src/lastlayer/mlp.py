"""Small fully connected networks trained with hand-rolled backpropagation.

Parameter layout
----------------
Layer l maps an (N, n_in) batch to (N, n_out) via ``X @ W_l + b_l`` where
``W_l`` has shape (n_in, n_out). The canonical flat vector concatenates, per
layer in order, ``W_l.ravel()`` (row-major) followed by ``b_l``. All
flatten/unflatten helpers and the JSON format use this order.

The penultimate feature of a network is the activation after the last hidden
layer's nonlinearity, so composing the extracted features with the stored
final affine layer reproduces the full forward pass exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LatentDataset, RegressionDataset
from .rng import RngState

ACTIVATIONS = ("relu", "tanh")
TASKS = ("classification", "regression")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    task: str = "classification"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ValueError("need at least one hidden layer (>= 3 widths)")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.task == "regression" and self.layer_widths[-1] != 1:
            raise ValueError("regression networks must have a single output unit")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def penultimate_dim(self) -> int:
        return self.layer_widths[-2]

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_widths, self.layer_widths[1:]))


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("sgd", "adam"):
            raise ValueError("method must be 'sgd' or 'adam'")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainedMlp:
    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        widths = self.spec.layer_widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("parameter count does not match spec")
        ws, bs = [], []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l} has shape {w.shape}/{b.shape}, expected "
                                 f"({widths[l]}, {widths[l + 1]})/({widths[l + 1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} contains non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Network output: logits (classification) or (N,) predictions."""
        acts, _ = _forward_pass(self.spec, self.weights, self.biases, np.asarray(inputs, dtype=np.float64))
        out = acts[-1]
        return out[:, 0] if self.spec.task == "regression" else out

    def flatten(self) -> np.ndarray:
        return flatten_params(self.weights, self.biases)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "spec": {
                "layer_widths": list(self.spec.layer_widths),
                "activation": self.spec.activation,
                "task": self.spec.task,
            },
            "params": [float(v) for v in self.flatten()],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @staticmethod
    def from_json(path: str | Path) -> "TrainedMlp":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        spec = MlpSpec(
            tuple(payload["spec"]["layer_widths"]),
            payload["spec"]["activation"],
            payload["spec"]["task"],
        )
        return mlp_from_flat(spec, np.asarray(payload["params"], dtype=np.float64))


def flatten_params(weights, biases) -> np.ndarray:
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def unflatten_params(spec: MlpSpec, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got {flat.shape}")
    weights, biases, off = [], [], 0
    for a, b in zip(spec.layer_widths, spec.layer_widths[1:]):
        weights.append(flat[off:off + a * b].reshape(a, b))
        off += a * b
        biases.append(flat[off:off + b])
        off += b
    return weights, biases


def mlp_from_flat(spec: MlpSpec, flat: np.ndarray) -> TrainedMlp:
    weights, biases = unflatten_params(spec, flat)
    return TrainedMlp(spec, tuple(weights), tuple(biases))


def init_params(spec: MlpSpec, rng: RngState) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Kaiming-uniform (relu) or Xavier-uniform (tanh) weights, zero biases."""
    gen = rng.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths, spec.layer_widths[1:]):
        if spec.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    return np.maximum(pre, 0.0) if name == "relu" else np.tanh(pre)


def _activate_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    return (pre > 0).astype(np.float64) if name == "relu" else 1.0 - post**2


def _forward_pass(spec, weights, biases, X):
    """Activations per layer (acts[0] = X, acts[-1] = linear output) and pre-activations."""
    acts = [X]
    pres = []
    h = X
    n_layers = len(weights)
    for l in range(n_layers):
        pre = h @ weights[l] + biases[l]
        pres.append(pre)
        h = _activate(spec.activation, pre) if l < n_layers - 1 else pre
        acts.append(h)
    return acts, pres


def _backprop(spec, weights, biases, X, d_out):
    """Flat gradient of a scalar objective whose output gradient is d_out (N x K)."""
    acts, pres = _forward_pass(spec, weights, biases, X)
    n_layers = len(weights)
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    delta = d_out
    for l in range(n_layers - 1, -1, -1):
        grads_w[l] = acts[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l].T) * _activate_grad(spec.activation, pres[l - 1], acts[l])
    return flatten_params(grads_w, grads_b)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _batch_loss_and_outgrad(spec, output, y):
    """Mean batch loss and its gradient w.r.t. the network output."""
    n = output.shape[0]
    if spec.task == "classification":
        logp = log_softmax(output)
        loss = -logp[np.arange(n), y].mean()
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        d_out = (probs - onehot) / n
    else:
        resid = output[:, 0] - y
        loss = float(np.mean(resid**2))
        d_out = (2.0 * resid / n)[:, None]
    return loss, d_out


def mlp_gradient(mlp: TrainedMlp, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Flat gradient of the mean batch loss (cross-entropy or MSE)."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.shape[0] < 1:
        raise ValueError("batch must be nonempty")
    acts, _ = _forward_pass(mlp.spec, mlp.weights, mlp.biases, X)
    _, d_out = _batch_loss_and_outgrad(mlp.spec, acts[-1], targets)
    return _backprop(mlp.spec, mlp.weights, mlp.biases, X, d_out)


def batch_loss(mlp: TrainedMlp, inputs: np.ndarray, targets: np.ndarray) -> float:
    X = np.asarray(inputs, dtype=np.float64)
    acts, _ = _forward_pass(mlp.spec, mlp.weights, mlp.biases, X)
    loss, _ = _batch_loss_and_outgrad(mlp.spec, acts[-1], targets)
    return float(loss)


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def step(self, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad**2
        mhat = self.m / (1 - beta1**self.t)
        vhat = self.v / (1 - beta2**self.t)
        return lr * mhat / (np.sqrt(vhat) + eps)


def train_mlp(
    data: LatentDataset | RegressionDataset,
    spec: MlpSpec,
    opt: OptimizerConfig,
    rng: RngState | None = None,
) -> tuple[TrainedMlp, np.ndarray]:
    """Phase-1 minibatch training; returns the network and per-epoch loss trace."""
    if isinstance(data, LatentDataset):
        if spec.task != "classification":
            raise ValueError("latent dataset requires a classification spec")
        X, y = data.features, data.labels
        if spec.output_dim != data.num_classes:
            raise ValueError(f"output width {spec.output_dim} != num_classes {data.num_classes}")
    else:
        if spec.task != "regression":
            raise ValueError("regression dataset requires a regression spec")
        X, y = data.inputs, data.targets
    if spec.input_dim != X.shape[1]:
        raise ValueError(f"input width {spec.input_dim} != data dimension {X.shape[1]}")

    if rng is None:
        rng = RngState(opt.seed)
    weights, biases = init_params(spec, rng.child(0))
    shuffle_gen = rng.child(1).generator()

    flat = flatten_params(weights, biases)
    adam = _AdamState(np.zeros_like(flat), np.zeros_like(flat))
    n = X.shape[0]
    trace = np.empty(opt.epochs)
    for epoch in range(opt.epochs):
        order = shuffle_gen.permutation(n)
        losses = []
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            acts, _ = _forward_pass(spec, weights, biases, X[idx])
            loss, d_out = _batch_loss_and_outgrad(spec, acts[-1], y[idx])
            losses.append(loss)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grad = _backprop(spec, weights, biases, X[idx], d_out)
            if opt.weight_decay > 0:
                grad = grad + opt.weight_decay * flat
            if opt.method == "adam":
                flat = flat - adam.step(grad, opt.learning_rate)
            else:
                flat = flat - opt.learning_rate * grad
            weights, biases = unflatten_params(spec, flat)
        trace[epoch] = float(np.mean(losses))
    return mlp_from_flat(spec, flat), trace


def extract_features(mlp: TrainedMlp, inputs: np.ndarray) -> np.ndarray:
    """Post-activation output of the last hidden layer, shape (N, penultimate)."""
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != mlp.spec.input_dim:
        raise ValueError(f"inputs must be (N, {mlp.spec.input_dim}), got {X.shape}")
    if X.shape[0] == 0:
        return np.empty((0, mlp.spec.penultimate_dim))
    acts, _ = _forward_pass(mlp.spec, mlp.weights, mlp.biases, X)
    return acts[-2]
