"""
Classification heads on projected features.

Two heads are provided: a softmax-linear head (the one certificates are exact
for) and the small ReLU MLP used in the experiments. Both are trained from
scratch with Adam on softmax cross-entropy, and both expose exact gradients
with respect to their parameters and their input features, which the
white-box attacks chain back through the projection.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from errors import DimensionError, DivergenceError, ParameterError, UnsupportedHeadError
from numerics import SeededRng, spectral_norm
from projection import ProjectionModel, project

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """Optimiser and schedule for head training."""
    epochs: int = Field(default=20, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=128, ge=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    hidden: Tuple[int, ...] = Field(default=(256, 128), description="MLP hidden layer widths")
    seed: int = Field(default=0, ge=0)
    verbose: bool = False

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(h < 1 for h in v):
            raise ValueError(f"hidden widths must be positive, got {v}")
        return v


class EpochStats(BaseModel):
    epoch: int
    loss: float
    accuracy: float


class TrainLog(BaseModel):
    """Per-epoch mean training loss and end-of-epoch training accuracy."""
    epochs: List[EpochStats] = Field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [e.loss for e in self.epochs]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example softmax cross-entropy and its gradient with respect to the logits.

    Returns:
        (losses of shape (N,), dloss/dlogits of shape (N, K)), unaveraged.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = log_norm - shifted[rows, y]
    grad = softmax(logits)
    grad[rows, y] -= 1.0
    return losses, grad


class Head(BaseModel):
    """Common interface of the classification heads."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @property
    def in_features(self) -> int:
        raise NotImplementedError

    @property
    def num_classes(self) -> int:
        raise NotImplementedError

    def params(self) -> List[np.ndarray]:
        raise NotImplementedError

    def with_params(self, params: Sequence[np.ndarray]) -> "Head":
        raise NotImplementedError

    def _check_width(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[-1] != self.in_features:
            raise DimensionError(f"features have width {Z.shape[-1]}, head expects {self.in_features}")
        return Z

    def forward(self, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, Z: np.ndarray, grad_logits: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """Parameter gradients (summed over rows) and per-row feature gradients."""
        raise NotImplementedError

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(np.atleast_2d(Z)), axis=1)

    def loss_and_grads(self, Z: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray], np.ndarray]:
        """Mean cross-entropy, its parameter gradients, and per-row feature gradients of the summed loss."""
        Z = np.atleast_2d(self._check_width(Z))
        y = np.atleast_1d(y)
        losses, grad_logits = cross_entropy(self.forward(Z), y)
        n = Z.shape[0]
        param_grads, grad_Z = self.backward(Z, grad_logits)
        return float(losses.mean()), [g / n for g in param_grads], grad_Z


class LinearHead(Head):
    """Logits ``U^T z + biases``; column k of U is the class-k weight vector."""
    U: np.ndarray = Field(description="r x K class weight columns")
    biases: np.ndarray = Field(description="length-K class biases")

    @model_validator(mode="after")
    def _check(self):
        if self.U.ndim != 2 or self.U.shape[1] < 2:
            raise DimensionError(f"U must be r x K with K >= 2, got {self.U.shape}")
        if self.biases.shape != (self.U.shape[1],):
            raise DimensionError(f"biases have shape {self.biases.shape}, expected ({self.U.shape[1]},)")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.biases))):
            raise ParameterError("linear head parameters must be finite")
        return self

    @property
    def in_features(self) -> int:
        return self.U.shape[0]

    @property
    def num_classes(self) -> int:
        return self.U.shape[1]

    def params(self) -> List[np.ndarray]:
        return [self.U, self.biases]

    def with_params(self, params: Sequence[np.ndarray]) -> "LinearHead":
        return LinearHead(U=params[0], biases=params[1])

    def forward(self, Z: np.ndarray) -> np.ndarray:
        Z = self._check_width(Z)
        return Z @ self.U + self.biases

    def backward(self, Z, grad_logits):
        Z = np.atleast_2d(Z)
        return [Z.T @ grad_logits, grad_logits.sum(axis=0)], grad_logits @ self.U.T

    def binary_weights(self) -> Tuple[np.ndarray, float]:
        """For K=2: ``u = u_1 - u_0`` and the matching scalar bias; class 1 is label +1."""
        if self.num_classes != 2:
            raise UnsupportedHeadError(f"binary weights need K=2, head has K={self.num_classes}")
        return self.U[:, 1] - self.U[:, 0], float(self.biases[1] - self.biases[0])


class MlpHead(Head):
    """Dense ReLU network; weights[i] has shape (fan_in, fan_out)."""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise DimensionError("MLP needs matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise DimensionError(f"layer {i} expects {W.shape[0]} inputs, previous layer gives {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ParameterError(f"layer {i} has non-finite parameters")
        if self.weights[-1].shape[1] < 2:
            raise DimensionError("MLP must output at least two classes")
        return self

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpHead":
        return MlpHead(weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    def _forward_cached(self, Z: np.ndarray):
        pre_acts = []
        a = Z
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            if i == last:
                return z, pre_acts
            pre_acts.append(z)
            a = np.maximum(z, 0.0)

    def forward(self, Z: np.ndarray) -> np.ndarray:
        Z = self._check_width(Z)
        logits, _ = self._forward_cached(Z)
        return logits

    def backward(self, Z, grad_logits):
        Z = np.atleast_2d(Z)
        _, pre_acts = self._forward_cached(Z)
        inputs = [Z] + [np.maximum(z, 0.0) for z in pre_acts]
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        g = grad_logits
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (pre_acts[i - 1] > 0)
        return grads, g


AnyHead = Union[LinearHead, MlpHead]


class Classifier(BaseModel):
    """The end-to-end model ``h(x) = C(W x + b)`` seen by attacks and certificates."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    projection: ProjectionModel
    head: AnyHead

    @model_validator(mode="after")
    def _check(self):
        if self.projection.r != self.head.in_features:
            raise DimensionError(f"projection gives r={self.projection.r} features, head expects {self.head.in_features}")
        return self

    @property
    def D(self) -> int:
        return self.projection.D

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.head.forward(project(self.projection, np.atleast_2d(X)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def loss_and_input_grad(self, X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-row cross-entropy and its gradient with respect to each input row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(y)
        Z = project(self.projection, X)
        losses, grad_logits = cross_entropy(self.head.forward(Z), y)
        _, grad_Z = self.head.backward(Z, grad_logits)
        return losses, grad_Z @ self.projection.W


def input_gradient(head: AnyHead, projection: ProjectionModel, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of the cross-entropy at ``x`` with respect to the raw input, ``W^T dloss/dz``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != projection.D:
        raise DimensionError(f"x must be a vector of length {projection.D}, got shape {x.shape}")
    _, grad = Classifier(projection=projection, head=head).loss_and_input_grad(x[None, :], np.array([y]))
    return grad[0]


class Adam:
    """Adam with bias correction over a flat list of parameter arrays."""

    def __init__(self, params: Sequence[np.ndarray], config: TrainConfig):
        self.config = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        c = self.config
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1 ** self.t)
            v_hat = self.v[i] / (1 - c.beta2 ** self.t)
            out.append(p - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps))
        return out


def _check_labels(Z: np.ndarray, y: np.ndarray, K: Optional[int]) -> Tuple[np.ndarray, np.ndarray, int]:
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise DimensionError(f"features {Z.shape} and labels {y.shape} do not match")
    K = int(y.max()) + 1 if K is None else K
    if y.min() < 0 or y.max() >= K:
        raise ParameterError(f"labels must lie in 0..{K - 1}")
    return Z, y, max(K, 2)


def _train(head: Head, Z: np.ndarray, y: np.ndarray, config: TrainConfig, what: str) -> Tuple[Head, TrainLog]:
    rng = SeededRng(config.seed).spawn(1)
    adam = Adam(head.params(), config)
    log = TrainLog()
    N = Z.shape[0]
    epochs = tqdm(range(1, config.epochs + 1), desc=f"train {what}", disable=not config.verbose, leave=False)
    for epoch in epochs:
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = head.loss_and_grads(Z[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * idx.size
            params = adam.step(head.params(), grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(epoch, float("nan"))
            head = head.with_params(params)
        acc = float(np.mean(head.predict(Z) == y))
        log.epochs.append(EpochStats(epoch=epoch, loss=total / N, accuracy=acc))
        logger.debug("%s epoch %d: loss %.5f, train acc %.4f", what, epoch, total / N, acc)
    if log.epochs:
        logger.info("%s trained: final loss %.4f, train acc %.4f", what, log.epochs[-1].loss, log.epochs[-1].accuracy)
    return head, log


def init_mlp(in_features: int, num_classes: int, config: TrainConfig) -> MlpHead:
    """He-uniform fan-in initialisation for ReLU layers, LeCun-uniform for the output layer."""
    rng = SeededRng(config.seed).spawn(0)
    sizes = [in_features, *config.hidden, num_classes]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 3.0 if i == len(sizes) - 2 else 6.0
        limit = np.sqrt(gain / fan_in)
        weights.append(rng.generator.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpHead(weights=tuple(weights), biases=tuple(biases))


def train_mlp(Z: np.ndarray, y: np.ndarray, config: TrainConfig, num_classes: Optional[int] = None) -> Tuple[MlpHead, TrainLog]:
    """
    Trains the ReLU MLP head with Adam on softmax cross-entropy.

    Batches are reshuffled every epoch from the config seed; the last partial
    batch is kept. Raises DivergenceError if the loss becomes non-finite.
    """
    Z, y, K = _check_labels(Z, y, num_classes)
    return _train(init_mlp(Z.shape[1], K, config), Z, y, config, "mlp")


def fit_linear_head(Z: np.ndarray, y: np.ndarray, config: TrainConfig, num_classes: Optional[int] = None) -> Tuple[LinearHead, TrainLog]:
    """Multinomial logistic regression from a zero start, trained like ``train_mlp``."""
    Z, y, K = _check_labels(Z, y, num_classes)
    head = LinearHead(U=np.zeros((Z.shape[1], K)), biases=np.zeros(K))
    return _train(head, Z, y, config, "linear")


def forward(head: AnyHead, Z: np.ndarray) -> np.ndarray:
    """Raw logits of ``head`` on feature rows ``Z``."""
    return head.forward(np.atleast_2d(Z))


def layer_matrices(head: AnyHead) -> List[np.ndarray]:
    if isinstance(head, LinearHead):
        return [head.U]
    if isinstance(head, MlpHead):
        return list(head.weights)
    raise UnsupportedHeadError(f"unknown head type {type(head).__name__}")


def lipschitz_upper_bound(head: AnyHead) -> float:
    """Product of the layers' spectral norms; an l2 Lipschitz bound because ReLU is 1-Lipschitz."""
    bound = 1.0
    for W in layer_matrices(head):
        bound *= spectral_norm(W)
    return bound
