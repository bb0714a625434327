"""
Untargeted evasion attacks on ``h(x) = C(W x + b)``: FGSM, PGD and MIM
(white-box, gradient based) and the Square attack (black-box, score based),
under l-inf and l2 threat models, and robust-accuracy evaluation.

All attacks work on batches of rows; the single-example functions wrap the
batch versions. Perturbed inputs are projected back onto the epsilon-ball
after every step and, unless disabled, clipped to the [0, 1] pixel box.
"""

import logging
import math
import zlib
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from certificates import ThreatModel
from datasets import LabeledDataset
from errors import DimensionError, ParameterError
from heads import AnyHead, Classifier
from numerics import SeededRng, rng_normal, rng_uniform
from projection import ProjectionModel

logger = logging.getLogger(__name__)

AttackKind = Literal["fgsm", "pgd", "mim", "square"]

PGD_STEPS = 40
PGD_STEP_FRACTION = 0.25
MIM_STEPS = 20
MIM_STEP_FRACTION = 0.2
MIM_MOMENTUM = 1.0
SQUARE_BUDGET = 5000
SQUARE_P_INIT = 0.3
# Square-window area fraction halves at these points of a 10,000-query run;
# the breakpoints are rescaled to the configured budget.
SQUARE_SCHEDULE = (10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000)
SQUARE_DRAW_BLOCK = 384
EVAL_CHUNK = 1000
BALL_SLACK = 1e-9


class AttackConfig(BaseModel):
    """One attack and its hyperparameters; unset steps/step fractions take the per-kind defaults."""
    model_config = ConfigDict(frozen=True)

    kind: AttackKind
    threat: ThreatModel
    steps: Optional[int] = Field(default=None, ge=1)
    step_fraction: Optional[float] = Field(default=None, gt=0, description="step size as a fraction of epsilon")
    momentum: float = Field(default=MIM_MOMENTUM, ge=0)
    budget: int = Field(default=SQUARE_BUDGET, description="Square attack query budget")
    p_init: float = Field(default=SQUARE_P_INIT, gt=0, le=1)
    seed: int = Field(default=0, ge=0)
    clip_to_unit_box: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "square":
            if self.budget < 1:
                raise ParameterError(f"square attack budget must be >= 1, got {self.budget}")
            if self.threat.p != "inf":
                raise ParameterError("the square attack is implemented for the l-inf threat model only")
        return self

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return {"pgd": PGD_STEPS, "mim": MIM_STEPS}.get(self.kind, 1)

    @property
    def alpha(self) -> float:
        frac = self.step_fraction
        if frac is None:
            frac = {"pgd": PGD_STEP_FRACTION, "mim": MIM_STEP_FRACTION}.get(self.kind, 1.0)
        return frac * self.threat.epsilon


class AttackResult(BaseModel):
    """Outcome of attacking one example."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x_adv: np.ndarray
    success: bool = Field(description="prediction on x_adv differs from the label")
    queries: int
    perturbation_norm: float
    zero_gradient: bool = False
    velocity: Optional[np.ndarray] = Field(default=None, description="final MIM momentum buffer")


class BatchResult(BaseModel):
    """Outcome of attacking a batch of rows."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x_adv: np.ndarray
    success: np.ndarray
    queries: np.ndarray
    zero_gradient: np.ndarray
    velocity: Optional[np.ndarray] = None

    def item(self, i: int, x: np.ndarray, p: str) -> AttackResult:
        delta = self.x_adv[i] - x
        return AttackResult(
            x_adv=self.x_adv[i],
            success=bool(self.success[i]),
            queries=int(self.queries[i]),
            perturbation_norm=perturbation_norm(delta, p),
            zero_gradient=bool(self.zero_gradient[i]),
            velocity=None if self.velocity is None else self.velocity[i],
        )


def perturbation_norm(delta: np.ndarray, p: str) -> float:
    return float(np.max(np.abs(delta))) if p == "inf" else float(np.linalg.norm(delta))


def _row_norms(A: np.ndarray, p: str) -> np.ndarray:
    if p == "inf":
        return np.abs(A).max(axis=1)
    if p == "1":
        return np.abs(A).sum(axis=1)
    return np.sqrt((A * A).sum(axis=1))


def project_ball(delta: np.ndarray, epsilon: float, p: str) -> np.ndarray:
    """Euclidean projection of each row of ``delta`` onto the l_p ball of radius epsilon."""
    if p == "inf":
        return np.clip(delta, -epsilon, epsilon)
    norms = _row_norms(delta, "2")
    scale = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * scale[:, None]


def _finish(X: np.ndarray, X_adv: np.ndarray, threat: ThreatModel, clip: bool) -> np.ndarray:
    X_adv = X + project_ball(X_adv - X, threat.epsilon, threat.p)
    if clip:
        X_adv = np.clip(X_adv, 0.0, 1.0)
    return X_adv


def _ascent_direction(g: np.ndarray, p: str) -> np.ndarray:
    """Sign of g for l-inf, g / ||g||_2 for l2 (zero rows stay zero)."""
    if p == "inf":
        return np.sign(g)
    norms = _row_norms(g, "2")
    return g / np.where(norms > 0, norms, 1.0)[:, None]


def row_streams(seed: int, X: np.ndarray, y: np.ndarray) -> List[SeededRng]:
    """
    One generator per row, keyed by the seed, the row's bytes and its label.

    A row draws the same numbers whatever batch or chunk it is attacked in.
    """
    base = SeededRng(seed)
    return [base.spawn(zlib.crc32(row.tobytes()), int(label)) for row, label in zip(X, y)]


class _UniformBuffer:
    """Per-row blocks of U[0, 1) draws, refilled from each row's own stream."""

    def __init__(self, streams: List[SeededRng], width: int):
        self.streams = streams
        self.width = width
        self.values = np.zeros((len(streams), width))
        self.pos = np.full(len(streams), width)

    def draw(self, rows: np.ndarray, k: int) -> np.ndarray:
        if k > self.width:
            raise ParameterError(f"cannot draw {k} values from blocks of {self.width}")
        for row in rows[self.pos[rows] + k > self.width]:
            self.values[row] = rng_uniform(self.streams[row], 0.0, 1.0, self.width)
            self.pos[row] = 0
        idx = self.pos[rows][:, None] + np.arange(k)[None, :]
        self.pos[rows] += k
        return self.values[rows[:, None], idx]


def _random_direction(rng: SeededRng, D: int, p: str) -> np.ndarray:
    if p == "inf":
        return np.where(rng_uniform(rng, 0.0, 1.0, D) < 0.5, -1.0, 1.0)
    d = rng_normal(rng, 0.0, 1.0, D)
    return d / np.linalg.norm(d)


def _random_start(rng: SeededRng, D: int, threat: ThreatModel) -> np.ndarray:
    eps = threat.epsilon
    if eps == 0.0:
        return np.zeros(D)
    if threat.p == "inf":
        return rng_uniform(rng, -eps, eps, D)
    radius = eps * rng_uniform(rng, 0.0, 1.0, 1)[0] ** (1.0 / D)
    return radius * _random_direction(rng, D, "2")


def _prepare(model: Classifier, X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.shape[1] != model.D:
        raise DimensionError(f"inputs have {X.shape[1]} features, model expects D={model.D}")
    if y.shape != (X.shape[0],):
        raise DimensionError(f"{y.shape[0]} labels for {X.shape[0]} inputs")
    return X, y


def _result(model: Classifier, X_adv, y, queries, zero_grad, velocity=None) -> BatchResult:
    return BatchResult(
        x_adv=X_adv,
        success=model.predict(X_adv) != y,
        queries=queries,
        zero_gradient=zero_grad,
        velocity=velocity,
    )


def fgsm_batch(model: Classifier, X: np.ndarray, y: np.ndarray, threat: ThreatModel, clip: bool = True) -> BatchResult:
    """One step of size epsilon along sign(grad) (l-inf) or grad / ||grad||_2 (l2)."""
    X, y = _prepare(model, X, y)
    _, g = model.loss_and_input_grad(X, y)
    zero = ~np.any(g != 0.0, axis=1)
    X_adv = _finish(X, X + threat.epsilon * _ascent_direction(g, threat.p), threat, clip)
    X_adv[zero] = X[zero]
    return _result(model, X_adv, y, np.ones(X.shape[0], dtype=np.int64), zero)


def pgd_batch(
    model: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    threat: ThreatModel,
    steps: int = PGD_STEPS,
    alpha: Optional[float] = None,
    seed: int = 0,
    clip: bool = True,
) -> BatchResult:
    """
    Projected gradient ascent on the cross-entropy from a random start in the ball.

    Rows whose gradient vanishes take a random step instead. The iterate with
    the highest loss seen is returned for each row. Random draws come from
    :func:`row_streams`, so a row's result does not depend on its batch.
    """
    if steps < 1:
        raise ParameterError(f"PGD needs at least one step, got {steps}")
    X, y = _prepare(model, X, y)
    streams = row_streams(seed, X, y)
    alpha = threat.epsilon * PGD_STEP_FRACTION if alpha is None else alpha
    n, D = X.shape

    start = np.array([_random_start(rng, D, threat) for rng in streams]).reshape(n, D)
    X_cur = _finish(X, X + start, threat, clip)
    best = X_cur.copy()
    best_loss = np.full(n, -np.inf)
    for _ in range(steps):
        loss, g = model.loss_and_input_grad(X_cur, y)
        better = loss > best_loss
        best[better], best_loss[better] = X_cur[better], loss[better]
        step = _ascent_direction(g, threat.p)
        stalled = ~np.any(g != 0.0, axis=1)
        for i in np.flatnonzero(stalled):
            step[i] = _random_direction(streams[i], D, threat.p)
        X_cur = _finish(X, X_cur + alpha * step, threat, clip)
    loss, _ = model.loss_and_input_grad(X_cur, y)
    better = loss > best_loss
    best[better] = X_cur[better]
    return _result(model, best, y, np.full(n, steps + 1, dtype=np.int64), np.zeros(n, dtype=bool))


def mim_batch(
    model: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    threat: ThreatModel,
    steps: int = MIM_STEPS,
    alpha: Optional[float] = None,
    momentum: float = MIM_MOMENTUM,
    clip: bool = True,
) -> BatchResult:
    """
    Momentum iterative method: ``g <- mu g + grad / ||grad||_1``, then a step
    of size alpha along sign(g) (l-inf) or g / ||g||_2 (l2).
    """
    if steps < 1:
        raise ParameterError(f"MIM needs at least one step, got {steps}")
    X, y = _prepare(model, X, y)
    alpha = threat.epsilon * MIM_STEP_FRACTION if alpha is None else alpha
    n = X.shape[0]
    velocity = np.zeros_like(X)
    X_cur = X.copy()
    zero_first = np.zeros(n, dtype=bool)
    for t in range(steps):
        _, g = model.loss_and_input_grad(X_cur, y)
        l1 = _row_norms(g, "1")
        if t == 0:
            zero_first = l1 == 0.0
        velocity = momentum * velocity + g / np.where(l1 > 0, l1, 1.0)[:, None]
        X_cur = _finish(X, X_cur + alpha * _ascent_direction(velocity, threat.p), threat, clip)
    X_cur[zero_first] = X[zero_first]
    return _result(model, X_cur, y, np.full(n, steps, dtype=np.int64), zero_first, velocity)


def margin_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``logit_y - max_{k != y} logit_k``; negative means misclassified."""
    rows = np.arange(logits.shape[0])
    true = logits[rows, y]
    other = logits.copy()
    other[rows, y] = -np.inf
    return true - other.max(axis=1)


def square_window_fraction(query, budget: int, p_init: float = SQUARE_P_INIT):
    """
    Area fraction of the square window at a given query, halving at rescaled breakpoints.

    ``query`` may be an int or an array of per-row query counts.
    """
    scaled = np.asarray(query, dtype=np.float64) * 10000 / max(budget, 1)
    halvings = (scaled[..., None] > np.asarray(SQUARE_SCHEDULE)).sum(axis=-1)
    frac = p_init / 2.0 ** halvings
    return float(frac) if frac.ndim == 0 else frac


def _image_side(D: int, image_shape: Optional[Tuple[int, int]]) -> Tuple[int, int]:
    if image_shape is not None:
        if image_shape[0] * image_shape[1] != D:
            raise DimensionError(f"image shape {image_shape} does not match D={D}")
        return image_shape
    side = math.isqrt(D)
    if side * side != D:
        raise ParameterError(f"the square attack needs square images; D={D} is not a perfect square")
    return side, side


def square_batch(
    model: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    threat: ThreatModel,
    budget: int = SQUARE_BUDGET,
    seed: int = 0,
    p_init: float = SQUARE_P_INIT,
    clip: bool = True,
    image_shape: Optional[Tuple[int, int]] = None,
) -> BatchResult:
    """
    Score-based l-inf Square attack.

    Starts from vertical stripes of +-epsilon, then repeatedly proposes a
    random square window set to a random +-epsilon value and keeps it when the
    margin loss decreases. Only logits are read. Each model evaluation of a
    row counts as one query; a row stops at its first misclassification or
    when the budget is spent.

    Every row follows its own window schedule and its own random stream, so
    attacking a row alone or inside a batch gives the same result.
    """
    if budget < 1:
        raise ParameterError(f"square attack budget must be >= 1, got {budget}")
    if threat.p != "inf":
        raise ParameterError("the square attack is implemented for the l-inf threat model only")
    X, y = _prepare(model, X, y)
    n, D = X.shape
    H, Wd = _image_side(D, image_shape)
    eps = threat.epsilon
    draws = _UniformBuffer(row_streams(seed, X, y), max(SQUARE_DRAW_BLOCK, Wd))

    def evaluate(rows: np.ndarray, X_rows: np.ndarray) -> np.ndarray:
        return margin_loss(model.logits(X_rows), y[rows])

    all_rows = np.arange(n)
    stripes = eps * np.where(draws.draw(all_rows, Wd) < 0.5, -1.0, 1.0)
    X_best = X + np.broadcast_to(stripes[:, None, :], (n, H, Wd)).reshape(n, D)
    if clip:
        X_best = np.clip(X_best, 0.0, 1.0)
    best_loss = evaluate(all_rows, X_best)
    queries = np.ones(n, dtype=np.int64)
    if eps == 0.0:
        return _result(model, X_best, y, queries, np.zeros(n, dtype=bool))

    X_img = X.reshape(n, H, Wd)
    rows_idx = np.arange(H)[None, :, None]
    cols_idx = np.arange(Wd)[None, None, :]
    side_max = min(H, Wd) - 1 if min(H, Wd) > 1 else 1
    while True:
        active = np.flatnonzero((best_loss >= 0) & (queries < budget))
        if active.size == 0:
            break
        frac = square_window_fraction(queries[active], budget, p_init)
        s = np.clip(np.rint(np.sqrt(frac * H * Wd)).astype(np.int64), 1, side_max)
        u = draws.draw(active, 3)
        r0 = np.minimum((u[:, 0] * (H - s + 1)).astype(np.int64), H - s)
        c0 = np.minimum((u[:, 1] * (Wd - s + 1)).astype(np.int64), Wd - s)
        signs = np.where(u[:, 2] < 0.5, -1.0, 1.0)

        delta = X_best[active].reshape(-1, H, Wd) - X_img[active]
        r0, c0, s = r0[:, None, None], c0[:, None, None], s[:, None, None]
        window = (rows_idx >= r0) & (rows_idx < r0 + s) & (cols_idx >= c0) & (cols_idx < c0 + s)
        target = eps * signs[:, None, None]
        # a window already at the proposed value would waste the query
        same = np.all(np.isclose(delta, target) | ~window, axis=(1, 2))
        signs[same] = -signs[same]
        delta = np.where(window, eps * signs[:, None, None], delta)
        cand = X_img[active] + delta
        if clip:
            cand = np.clip(cand, 0.0, 1.0)
        cand = cand.reshape(active.size, D)

        loss = evaluate(active, cand)
        queries[active] += 1
        accept = loss < best_loss[active]
        X_best[active[accept]] = cand[accept]
        best_loss[active[accept]] = loss[accept]

    return _result(model, X_best, y, queries, np.zeros(n, dtype=bool))


def attack_batch(
    model: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    config: AttackConfig,
    image_shape: Optional[Tuple[int, int]] = None,
) -> BatchResult:
    """Dispatches ``config`` to the matching batch attack."""
    clip = config.clip_to_unit_box
    if config.kind == "fgsm":
        return fgsm_batch(model, X, y, config.threat, clip=clip)
    if config.kind == "pgd":
        return pgd_batch(model, X, y, config.threat, steps=config.n_steps, alpha=config.alpha,
                         seed=config.seed, clip=clip)
    if config.kind == "mim":
        return mim_batch(model, X, y, config.threat, steps=config.n_steps, alpha=config.alpha,
                         momentum=config.momentum, clip=clip)
    return square_batch(model, X, y, config.threat, budget=config.budget, seed=config.seed, p_init=config.p_init,
                        clip=clip, image_shape=image_shape)


def _single(batch: BatchResult, x: np.ndarray, p: str) -> AttackResult:
    return batch.item(0, np.asarray(x, dtype=np.float64), p)


def fgsm(model: Classifier, x: np.ndarray, y: int, threat: ThreatModel, clip: bool = True) -> AttackResult:
    """Fast gradient sign method on one example."""
    return _single(fgsm_batch(model, x, y, threat, clip=clip), x, threat.p)


def pgd(model: Classifier, x: np.ndarray, y: int, threat: ThreatModel, steps: int = PGD_STEPS,
        seed: int = 0, clip: bool = True, alpha: Optional[float] = None) -> AttackResult:
    """PGD with random start on one example (default alpha = epsilon / 4)."""
    return _single(pgd_batch(model, x, y, threat, steps=steps, alpha=alpha, seed=seed, clip=clip), x, threat.p)


def mim(model: Classifier, x: np.ndarray, y: int, threat: ThreatModel, steps: int = MIM_STEPS,
        momentum: float = MIM_MOMENTUM, clip: bool = True, alpha: Optional[float] = None) -> AttackResult:
    """Momentum iterative method on one example (default alpha = epsilon / 5)."""
    return _single(mim_batch(model, x, y, threat, steps=steps, alpha=alpha, momentum=momentum, clip=clip), x, threat.p)


def square_attack(model: Classifier, x: np.ndarray, y: int, threat: ThreatModel, budget: int = SQUARE_BUDGET,
                  seed: int = 0, clip: bool = True, image_shape: Optional[Tuple[int, int]] = None) -> AttackResult:
    """Square attack on one example."""
    batch = square_batch(model, x, y, threat, budget=budget, seed=seed, clip=clip, image_shape=image_shape)
    return _single(batch, x, threat.p)


def adversarial_examples(
    projection: ProjectionModel,
    head: AnyHead,
    dataset: LabeledDataset,
    config: AttackConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Attacks every row of ``dataset`` in fixed-size chunks; returns (X_adv, success)."""
    model = Classifier(projection=projection, head=head)
    adv: List[np.ndarray] = []
    success: List[np.ndarray] = []
    for start in range(0, dataset.N, EVAL_CHUNK):
        stop = min(start + EVAL_CHUNK, dataset.N)
        result = attack_batch(model, dataset.X[start:stop], dataset.y[start:stop], config,
                              image_shape=dataset.image_shape)
        adv.append(result.x_adv)
        success.append(result.success)
    return np.vstack(adv), np.concatenate(success)


def robust_accuracy(projection: ProjectionModel, head: AnyHead, dataset: LabeledDataset, config: AttackConfig) -> float:
    """Fraction of examples still classified correctly after the attack; every example is attacked."""
    X_adv, _ = adversarial_examples(projection, head, dataset, config)
    model = Classifier(projection=projection, head=head)
    acc = float(np.mean(model.predict(X_adv) == dataset.y))
    logger.debug("%s %s eps=%.3f: robust accuracy %.4f", config.kind, config.threat.label, config.threat.epsilon, acc)
    return acc
