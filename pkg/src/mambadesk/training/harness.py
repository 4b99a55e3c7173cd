"""Training loop, evaluation and finite-difference gradient checking."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..blocks import EVAL, Mode, ModelConfig, TokenModel
from ..numerics import ops
from ..numerics.tensor import Tape, Tensor
from .optim import OptimConfig, OptimizerState, adamw_step, clip_global_norm, lr_at
from .tasks import Batch, TaskSpec, make_batch

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


@dataclass
class LoopConfig:
    max_steps: int = 20000
    batch_size: int = 32
    eval_every: int = 250
    eval_size: int = 256
    eval_seed: int = 12345
    target_accuracy: float = 0.0  # stop early once eval accuracy reaches this; 0 disables
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class TrainRun:
    task: TaskSpec
    model: ModelConfig
    optim: OptimConfig = field(default_factory=OptimConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    steps_done: int = 0
    trained: TokenModel | None = None

    def final(self, split: str = "eval") -> dict:
        rows = [r for r in self.history if r["split"] == split]
        return rows[-1] if rows else {}

    def best_accuracy(self) -> float:
        return max((r["accuracy"] for r in self.history if r["split"] == "eval"), default=0.0)


def scored_logits(model: TokenModel, batch: Batch, mode: Mode = EVAL) -> Tensor:
    """Logits at the scored positions, shape (B, T, V)."""
    logits = model.forward(batch.inputs, batch.dec_inputs, mode)
    if batch.dec_inputs is not None:
        return logits
    L = logits.shape[1]
    return ops.take(logits, L - batch.readout, L, axis=1)


def batch_loss(model: TokenModel, batch: Batch, mode: Mode = EVAL) -> tuple[Tensor, Tensor]:
    logits = scored_logits(model, batch, mode)
    return ops.cross_entropy(logits, batch.targets), logits


def accuracy(logits: Tensor, targets: np.ndarray) -> float:
    return float((logits.data.argmax(axis=-1) == targets).mean())


def evaluate(model: TokenModel, batch: Batch, chunk: int = 128) -> tuple[float, float]:
    """Deterministic-mode (loss, token accuracy) over ``batch``."""
    n = batch.inputs.shape[0]
    loss_sum = correct = count = 0.0
    for s in range(0, n, chunk):
        sub = Batch(
            batch.inputs[s : s + chunk],
            batch.targets[s : s + chunk],
            None if batch.dec_inputs is None else batch.dec_inputs[s : s + chunk],
        )
        loss, logits = batch_loss(model, sub, EVAL)
        loss_sum += loss.item() * sub.targets.size
        correct += (logits.data.argmax(axis=-1) == sub.targets).sum()
        count += sub.targets.size
    return loss_sum / count, correct / count


def train(run: TrainRun, on_eval=None) -> TrainRun:
    """Run AdamW on freshly sampled batches; evaluates on a fixed held-out set.

    ``on_eval(row)`` is called for each appended metric row.
    """
    lc, oc = run.loop, run.optim
    model = TokenModel(run.model, seed=run.seed)
    params = model.parameters()
    for name, p in model.named().items():
        p.name = name
    st = OptimizerState.from_config(oc)
    data_rng = np.random.default_rng([run.seed, 1])
    drop_rng = np.random.default_rng([run.seed, 2])
    eval_batch = make_batch(run.task, np.random.default_rng(lc.eval_seed), lc.eval_size)
    mode = Mode(training=True, rng=drop_rng)

    def record(step, split, loss, acc):
        row = {"step": step, "split": split, "loss": float(loss), "accuracy": float(acc)}
        run.history.append(row)
        if on_eval is not None:
            on_eval(row)

    l0, a0 = evaluate(model, eval_batch)
    record(0, "eval", l0, a0)
    initial = None
    bad = 0
    win_loss = win_acc = 0.0
    win_n = 0
    t0 = time.perf_counter()
    step = 0
    for step in range(1, lc.max_steps + 1):
        batch = make_batch(run.task, data_rng, lc.batch_size)
        with Tape() as tape:
            loss, logits = batch_loss(model, batch, mode)
        grads_map = tape.backward(loss)
        grads = [grads_map[p] for p in params]
        grads, _ = clip_global_norm(grads, oc.grad_clip)
        adamw_step(params, grads, st, lr=lr_at(step - 1, oc.lr, oc.warmup_steps, lc.max_steps))

        lv = loss.item()
        if initial is None:
            initial = lv
        bad = bad + 1 if lv > lc.divergence_factor * initial else 0
        if bad >= lc.divergence_patience:
            raise TrainingDiverged(f"loss above {lc.divergence_factor}x initial for {bad} steps", run.history)
        win_loss += lv
        win_acc += accuracy(logits, batch.targets)
        win_n += 1

        if step % lc.eval_every == 0 or step == lc.max_steps:
            record(step, "train", win_loss / win_n, win_acc / win_n)
            win_loss = win_acc = 0.0
            win_n = 0
            el, ea = evaluate(model, eval_batch)
            record(step, "eval", el, ea)
            log.info("step %d eval loss %.4f acc %.4f (%.1fs)", step, el, ea, time.perf_counter() - t0)
            if lc.target_accuracy and ea >= lc.target_accuracy:
                break
    run.steps_done = step
    run.trained = model
    return run


# (offset, weight) pairs; the derivative is sum(w * f(x + k h)) / h
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
}


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]


def _objective(model: TokenModel, batch: Batch, kind: str, probe: np.ndarray | None) -> Tensor:
    if kind == "task":
        return batch_loss(model, batch, EVAL)[0]
    logits = model.forward(batch.inputs, batch.dec_inputs, EVAL)
    return ops.sum(ops.mul(logits, Tensor(probe)))


def grad_check(
    model: TokenModel,
    batch: Batch,
    eps: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
    objective: str = "probe",
    order: int = 4,
) -> GradCheckResult:
    """Compare tape gradients against central differences for every parameter.

    ``objective="probe"`` differentiates a fixed random projection of the
    logits at every position, so each parameter sees an O(1) signal;
    ``"task"`` uses the training loss, whose gradients for parameters far
    from the scored positions can sit at the finite-difference round-off floor.

    The error for one parameter tensor is ``max|a - f| / max(max|a|, max|f|, 1e-8)``
    where ``a`` is the analytic and ``f`` the finite-difference gradient.
    With ``max_elements`` only a random subset of entries per tensor is probed.
    Runs in deterministic mode (dropout off).

    ``order=2`` is the plain central difference ``(f(+h) - f(-h)) / 2h``;
    ``order=4`` is the five-point central stencil. Gradients of the SSM
    diagonal are scaled by the small step sizes and can be ~1e-6, so the
    round-off of a second-order difference at ``h = 1e-5`` (~1e-10 absolute)
    already costs 1e-4 relative. The fourth-order stencil allows
    ``h = 1e-3``, where round-off and truncation both sit near 1e-13.
    """
    if objective not in ("probe", "task"):
        raise ValueError(f"objective must be 'probe' or 'task', got {objective!r}")
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}, got {order}")
    stencil = STENCILS[order]
    named = model.named()
    rng = np.random.default_rng(seed)
    probe = None
    if objective == "probe":
        probe = rng.normal(size=model.forward(batch.inputs, batch.dec_inputs, EVAL).shape)
    with Tape() as tape:
        loss = _objective(model, batch, objective, probe)
    grads = tape.backward(loss)

    def f() -> float:
        return _objective(model, batch, objective, probe).item()

    per: dict[str, float] = {}
    for name, p in named.items():
        base = p.data
        analytic = grads[p].reshape(-1)
        idx = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            idx = np.sort(rng.choice(base.size, max_elements, replace=False))
        fd = np.empty(idx.size)
        work = base.copy().reshape(-1)
        for j, i in enumerate(idx):
            orig = work[i]
            acc = 0.0
            for k, w in stencil:
                work[i] = orig + k * eps
                p.data = work.reshape(base.shape)
                acc += w * f()
            work[i] = orig
            fd[j] = acc / eps
        p.data = base
        a = analytic[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-8)
        per[name] = float(np.abs(a - fd).max(initial=0.0) / scale)
    worst = max(per, key=per.get)
    return GradCheckResult(per[worst], worst, per)
