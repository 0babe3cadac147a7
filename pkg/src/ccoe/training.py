"""Frozen-backbone training: hand-rolled Adam, masked NLL, and the three
training entry points (backbone pretraining, expert fitting, planner fitting).

The optimizer is constructed from an explicit parameter dict, so what is
trainable is decided by set membership, not by zeroing gradients: a frozen
backbone's tensors are simply never handed to the optimizer, and
``backward_batch`` never computes their gradients in the first place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import domains as dom
from .decoding import greedy_decode
from .errors import ConfigError, DatasetError, DegenerateBatchError, DivergenceError
from .model import (
    BackboneModel,
    ExpertSubnetwork,
    copy_params,
    init_backbone,
)
from .net import GradKey, backward_batch, forward_batch
from .rng import Rng
from .tokenizer import EOS, PAD, decode

LN_EPS_DENOM = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    grad_clip: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 100
    schedule: str = "cosine"  # "cosine" | "constant"
    min_lr_frac: float = 0.05
    snapshot_every: int = 250  # divergence fallback granularity
    log_every: int = 50

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        return self


@dataclass
class LossRecord:
    step: int
    loss: float
    token_accuracy: float

    def to_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, "token_accuracy": self.token_accuracy}


def lr_at(cfg: TrainConfig, step: int) -> float:
    base = cfg.learning_rate
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return base
    span = max(1, cfg.steps - cfg.warmup_steps)
    prog = min(1.0, (step - cfg.warmup_steps) / span)
    lo = base * cfg.min_lr_frac
    return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * prog))


class Adam:
    """Adam over an explicit (component, name) -> array parameter dict.

    Holding a tensor in ``params`` is what makes it trainable; backbone
    tensors are excluded by never being added.
    """

    def __init__(self, params: dict[GradKey, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[GradKey, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        if cfg.grad_clip > 0:
            sq = 0.0
            for g in grads.values():
                sq += float((g.astype(np.float64) ** 2).sum())
            norm = math.sqrt(sq)
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / (norm + 1e-12)
                for g in grads.values():
                    g *= scale
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for key, g in grads.items():
            p = self.params[key]
            m = self.m[key]
            v = self.v[key]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def nll_loss(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean masked negative log-likelihood and its gradient w.r.t. logits.

    ``logits`` may be [t,V] or [b,t,V]; targets/mask match its leading shape.
    The returned gradient is softmax(logits) minus the one-hot targets, scaled
    by mask / mask.sum(). The logits buffer is not modified.
    """
    if logits.ndim == 2:
        logits, targets, mask = logits[None], np.asarray(targets)[None], np.asarray(mask)[None]
        squeeze = True
    else:
        squeeze = False
    mask = mask.astype(logits.dtype)
    denom = float(mask.sum())
    if denom <= 0:
        raise DegenerateBatchError("loss mask selects no positions")
    b, t, vsz = logits.shape
    work = logits - logits.max(axis=-1, keepdims=True)
    np.exp(work, out=work)
    sumexp = work.sum(axis=-1, keepdims=True)
    bi, ti = np.meshgrid(np.arange(b), np.arange(t), indexing="ij")
    tgt = np.clip(targets, 0, vsz - 1)
    p_target = work[bi, ti, tgt] / sumexp[..., 0]
    logp = np.log(np.maximum(p_target, LN_EPS_DENOM))
    loss = float(-(logp * mask).sum() / denom)
    work /= sumexp  # now softmax probabilities
    work[bi, ti, tgt] -= 1.0
    work *= (mask / denom)[..., None]
    dlogits = work[0] if squeeze else work
    return loss, dlogits


def batchify(examples: list[dom.TrainExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to batch max length; returns (tokens, next-token targets, mask)."""
    width = max(len(e.ids) for e in examples)
    b = len(examples)
    tokens = np.full((b, width), PAD, dtype=np.int64)
    targets = np.full((b, width), PAD, dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.float32)
    for i, e in enumerate(examples):
        n = len(e.ids)
        tokens[i, :n] = e.ids
        targets[i, : n - 1] = e.ids[1:]
        mask[i, : len(e.mask)] = e.mask
    return tokens, targets, mask


def _token_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    pred = logits.argmax(axis=-1)
    hit = ((pred == targets) * mask).sum()
    return float(hit / max(mask.sum(), 1.0))


def loss_and_grads(
    backbone: BackboneModel,
    expert: ExpertSubnetwork | None,
    tokens: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    trainable: set[GradKey],
) -> tuple[float, float, dict[GradKey, np.ndarray]]:
    """Forward + masked NLL + backward restricted to ``trainable``."""
    logits, _, tape = forward_batch(backbone, tokens, expert=expert, want_tape=True)
    loss, dlogits = nll_loss(logits, targets, mask)
    grads = backward_batch(backbone, tape, trainable, expert=expert, dlogits=dlogits)
    acc = _token_accuracy(logits, targets, mask)
    return loss, acc, grads


def _run_training(
    backbone: BackboneModel,
    expert: ExpertSubnetwork | None,
    trainable_params: dict[GradKey, np.ndarray],
    sample_batch,
    cfg: TrainConfig,
) -> list[LossRecord]:
    cfg.validate()
    opt = Adam(trainable_params, cfg)
    trainable = set(trainable_params)
    curve: list[LossRecord] = []
    snapshot = {k: v.copy() for k, v in trainable_params.items()}
    for step in range(cfg.steps):
        tokens, targets, mask = batchify(sample_batch(step))
        loss, acc, grads = loss_and_grads(backbone, expert, tokens, targets, mask, trainable)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at step {step}", last_good=snapshot
            )
        opt.step(grads, lr_at(cfg, step))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append(LossRecord(step=step, loss=loss, token_accuracy=acc))
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            snapshot = {k: v.copy() for k, v in trainable_params.items()}
    return curve


def pretrain_backbone(
    config, cfg: TrainConfig, domain_names: tuple[str, ...] = dom.DOMAIN_NAMES
) -> tuple[BackboneModel, list[LossRecord]]:
    """Train a fresh backbone on the tagged mixture of all domains, then
    freeze it permanently."""
    rng = Rng(cfg.seed)
    model = init_backbone(config, rng.child("init"))
    data_rng = rng.child("data")
    names = tuple(domain_names)

    def sample_batch(step: int) -> list[dom.TrainExample]:
        return [
            dom.sample_example(dom.DOMAINS[names[int(data_rng.integers(0, len(names)))]],
                               data_rng, tagged=True)
            for _ in range(cfg.batch_size)
        ]

    trainable = {("backbone", k): v for k, v in model.params.items()}
    curve = _run_training(model, None, trainable, sample_batch, cfg)
    model.freeze()
    return model, curve


@dataclass
class ExpertTrainResult:
    expert: ExpertSubnetwork
    curve: list[LossRecord]
    seen_payloads: set[str] = field(default_factory=set)


def train_expert(
    expert: ExpertSubnetwork,
    backbone: BackboneModel,
    domain: dom.SyntheticDomain,
    cfg: TrainConfig,
) -> ExpertTrainResult:
    """Fit the expert's parameters against the frozen backbone (the backbone
    never enters the optimizer's parameter set)."""
    if not backbone.frozen:
        raise ConfigError("expert training requires a frozen backbone")
    data_rng = Rng(cfg.seed).child("expert-data", domain.name)
    seen: set[str] = set()

    def sample_batch(step: int) -> list[dom.TrainExample]:
        batch = [dom.sample_example(domain, data_rng, tagged=False) for _ in range(cfg.batch_size)]
        seen.update(e.payload for e in batch)
        return batch

    trainable = {("expert", k): v for k, v in expert.params.items()}
    curve = _run_training(backbone, expert, trainable, sample_batch, cfg)
    return ExpertTrainResult(expert=expert, curve=curve, seen_payloads=seen)


def evaluate_exact_match(
    backbone: BackboneModel,
    expert: ExpertSubnetwork | None,
    domain: dom.SyntheticDomain,
    payloads: list[str],
) -> float:
    """Fraction of payloads whose full greedy answer (up to EOS) matches the
    domain function exactly; neutral-tag plain-form prompts."""
    hits = 0
    for payload in payloads:
        prompt, want = dom.eval_prompt(domain, payload)
        out = greedy_decode(backbone, expert, prompt, max_new=len(want) + 2)
        if out and out[-1] == EOS and decode(out[:-1]) == want:
            hits += 1
    return hits / max(len(payloads), 1)


# --- planner training --------------------------------------------------------


@dataclass
class PlannerStep:
    tokens: list[int]
    label: int  # expert id, or routing.STOP for the stop decision


@dataclass
class PlannerTask:
    steps: list[PlannerStep]
    order: tuple[str, ...]  # ground-truth domain order ("" steps excluded)
    kind: str  # "single" | "double"


def build_planner_dataset(
    domain_to_expert: dict[str, int],
    n_tasks: int,
    rng: Rng,
    double_frac: float = 0.5,
) -> list[PlannerTask]:
    """Supervised routing tasks with teacher-forced carried context.

    Each composite task becomes per-step (subtask tokens, expert id) pairs
    plus a final STOP step whose context carries the finished answer.
    """
    from .routing import STOP

    tasks: list[PlannerTask] = []
    for _ in range(n_tasks):
        n_steps = 2 if rng.uniform() < double_frac else 1
        ct = dom.sample_composite(rng, n_steps)
        steps = []
        carried = None
        for i, name in enumerate(ct.order):
            if name not in domain_to_expert:
                raise DatasetError(f"task references domain {name!r} with no expert")
            steps.append(
                PlannerStep(tokens=dom.subtask_tokens(i + 1, carried, ct.text),
                            label=domain_to_expert[name])
            )
            carried = ct.stages[i]
        steps.append(
            PlannerStep(tokens=dom.subtask_tokens(len(ct.order) + 1, carried, ct.text),
                        label=STOP)
        )
        tasks.append(PlannerTask(steps=steps, order=ct.order,
                                 kind="single" if n_steps == 1 else "double"))
    return tasks


def shuffle_task_labels(tasks: list[PlannerTask], expert_ids: list[int], rng: Rng) -> list[PlannerTask]:
    """Control condition: relabel every step uniformly at random."""
    from .routing import STOP

    pool = list(expert_ids) + [STOP]
    out = []
    for task in tasks:
        steps = [
            PlannerStep(tokens=s.tokens, label=pool[int(rng.integers(0, len(pool)))])
            for s in task.steps
        ]
        out.append(PlannerTask(steps=steps, order=task.order, kind=task.kind))
    return out


def _label_slot(planner, label: int) -> int:
    from .routing import STOP

    if label == STOP:
        return planner.stop_index()
    if label not in planner.indicator_ids:
        raise DatasetError(f"label references unknown expert {label}")
    return planner.indicator_ids.index(label)


def train_planner(
    planner,
    backbone: BackboneModel,
    tasks: list[PlannerTask],
    cfg: TrainConfig,
) -> tuple[object, list[LossRecord]]:
    """Per-step cross-entropy over expert slots (STOP included); trains the
    indicator vectors, scorer, and the planner's own sublayers jointly."""
    from .routing import score_backward, score_tokens

    cfg.validate()
    if not backbone.frozen:
        raise ConfigError("planner training requires a frozen backbone")
    samples = [(s.tokens, _label_slot(planner, s.label)) for t in tasks for s in t.steps]
    if not samples:
        raise DatasetError("empty planner dataset")
    rng = Rng(cfg.seed).child("planner-order")
    params = planner.trainable_parameters()
    opt = Adam(params, cfg)
    trainable = set(params)
    curve: list[LossRecord] = []
    for step in range(cfg.steps):
        batch = [samples[int(rng.integers(0, len(samples)))] for _ in range(cfg.batch_size)]
        acc_grads: dict[GradKey, np.ndarray] = {}
        total_loss = 0.0
        hits = 0
        for tokens, slot in batch:
            scores, tape = score_tokens(planner, backbone, tokens, want_tape=True)
            z = scores - scores.max()
            ez = np.exp(z)
            probs = ez / ez.sum()
            total_loss += -math.log(max(float(probs[slot]), LN_EPS_DENOM))
            hits += int(np.argmax(scores) == slot)
            dscores = probs.copy()
            dscores[slot] -= 1.0
            dscores /= len(batch)
            g = score_backward(planner, backbone, tape, dscores, trainable)
            for k, v in g.items():
                if k in acc_grads:
                    acc_grads[k] += v
                else:
                    acc_grads[k] = v
        loss = total_loss / len(batch)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite planner loss at step {step}")
        opt.step(acc_grads, lr_at(cfg, step))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append(LossRecord(step=step, loss=loss, token_accuracy=hits / len(batch)))
    return planner, curve


@dataclass
class PlannerMetrics:
    single_selection_accuracy: float
    double_order_accuracy: float
    sequence_accuracy: float
    n_single: int
    n_double: int

    def to_dict(self) -> dict:
        return {
            "single_selection_accuracy": self.single_selection_accuracy,
            "double_order_accuracy": self.double_order_accuracy,
            "sequence_accuracy": self.sequence_accuracy,
            "n_single": self.n_single,
            "n_double": self.n_double,
        }


def evaluate_planner(planner, backbone: BackboneModel, tasks: list[PlannerTask]) -> PlannerMetrics:
    """Teacher-forced routing accuracy on held-out tasks."""
    from .routing import score_tokens

    n_single = n_double = 0
    single_hits = double_hits = seq_hits = 0
    for task in tasks:
        preds = []
        for s in task.steps:
            scores = score_tokens(planner, backbone, s.tokens)
            preds.append(int(np.argmax(scores)))
        labels = [_label_slot(planner, s.label) for s in task.steps]
        routed = preds[: len(task.order)]
        want = labels[: len(task.order)]
        if task.kind == "single":
            n_single += 1
            single_hits += int(routed == want)
        else:
            n_double += 1
            double_hits += int(routed == want)
        seq_hits += int(preds == labels)
    return PlannerMetrics(
        single_selection_accuracy=single_hits / max(n_single, 1),
        double_order_accuracy=double_hits / max(n_double, 1),
        sequence_accuracy=seq_hits / max(len(tasks), 1),
        n_single=n_single,
        n_double=n_double,
    )


def pretrain_probe_loss(backbone: BackboneModel, seed: int = 1234, batches: int = 4,
                        batch_size: int = 32) -> float:
    """Mean tagged mixed-domain loss on a fixed probe stream."""
    rng = Rng(seed).child("probe")
    total = 0.0
    names = dom.DOMAIN_NAMES
    for _ in range(batches):
        ex = [
            dom.sample_example(dom.DOMAINS[names[int(rng.integers(0, len(names)))]], rng, tagged=True)
            for _ in range(batch_size)
        ]
        tokens, targets, mask = batchify(ex)
        logits, _, _ = forward_batch(backbone, tokens)
        loss, _ = nll_loss(logits, targets, mask)
        total += loss
    return total / batches
