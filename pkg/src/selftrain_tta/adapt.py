"""Two-stage test-time self-training and the test-time baselines.

Stage 1 adapts a teacher copy of the source model with feature consistency
between weak and strong views (through a fresh predictor MLP).  Stage 2
distils the frozen teacher into a student copy with an added entropy penalty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .augment import STRONG, WEAK, AugPolicy, augment_batch
from .data import DatasetShard
from .diffgrad import AdamState, NonFiniteError, Tensor, adam_step, backward, no_grad
from .diffgrad import functional as F
from .metrics import MetricReport, mean_entropy
from .nets import ArchError, ModelBundle, Predictions, add_predictor, encode, forward, predictor_forward, \
    rotate_batch, rotation_head_forward
from .training import predict, task_loss

log = logging.getLogger(__name__)

STANDARD_BUDGETS = (64, 128, 256, 512)
STUDENT_SCOPES = ("all", "encoder", "head")


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptationConfig:
    n: int = 256
    teacher_steps: int | None = None
    student_steps: int | None = None
    epochs: int = 10
    batch_size: int = 32
    lam: float = 0.25
    lr: float = 3e-4
    seed: int = 0
    no_fixmatch: bool = False
    only_p: bool = False
    test_teacher: bool = False
    stop_grad_strong: bool = True
    predictor_init: str = "near_identity"
    student_scope: str = "all"
    box_weight: float = 1.0
    weak: AugPolicy = field(default_factory=lambda: WEAK)
    strong: AugPolicy = field(default_factory=lambda: STRONG)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("entropy weight must be non-negative")
        if self.n <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("n, batch_size must be positive and epochs non-negative")
        for name in ("teacher_steps", "student_steps"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.student_scope not in STUDENT_SCOPES:
            raise ValueError(f"student_scope must be one of {STUDENT_SCOPES}")
        if self.n not in STANDARD_BUDGETS:
            log.info("budget n=%d is outside the standard set %s", self.n, STANDARD_BUDGETS)

    @property
    def default_steps(self) -> int:
        return self.epochs * math.ceil(self.n / self.batch_size)

    @property
    def m_steps(self) -> int:
        return self.default_steps if self.teacher_steps is None else self.teacher_steps

    @property
    def n_steps(self) -> int:
        return self.default_steps if self.student_steps is None else self.student_steps

    @property
    def flags(self) -> str:
        on = [f.name for f in fields(self) if f.name in ("no_fixmatch", "only_p", "test_teacher")
              and getattr(self, f.name)]
        if not self.stop_grad_strong:
            on.append("both_branches")
        if self.predictor_init != "near_identity":
            on.append(f"predictor={self.predictor_init}")
        if self.student_scope != "all":
            on.append(f"scope={self.student_scope}")
        return "+".join(on)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weak"] = self.weak.to_dict()
        d["strong"] = self.strong.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown adaptation keys: {sorted(unknown)}")
        if "weak" in d:
            d["weak"] = AugPolicy.from_dict(d["weak"])
        if "strong" in d:
            d["strong"] = AugPolicy.from_dict(d["strong"])
        return cls(**d)


@dataclass
class PseudoLabelBatch:
    probs: np.ndarray
    boxes: np.ndarray | None = None


def _schedule(n: int, batch_size: int, steps: int, seed: int, stream: int):
    """Yield (step, indices): epochs of seeded permutations cut into batches."""
    step = 0
    epoch = 0
    while step < steps:
        order = np.random.default_rng([seed, stream, epoch]).permutation(n)
        for i in range(0, n, batch_size):
            if step >= steps:
                return
            yield step, order[i:i + batch_size]
            step += 1
        epoch += 1


def _check(loss: Tensor, what: str) -> None:
    if not np.isfinite(loss.data):
        raise NonFiniteError(what, "loss diverged")


# ---------------------------------------------------------------- stage 1

def consistency_loss(teacher: ModelBundle, images: np.ndarray, seed: int, indices,
                     weak: AugPolicy = WEAK, strong: AugPolicy = STRONG, stop_grad_strong: bool = False) -> Tensor:
    """Mean over the batch of ||f(strong(x)) - p(f(weak(x)))||^2 on pooled embeddings."""
    if not teacher.has_predictor:
        raise ArchError("consistency loss needs a predictor network")
    if len(images) == 0:
        raise AdaptationError("empty batch")
    xs = augment_batch(images, strong, seed, indices)
    xw = augment_batch(images, weak, seed, indices)
    b = len(images)
    if stop_grad_strong:
        with no_grad():
            zs = encode(teacher, xs)[1].detach()
        zw = encode(teacher, xw)[1]
    else:
        z = encode(teacher, np.concatenate([xs, xw]))[1]
        zs = F.gather(z, np.arange(b), axis=0)
        zw = F.gather(z, np.arange(b, 2 * b), axis=0)
    loss = F.mean(F.l2_norm_sq(zs - predictor_forward(teacher, zw), axis=-1))
    _check(loss, "consistency_loss")
    return loss


def adapt_teacher(teacher: ModelBundle, budget: np.ndarray, cfg: AdaptationConfig,
                  report: MetricReport | None = None, steps: int | None = None) -> ModelBundle:
    """Consistency training of encoder + fresh predictor; the task head is not touched.

    Returns the adapted teacher with the predictor discarded.
    """
    if len(budget) == 0:
        raise AdaptationError("empty adaptation budget")
    steps = cfg.m_steps if steps is None else steps
    model = teacher.copy()
    add_predictor(model, cfg.seed, cfg.predictor_init)
    params = {**model.group("enc."), **model.group("pred.")}
    state = AdamState(lr=cfg.lr)
    n = len(budget)
    for step, idx in _schedule(n, cfg.batch_size, steps, cfg.seed, 1):
        loss = consistency_loss(model, budget[idx], cfg.seed, step * n + idx, cfg.weak, cfg.strong,
                                cfg.stop_grad_strong)
        backward(loss)
        adam_step(params, state)
        if report is not None:
            report.losses.append(("teacher", step, float(loss.data)))
    if report is not None and steps:
        with no_grad():
            emb = encode(model, budget[:min(n, 128)])[1].data
        # a collapsed representation shows up as vanishing spread across images
        report.metrics["teacher_embedding_std"] = float(emb.std(axis=0).mean())
    return model.without("pred.")


# ---------------------------------------------------------------- stage 2

def generate_pseudo_labels(teacher: ModelBundle, images: np.ndarray) -> PseudoLabelBatch:
    probs, boxes = predict(teacher, images)
    return PseudoLabelBatch(probs, boxes)


def kd_loss(student_out: Predictions, pseudo: PseudoLabelBatch, only_p: bool = False,
            box_weight: float = 1.0) -> Tensor:
    """Mean KL(teacher || student) over prediction units, plus mean squared box L2 for detection."""
    if student_out.logits.shape != pseudo.probs.shape:
        raise ValueError(f"student logits {student_out.logits.shape} vs pseudo-labels {pseudo.probs.shape}")
    loss = F.mean(F.kl_div(pseudo.probs, student_out.logits))
    if student_out.task == "detection" and not only_p:
        if pseudo.boxes is None or student_out.boxes is None or student_out.boxes.shape != pseudo.boxes.shape:
            raise ValueError("detection distillation needs matching box predictions")
        target = Tensor(pseudo.boxes, dtype=student_out.boxes.dtype)
        loss = loss + box_weight * F.mean(F.l2_norm_sq(student_out.boxes - target, axis=-1))
    return loss


def entropy_term(student_out: Predictions) -> Tensor:
    """Mean Shannon entropy (nats) of the class distributions over all units."""
    return F.mean(F.entropy(student_out.logits))


def _class_params(model: ModelBundle) -> dict[str, Tensor]:
    """Head parameters reached by a loss on class distributions only (box regressor excluded)."""
    return {k: v for k, v in model.group("head.").items() if not k.startswith("head.box_")}


def _student_params(model: ModelBundle, scope: str, only_p: bool = False) -> dict[str, Tensor]:
    head = _class_params(model) if only_p else model.group("head.")
    if scope == "encoder":
        return model.group("enc.")
    if scope == "head":
        return head
    return {**model.group("enc."), **head}


def budget_entropy(model: ModelBundle, budget: np.ndarray) -> float:
    return mean_entropy(predict(model, budget)[0])


def adapt_student(student: ModelBundle, teacher: ModelBundle, budget: np.ndarray, cfg: AdaptationConfig,
                  report: MetricReport | None = None) -> ModelBundle:
    """Distil the fixed teacher into the student with the entropy penalty."""
    if len(budget) == 0:
        raise AdaptationError("empty adaptation budget")
    model = student.copy()
    params = _student_params(model, cfg.student_scope, cfg.only_p)
    state = AdamState(lr=cfg.lr)
    n = len(budget)
    if report is not None:
        report.metrics["budget_entropy_start"] = budget_entropy(model, budget)
    for step, idx in _schedule(n, cfg.batch_size, cfg.n_steps, cfg.seed, 2):
        x = budget[idx]
        pseudo = generate_pseudo_labels(teacher, x)
        out = forward(model, x)
        kd = kd_loss(out, pseudo, cfg.only_p, cfg.box_weight)
        ent = entropy_term(out)
        loss = kd + cfg.lam * ent
        _check(loss, "student_loss")
        backward(loss)
        adam_step(params, state)
        if report is not None:
            report.losses.append(("student", step, float(loss.data)))
    if report is not None:
        report.metrics["budget_entropy_end"] = budget_entropy(model, budget)
    return model


def run_test(source: ModelBundle, budget: np.ndarray, cfg: AdaptationConfig,
             report: MetricReport | None = None) -> tuple[ModelBundle, MetricReport]:
    """Full two-stage adaptation. Returns the model to evaluate and the run trace."""
    if report is None:
        report = MetricReport("test", source.arch.task, len(budget), cfg.seed, cfg.flags)
    base = source.without("rot.").without("pred.")
    m_steps = cfg.m_steps
    if cfg.no_fixmatch and m_steps > 0:
        if cfg.teacher_steps:
            log.warning("no_fixmatch set: requested teacher_steps=%d coerced to 0", cfg.teacher_steps)
        m_steps = 0
    teacher = adapt_teacher(base, budget, cfg, report, steps=m_steps) if m_steps else base.copy()
    if cfg.test_teacher:
        return teacher, report
    student = adapt_student(base, teacher, budget, cfg, report)
    return student, report


# ---------------------------------------------------------------- baselines

def tent_adapt(source: ModelBundle, budget: np.ndarray, cfg: AdaptationConfig,
               report: MetricReport | None = None) -> ModelBundle:
    """Entropy minimisation of test predictions over the encoder and the classification head."""
    model = source.without("rot.").without("pred.").copy()
    params = {**model.group("enc."), **_class_params(model)}
    state = AdamState(lr=cfg.lr)
    for step, idx in _schedule(len(budget), cfg.batch_size, cfg.n_steps, cfg.seed, 3):
        loss = entropy_term(forward(model, budget[idx]))
        _check(loss, "tent")
        backward(loss)
        adam_step(params, state)
        if report is not None:
            report.losses.append(("tent", step, float(loss.data)))
    return model


def rotation_loss(model: ModelBundle, images: np.ndarray, quarter_turns: np.ndarray) -> Tensor:
    emb = encode(model, rotate_batch(images, quarter_turns))[1]
    return F.cross_entropy(rotation_head_forward(model, emb), quarter_turns)


def ttt_adapt(source: ModelBundle, budget: np.ndarray, cfg: AdaptationConfig,
              report: MetricReport | None = None) -> ModelBundle:
    """Self-supervised rotation prediction on the budget; updates encoder and rotation head."""
    if not source.has_rotation_head:
        raise ArchError("TTT needs a source model trained with a rotation head")
    model = source.copy()
    params = {**model.group("enc."), **model.group("rot.")}
    state = AdamState(lr=cfg.lr)
    for step, idx in _schedule(len(budget), cfg.batch_size, cfg.n_steps, cfg.seed, 4):
        turns = np.random.default_rng([cfg.seed, 5, step]).integers(0, 4, size=len(idx))
        loss = rotation_loss(model, budget[idx], turns)
        _check(loss, "ttt")
        backward(loss)
        adam_step(params, state)
        if report is not None:
            report.losses.append(("ttt", step, float(loss.data)))
    return model


def finetune_oracle(source: ModelBundle, labeled: DatasetShard, cfg: AdaptationConfig,
                    report: MetricReport | None = None) -> ModelBundle:
    """Supervised fine-tuning on the labelled budget; upper-bound reference."""
    if labeled.labels is None or len(labeled.labels) != len(labeled.images):
        raise AdaptationError("fine-tuning needs ground-truth labels for every budget image")
    model = source.without("rot.").without("pred.").copy()
    params = {**model.group("enc."), **model.group("head.")}
    state = AdamState(lr=cfg.lr)
    for step, idx in _schedule(len(labeled), cfg.batch_size, cfg.n_steps, cfg.seed, 6):
        loss = task_loss(forward(model, labeled.images[idx]), labeled, idx, model.arch.grid, cfg.box_weight)
        _check(loss, "finetune")
        backward(loss)
        adam_step(params, state)
        if report is not None:
            report.losses.append(("finetune", step, float(loss.data)))
    return model


METHODS = ("source_only", "test", "tent", "ttt", "finetune")


def adapt_with(method: str, source: ModelBundle, budget: DatasetShard, cfg: AdaptationConfig
               ) -> tuple[ModelBundle, MetricReport]:
    """Dispatch one method on a budget shard (labels are read only by ``finetune``)."""
    report = MetricReport(method, source.arch.task, len(budget), cfg.seed, cfg.flags if method == "test" else "")
    images = budget.images
    if method == "source_only":
        return source, report
    if method == "test":
        return run_test(source, images, cfg, report)
    if method == "tent":
        return tent_adapt(source, images, cfg, report), report
    if method == "ttt":
        return ttt_adapt(source, images, cfg, report), report
    if method == "finetune":
        return finetune_oracle(source, budget, cfg, report), report
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
