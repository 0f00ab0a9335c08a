"""Training objective and loop for disease/aspect infusion.

The disease loss is summed cross-entropy over masked disease sub-words plus
beta over the summed raw gold-token logits; the denominator is clamped below
at ``clamp_epsilon`` so the penalty stays bounded when logits are small or
negative (zero gradient inside the clamped region).  The aspect loss is plain
cross-entropy.  Random-MLM examples contribute plain cross-entropy over all
their mask positions, reported under the disease slot.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, replace

import numpy as np

from .corpus_builder import BuildMode, InfusionExample
from .encoder import EncoderModel, Params, backward, forward, save_checkpoint
from .errors import NonFiniteGradientError, ValidationError
from .tokenizer import PAD_ID


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 10.0
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clamp_epsilon: float = 0.1
    seed: int = 0
    use_aspect_loss: bool = True
    use_disease_loss: bool = True
    use_reciprocal_term: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be non-negative")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.clamp_epsilon <= 0:
            raise ValidationError("clamp_epsilon must be positive")


def desk_preset(**overrides) -> TrainConfig:
    """Fast-overfit settings for small from-scratch models."""
    base = TrainConfig(learning_rate=1e-3)
    return replace(base, **overrides) if overrides else base


def paper_preset(**overrides) -> TrainConfig:
    """Published full-scale hyperparameters: lr 1e-5, batch 16, beta 10."""
    base = TrainConfig(learning_rate=1e-5, batch_size=16, beta=10.0)
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class LossBreakdown:
    l_disease: float
    l_aspect: float
    l_total: float
    sum_disease_logits: float
    position_nlls: tuple[float, ...]  # aligned with example.mask_positions


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    l_disease: float
    l_aspect: float
    l_total: float
    disease_acc: float | None
    aspect_acc: float | None
    seconds: float


def _log_softmax_rows(logits: np.ndarray, positions) -> np.ndarray:
    rows = np.asarray(logits, dtype=np.float64)[list(positions)]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def infusion_loss(
    logits: np.ndarray, example: InfusionExample, cfg: TrainConfig
) -> LossBreakdown:
    """Loss parts for one example given its per-position logits (T x V)."""
    breakdown, _ = infusion_loss_and_grad(logits, example, cfg, want_grad=False)
    return breakdown


def infusion_loss_and_grad(
    logits: np.ndarray,
    example: InfusionExample,
    cfg: TrainConfig,
    want_grad: bool = True,
) -> tuple[LossBreakdown, np.ndarray | None]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValidationError("expected per-position logits of shape (T, V)")
    if logits.shape[0] < len(example.input_ids):
        raise ValidationError("logits do not cover the example sequence")
    if (
        not example.mask_positions
        and cfg.use_aspect_loss
        and cfg.use_disease_loss
    ):
        raise ValidationError("example has no mask positions to predict")

    labels = {pos: lab for pos, lab in zip(example.mask_positions, example.labels)}
    nlls: dict[int, float] = {}
    dlogits = np.zeros_like(logits) if want_grad else None

    def cross_entropy(positions, apply_grad: bool) -> float:
        if not positions:
            return 0.0
        logp = _log_softmax_rows(logits, positions)
        total = 0.0
        for row, pos in enumerate(positions):
            nll = -logp[row, labels[pos]]
            nlls[pos] = nll
            total += nll
            if apply_grad and dlogits is not None:
                probs = np.exp(logp[row])
                dlogits[pos] += probs
                dlogits[pos, labels[pos]] -= 1.0
        return total

    if example.mode is BuildMode.RANDOM_MLM15:
        ce = cross_entropy(example.mask_positions, apply_grad=True)
        gold = [labels[pos] for pos in example.mask_positions]
        sum_logits = float(
            logits[list(example.mask_positions), gold].sum()
        ) if example.mask_positions else 0.0
        breakdown = LossBreakdown(
            l_disease=ce,
            l_aspect=0.0,
            l_total=ce,
            sum_disease_logits=sum_logits,
            position_nlls=tuple(nlls[p] for p in example.mask_positions),
        )
        return breakdown, dlogits

    disease_ce = cross_entropy(
        example.disease_positions, apply_grad=cfg.use_disease_loss
    )
    aspect_ce = cross_entropy(
        example.aspect_positions, apply_grad=cfg.use_aspect_loss
    )

    sum_logits = 0.0
    reciprocal = 0.0
    if example.disease_positions:
        gold = [labels[pos] for pos in example.disease_positions]
        sum_logits = float(logits[list(example.disease_positions), gold].sum())
        if cfg.use_reciprocal_term:
            denom = max(sum_logits, cfg.clamp_epsilon)
            reciprocal = cfg.beta / denom
            unclamped = sum_logits > cfg.clamp_epsilon
            if cfg.use_disease_loss and unclamped and dlogits is not None:
                coeff = -cfg.beta / sum_logits**2
                for pos, lab in zip(example.disease_positions, gold):
                    dlogits[pos, lab] += coeff

    l_disease = disease_ce + reciprocal
    l_aspect = aspect_ce
    l_total = (l_disease if cfg.use_disease_loss else 0.0) + (
        l_aspect if cfg.use_aspect_loss else 0.0
    )
    breakdown = LossBreakdown(
        l_disease=l_disease,
        l_aspect=l_aspect,
        l_total=l_total,
        sum_disease_logits=sum_logits,
        position_nlls=tuple(nlls[p] for p in example.mask_positions),
    )
    return breakdown, dlogits


@dataclass
class AdamState:
    step: int
    m: Params
    v: Params

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    cfg: TrainConfig,
    step_index: int | None = None,
) -> tuple[Params, AdamState]:
    """Bias-corrected Adam update, in place; returns the mutated pair."""
    t = step_index if step_index is not None else state.step + 1
    state.step = t
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        params[name] = (p.astype(np.float64) - update).astype(p.dtype)
    return params, state


def pad_batch(examples: list[InfusionExample]) -> tuple[np.ndarray, np.ndarray]:
    max_len = max(len(e.input_ids) for e in examples)
    ids = np.full((len(examples), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(examples), max_len), dtype=bool)
    for row, example in enumerate(examples):
        n = len(example.input_ids)
        ids[row, :n] = example.input_ids.ids
        mask[row, :n] = True
    return ids, mask


def _batch_loss_and_grads(
    model: EncoderModel, batch: list[InfusionExample], cfg: TrainConfig
) -> tuple[list[LossBreakdown], Params]:
    ids, mask = pad_batch(batch)
    trace = forward(model.params, model.cfg, ids, mask)
    dlogits = np.zeros_like(trace.logit_values)
    breakdowns = []
    for row, example in enumerate(batch):
        n = len(example.input_ids)
        breakdown, dl = infusion_loss_and_grad(
            trace.logit_values[row, :n], example, cfg
        )
        breakdowns.append(breakdown)
        dlogits[row, :n] = dl / len(batch)
    grads = backward(trace, model.params, model.cfg, dlogits)
    return breakdowns, grads


def batch_mean_loss(
    model: EncoderModel, batch: list[InfusionExample], cfg: TrainConfig
) -> float:
    """Mean total loss over a batch; exact regardless of example order."""
    ids, mask = pad_batch(batch)
    trace = forward(model.params, model.cfg, ids, mask)
    totals = []
    for row, example in enumerate(batch):
        n = len(example.input_ids)
        totals.append(
            infusion_loss(trace.logit_values[row, :n], example, cfg).l_total
        )
    return math.fsum(totals) / len(batch)


def masked_accuracy_counts(
    model: EncoderModel, corpus: list[InfusionExample], batch_size: int = 32
) -> dict[str, int]:
    counts = {
        "disease_correct": 0,
        "disease_total": 0,
        "aspect_correct": 0,
        "aspect_total": 0,
        "all_correct": 0,
        "all_total": 0,
    }
    for start in range(0, len(corpus), batch_size):
        batch = corpus[start : start + batch_size]
        ids, mask = pad_batch(batch)
        trace = forward(model.params, model.cfg, ids, mask)
        preds = trace.logit_values.argmax(axis=-1)
        for row, example in enumerate(batch):
            gold = dict(zip(example.mask_positions, example.labels))
            for pos in example.mask_positions:
                hit = int(preds[row, pos] == gold[pos])
                counts["all_correct"] += hit
                counts["all_total"] += 1
                if pos in set(example.disease_positions):
                    counts["disease_correct"] += hit
                    counts["disease_total"] += 1
                elif pos in set(example.aspect_positions):
                    counts["aspect_correct"] += hit
                    counts["aspect_total"] += 1
    return counts


def masked_prediction_accuracy(
    model: EncoderModel, corpus: list[InfusionExample]
) -> tuple[float | None, float | None]:
    """Argmax accuracy at disease and aspect mask positions; None when a
    kind has no positions in the corpus."""
    if not corpus:
        raise ValidationError("corpus is empty")
    counts = masked_accuracy_counts(model, corpus)
    disease = (
        counts["disease_correct"] / counts["disease_total"]
        if counts["disease_total"]
        else None
    )
    aspect = (
        counts["aspect_correct"] / counts["aspect_total"]
        if counts["aspect_total"]
        else None
    )
    return disease, aspect


def _atomic_save(model: EncoderModel, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        save_checkpoint(model, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def train(
    model: EncoderModel,
    corpus: list[InfusionExample],
    cfg: TrainConfig,
    eval_corpus: list[InfusionExample] | None = None,
    checkpoint_dir: str | None = None,
    stop_at_accuracy: float | None = None,
    log_fn=None,
) -> tuple[Params, list[EpochMetrics]]:
    """Seeded epoch loop: shuffle, batch, Adam step, per-epoch evaluation.

    ``stop_at_accuracy`` ends training early once overall masked accuracy on
    the evaluation corpus reaches the threshold (off by default so the
    learning-curve row count equals ``epochs``).
    """
    if not corpus:
        raise ValidationError("training corpus is empty")
    eval_corpus = eval_corpus if eval_corpus is not None else corpus
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(model.params)
    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(corpus))
        sums = {"l_disease": [], "l_aspect": [], "l_total": []}
        for start in range(0, len(order), cfg.batch_size):
            batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
            breakdowns, grads = _batch_loss_and_grads(model, batch, cfg)
            for k in grads:
                grads[k] /= 1.0  # gradients already batch-mean scaled
            adam_step(model.params, grads, state, cfg)
            for b in breakdowns:
                sums["l_disease"].append(b.l_disease)
                sums["l_aspect"].append(b.l_aspect)
                sums["l_total"].append(b.l_total)
        n = len(corpus)
        counts = masked_accuracy_counts(model, eval_corpus)
        disease_acc = (
            counts["disease_correct"] / counts["disease_total"]
            if counts["disease_total"]
            else None
        )
        aspect_acc = (
            counts["aspect_correct"] / counts["aspect_total"]
            if counts["aspect_total"]
            else None
        )
        row = EpochMetrics(
            epoch=epoch,
            l_disease=math.fsum(sums["l_disease"]) / n,
            l_aspect=math.fsum(sums["l_aspect"]) / n,
            l_total=math.fsum(sums["l_total"]) / n,
            disease_acc=disease_acc,
            aspect_acc=aspect_acc,
            seconds=time.perf_counter() - started,
        )
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
        if checkpoint_dir is not None:
            _atomic_save(
                model, os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt")
            )
        if stop_at_accuracy is not None and counts["all_total"]:
            overall = counts["all_correct"] / counts["all_total"]
            if overall >= stop_at_accuracy:
                break
    return model.params, metrics


CURVE_COLUMNS = (
    "epoch",
    "l_disease",
    "l_aspect",
    "l_total",
    "disease_acc",
    "aspect_acc",
    "seconds",
)


def write_learning_curve(metrics: list[EpochMetrics], path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for row in metrics:
            writer.writerow(
                [
                    row.epoch,
                    f"{row.l_disease:.6f}",
                    f"{row.l_aspect:.6f}",
                    f"{row.l_total:.6f}",
                    "" if row.disease_acc is None else f"{row.disease_acc:.4f}",
                    "" if row.aspect_acc is None else f"{row.aspect_acc:.4f}",
                    f"{row.seconds:.3f}",
                ]
            )
