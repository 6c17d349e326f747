"""Student construction, the distillation objective, and the training
loops (plain MLM pretraining, teacher-student distillation, and
token-classification fine-tuning) on a decoupled-weight-decay Adam
optimizer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoder import (
    EncoderOutput,
    ModelConfig,
    ModelWeights,
    clone_weights,
    forward,
    mlm_logits,
    named_tensors,
    token_classification_logits,
)
from .errors import ContractError, ParameterError
from .numcore import Tensor

TRAJECTORY_HEADER = "step,loss_total,loss_mlm,loss_ce,loss_cse,lr"


@dataclass(frozen=True)
class DistillRecipe:
    """Loss weights, temperature, optimizer hyperparameters and schedule."""

    steps: int
    batch_size: int = 8
    alpha: float = 2.0
    beta: float = 5.0
    gamma: float = 1.0
    temperature: float = 2.0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    grad_accum: int = 1
    seed: int = 0
    ce_all_positions: bool = False  # soft targets on every position, not just masked ones
    cse_layer_pairs: bool = False  # match student layer k to teacher layer 2k+1

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ParameterError("loss weights must be nonnegative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ParameterError("at least one loss weight must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ParameterError("bad steps / batch_size / grad_accum")

    def lr_at(self, step: int) -> float:
        """Linear warmup over the first warmup_frac of steps, then flat."""
        warmup = int(self.warmup_frac * self.steps)
        if warmup <= 0 or step >= warmup:
            return self.lr
        return self.lr * (step + 1) / warmup


# ---------------------------------------------------------------------------
# student construction


def init_student(config: ModelConfig, weights: ModelWeights) -> tuple[ModelConfig, ModelWeights]:
    """Halve the depth, seeding student layer k with a bitwise copy of
    teacher layer 2k; embeddings, heads and the final norm copy over."""
    if config.num_layers < 2 or config.num_layers % 2 != 0:
        raise ParameterError(
            f"student init needs an even teacher depth >= 2, got {config.num_layers}"
        )
    student_config = dataclasses.replace(config, num_layers=config.num_layers // 2)
    full_copy = clone_weights(config, weights)
    student_weights = ModelWeights(
        token_embeddings=full_copy.token_embeddings,
        position_embeddings=full_copy.position_embeddings,
        layers=[full_copy.layers[2 * k] for k in range(student_config.num_layers)],
        final_norm_gain=full_copy.final_norm_gain,
        final_norm_bias=full_copy.final_norm_bias,
        mlm_proj=full_copy.mlm_proj,
        mlm_bias=full_copy.mlm_bias,
        cls_head=full_copy.cls_head,
    )
    return student_config, student_weights


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    named_params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update with bias correction.

    Decay is applied to matrices and embeddings only (ndim >= 2), never to
    norm gains/biases or other vectors. Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and p.data.ndim >= 2:
            update = update + weight_decay * p.data
        p.data -= lr * update


def zero_grads(named_params: list[tuple[str, Tensor]]) -> None:
    for _, p in named_params:
        p.clear_grad()


# ---------------------------------------------------------------------------
# loss


@dataclass
class DistillLoss:
    total: Tensor
    mlm: Tensor
    ce: Tensor
    cse: Tensor


def _gather_rows(logits: Tensor, flat_positions: np.ndarray) -> Tensor:
    b, l, vocab = logits.data.shape
    return nc.embedding_lookup(nc.reshape(logits, (b * l, vocab)), flat_positions)


def distill_loss(
    teacher_out: EncoderOutput,
    teacher_logits: Tensor,
    student_out: EncoderOutput,
    student_logits: Tensor,
    mlm_targets: list[tuple[int, int, int]],
    recipe: DistillRecipe,
) -> DistillLoss:
    """Weighted sum of masked-LM loss, soft-target cross entropy at
    temperature T, and hidden-state cosine loss.

    Teacher tensors must come from a no-grad evaluation; gradients flow
    through the student only.
    """
    recipe.validate()
    if teacher_out.final_hidden.data.shape != student_out.final_hidden.data.shape:
        raise ContractError("teacher and student hidden sizes differ")
    b, l, vocab = student_logits.data.shape

    mlm = nc.mlm_cross_entropy(student_logits, mlm_targets)

    if recipe.ce_all_positions or not mlm_targets:
        flat = np.arange(b * l, dtype=np.int64)
    else:
        idx = np.asarray(mlm_targets, dtype=np.int64)
        flat = idx[:, 0] * l + idx[:, 1]
    student_rows = _gather_rows(student_logits, flat)
    with nc.no_grad():
        teacher_probs = nc.softmax_T(_gather_rows(teacher_logits, flat), recipe.temperature)
    ce = nc.cross_entropy_soft(student_rows, teacher_probs, recipe.temperature)

    if recipe.cse_layer_pairs:
        pair_losses = [
            nc.cosine_embedding_loss(s_h, t_h)
            for s_h, t_h in zip(student_out.layer_hidden, teacher_out.layer_hidden[1::2])
        ]
        cse = pair_losses[0]
        for extra in pair_losses[1:]:
            cse = nc.add(cse, extra)
        cse = nc.scale(cse, 1.0 / len(pair_losses))
    else:
        cse = nc.cosine_embedding_loss(student_out.final_hidden, teacher_out.final_hidden)

    total = nc.add(
        nc.add(nc.scale(mlm, recipe.alpha), nc.scale(ce, recipe.beta)),
        nc.scale(cse, recipe.gamma),
    )
    return DistillLoss(total=total, mlm=mlm, ce=ce, cse=cse)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class RunResult:
    config: ModelConfig
    weights: ModelWeights
    trajectory: list[tuple]  # (step, total, mlm, ce, cse, lr)
    status: str  # "complete" | "incomplete"
    steps_run: int


def write_trajectory(rows: list[tuple], path) -> None:
    with open(path, "w") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for step, total, mlm, ce, cse, lr in rows:
            fh.write(f"{step},{total!r},{mlm!r},{ce!r},{cse!r},{lr!r}\n")


def _train(
    config: ModelConfig,
    weights: ModelWeights,
    batch_stream,
    recipe: DistillRecipe,
    loss_fn,
) -> RunResult:
    """Shared step loop: pull a batch, build the loss on a fresh tape,
    backprop, Adam-update every `grad_accum` micro-steps."""
    recipe.validate()
    params = named_tensors(config, weights)
    state = AdamState()
    zero_grads(params)
    rows = []
    status = "complete"
    stream = iter(batch_stream)
    step = 0
    while step < recipe.steps:
        try:
            token_ids, targets = next(stream)
        except StopIteration:
            status = "incomplete"
            break
        rng = nc.make_rng(recipe.seed, 101, step)
        with nc.Tape() as tape:
            loss = loss_fn(token_ids, targets, rng)
            scaled = nc.scale(loss.total, 1.0 / recipe.grad_accum) if recipe.grad_accum > 1 else loss.total
            tape.backward(scaled)
            row = (step, loss.total.item(), loss.mlm.item(), loss.ce.item(), loss.cse.item(), recipe.lr_at(step))
            tape.clear()
        if (step + 1) % recipe.grad_accum == 0:
            adamw_step(
                params, state, recipe.lr_at(step),
                recipe.beta1, recipe.beta2, recipe.eps, recipe.weight_decay,
            )
            zero_grads(params)
        rows.append(row)
        step += 1
    return RunResult(config=config, weights=weights, trajectory=rows, status=status, steps_run=step)


def run_mlm_pretrain(
    config_or_ckpt,
    batch_stream,
    recipe: DistillRecipe,
    init_seed: int = 0,
    init_sigma: float = 0.02,
) -> RunResult:
    """Masked-LM training from a config (fresh weights) or an existing
    (config, weights) pair."""
    from .encoder import init_weights

    if isinstance(config_or_ckpt, ModelConfig):
        config, weights = config_or_ckpt, init_weights(config_or_ckpt, seed=init_seed, sigma=init_sigma)
    else:
        config, weights = config_or_ckpt

    zero = Tensor(np.zeros(()))

    def loss_fn(token_ids, targets, rng):
        out = forward(config, weights, token_ids, mode="train", rng=rng)
        logits = mlm_logits(config, weights, out.final_hidden)
        mlm = nc.mlm_cross_entropy(logits, targets)
        return DistillLoss(total=mlm, mlm=mlm, ce=zero, cse=zero)

    return _train(config, weights, batch_stream, recipe, loss_fn)


def run_distillation(
    teacher: tuple[ModelConfig, ModelWeights],
    batch_stream,
    recipe: DistillRecipe,
) -> RunResult:
    """Initialize a half-depth student from the teacher and train it on
    the weighted distillation objective. The teacher is evaluated without
    gradient tracking."""
    teacher_config, teacher_weights = teacher
    student_config, student_weights = init_student(teacher_config, teacher_weights)

    def loss_fn(token_ids, targets, rng):
        with nc.no_grad():
            t_out = forward(teacher_config, teacher_weights, token_ids, mode="eval")
            t_logits = mlm_logits(teacher_config, teacher_weights, t_out.final_hidden)
        s_out = forward(student_config, student_weights, token_ids, mode="train", rng=rng)
        s_logits = mlm_logits(student_config, student_weights, s_out.final_hidden)
        return distill_loss(t_out, t_logits, s_out, s_logits, targets, recipe)

    return _train(student_config, student_weights, batch_stream, recipe, loss_fn)


def run_finetune_tokencls(
    ckpt: tuple[ModelConfig, ModelWeights],
    batch_stream,
    recipe: DistillRecipe,
) -> RunResult:
    """Cross entropy over tag logits at labeled (non-padding) positions."""
    config, weights = ckpt
    zero = Tensor(np.zeros(()))

    def loss_fn(token_ids, targets, rng):
        out = forward(config, weights, token_ids, mode="train", rng=rng)
        logits = token_classification_logits(config, weights, out.final_hidden)
        ce = nc.mlm_cross_entropy(logits, targets)  # same mean-NLL-at-positions contract
        return DistillLoss(total=ce, mlm=ce, ce=zero, cse=zero)

    return _train(config, weights, batch_stream, recipe, loss_fn)


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_tag_sequences(
    config: ModelConfig,
    weights: ModelWeights,
    sentences,
    tokenizer,
    batch_size: int = 8,
    max_len: int | None = None,
) -> list[list[str]]:
    """Greedy per-token tag predictions, one tag list per input sentence.

    Sentences beyond the effective maximum length are truncated for the
    forward pass and padded back with O so outputs stay aligned with the
    gold data."""
    from .corpus import BIO_LABELS, ToyTokenizer

    limit = config.max_positions if max_len is None else min(max_len, config.max_positions)
    preds: list[list[str]] = []
    sentences = list(sentences)
    for start in range(0, len(sentences), batch_size):
        group = sentences[start : start + batch_size]
        trimmed = [s.tokens[:limit] for s in group]
        width = max(len(t) for t in trimmed)
        ids = np.full((len(group), width), ToyTokenizer.PAD, dtype=np.int64)
        for b, toks in enumerate(trimmed):
            ids[b, : len(toks)] = tokenizer.encode(" ".join(toks))
        with nc.no_grad():
            out = forward(config, weights, ids, mode="eval")
            logits = token_classification_logits(config, weights, out.final_hidden)
        pick = logits.data.argmax(axis=-1)
        for b, toks in enumerate(trimmed):
            tags = [BIO_LABELS[i] for i in pick[b, : len(toks)]]
            tags += ["O"] * (len(group[b].tokens) - len(tags))
            preds.append(tags)
    return preds


def masked_top1_accuracy(
    config: ModelConfig, weights: ModelWeights, batch_stream
) -> float:
    """Fraction of masked positions where the highest-scoring vocabulary
    entry is the original token."""
    hit = 0
    total = 0
    for token_ids, targets in batch_stream:
        if not targets:
            continue
        with nc.no_grad():
            out = forward(config, weights, token_ids, mode="eval")
            logits = mlm_logits(config, weights, out.final_hidden)
        pred = logits.data.argmax(axis=-1)
        for b, pos, tok in targets:
            hit += int(pred[b, pos] == tok)
            total += 1
    if total == 0:
        raise ContractError("no masked positions in evaluation stream")
    return hit / total
