"""Training, evaluation, sampling and the BPC-to-perplexity conversion."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainingConfig
from .data import Corpus, as_ids, batchify, bptt_segments
from .errors import ContractError, DataError, NonFiniteError
from .model import SHARNN
from .optim import OptimizerState, lamb_step, lr_schedule
from .tensor import Tape, log_softmax_np, softmax_np

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class EvalReport:
    split: str
    total_bits: float
    n_positions: int

    @property
    def bpc(self) -> float:
        return self.total_bits / self.n_positions


@dataclass
class TrainResult:
    model: SHARNN
    opt_state: OptimizerState
    step: int
    epoch: int
    # one entry per finished epoch
    train_loss_bits: list = field(default_factory=list)
    val_bpc: list = field(default_factory=list)
    # per-step mean loss in bits
    step_losses: list = field(default_factory=list)
    log: list = field(default_factory=list)


def _rng_from_state(seed: int, saved: Optional[str]) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if saved:
        rng.bit_generator.state = json.loads(saved)
    return rng


def _clip(params: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()))
    if total > max_norm:
        for p in params.values():
            p.grad = p.grad * (max_norm / (total + 1e-12))


def train(
    model: SHARNN,
    corpus: Corpus,
    cfg: TrainingConfig,
    resume: Optional[Checkpoint] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Train in corpus order, carrying detached state and memory across segments.

    Each epoch starts from a fresh state.  One log line is emitted per epoch
    (and per probe when ``cfg.eval_every`` is set), and a checkpoint is written
    at every epoch end when ``cfg.checkpoint_path`` is set.
    """
    emit = log or (lambda line: logger.info(line))
    start_epoch, step = 0, 0
    opt_state = OptimizerState()
    saved_rng = None
    if resume is not None:
        start_epoch = int(resume.state.get("epoch", 0))
        step = int(resume.state.get("step", 0))
        opt_state = resume.optimizer_state() or OptimizerState()
        saved_rng = resume.state.get("rng")
    rng = _rng_from_state(cfg.seed, saved_rng)
    result = TrainResult(model, opt_state, step, start_epoch)
    if model.is_folded:
        raise ContractError("cannot train a folded model")

    stream = batchify(corpus.train, cfg.batch_size)
    params = model.parameters()
    done = False
    for epoch in range(start_epoch, cfg.epochs):
        if done:
            break
        lr = lr_schedule(epoch, cfg.lamb.lr, cfg.half_lr_from_epoch)
        states = model.init_states(cfg.batch_size)
        loss_sum, positions = 0.0, 0
        for seg, (x, y) in enumerate(bptt_segments(stream, cfg.bptt)):
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
            model.zero_grad()
            with Tape() as tape:
                loss, states = model.loss(x, y, states, training=True, rng=rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} segment {seg} (lr={lr})")
                loss.backward()
            tape.clear()
            if cfg.clip:
                _clip(params, cfg.clip)
            try:
                lamb_step(params, opt_state, cfg.lamb, lr)
            except NonFiniteError as e:
                norms = {k: float(np.linalg.norm(p.grad)) for k, p in params.items() if p.grad is not None}
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
                raise NonFiniteError(f"{e} at epoch {epoch} segment {seg} (lr={lr}); grad norms {worst}") from e
            step += 1
            result.step_losses.append(value / LN2)
            loss_sum += value * x.size
            positions += x.size
            if cfg.eval_every and step % cfg.eval_every == 0:
                val = _probe(model, corpus, cfg)
                emit(_log_line(epoch, step, lr, loss_sum / positions / LN2, val))

        if positions == 0:
            break
        train_bits = loss_sum / positions / LN2
        val = _probe(model, corpus, cfg)
        result.train_loss_bits.append(train_bits)
        result.val_bpc.append(val)
        line = _log_line(epoch, step, lr, train_bits, val)
        result.log.append(line)
        emit(line)
        result.epoch = epoch + 1
        if cfg.checkpoint_path:
            save_checkpoint(
                model,
                cfg,
                cfg.checkpoint_path,
                opt_state,
                epoch=epoch + 1,
                step=step,
                rng=json.dumps(rng.bit_generator.state),
            )
    result.step = step
    return result


def _log_line(epoch: int, step: int, lr: float, train_bits: float, val: float) -> str:
    return f"epoch={epoch} step={step} lr={lr:g} train_loss_bits={train_bits:.6f} val_bpc={val:.6f}"


def _probe(model: SHARNN, corpus: Corpus, cfg: TrainingConfig) -> float:
    if len(corpus.valid) < 2:
        return float("nan")
    snapshot = copy.deepcopy(model)
    return evaluate_bpc(snapshot, corpus.valid, cfg.eval_batch_size, cfg.eval_bptt, split="valid").bpc


def evaluate_bpc(
    model: SHARNN,
    data,
    batch_size: int = 1,
    bptt: int = 256,
    split: str = "valid",
    uniform: bool = False,
) -> EvalReport:
    """Bits per byte over ``data`` in one sequential pass from a reset state.

    ``uniform`` replaces the logits with zeros, a debugging aid that must give
    exactly 8 bits for a 256-symbol vocabulary.
    """
    ids = as_ids(data)
    if len(ids) < 2:
        raise DataError(f"split {split!r} has no predictable positions")
    stream = batchify(ids, batch_size)
    states = model.init_states(batch_size)
    total, n = 0.0, 0
    for x, y in bptt_segments(stream, bptt):
        logits, states = model.forward(x, states, training=False)
        lg = np.zeros(logits.shape) if uniform else logits.data.astype(np.float64)
        lp = log_softmax_np(lg, axis=-1)
        picked = np.take_along_axis(lp, y[..., None], axis=-1)
        total += float(-picked.sum()) / LN2
        n += y.size
    if n == 0:
        raise DataError(f"split {split!r} has no predictable positions")
    return EvalReport(split, total, n)


def generate(model: SHARNN, prime: bytes, length: int, temperature: float = 1.0, seed: int = 0) -> bytes:
    """Sample ``length`` bytes after feeding ``prime``; temperature 0 is greedy."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    prime_ids = as_ids(prime)
    if len(prime_ids) == 0:
        raise ValueError("prime must contain at least one byte")
    rng = np.random.default_rng(seed)
    logits, states = model.forward(prime_ids.reshape(-1, 1), None, training=False)
    last = logits.data[-1, 0].astype(np.float64)
    out = bytearray()
    for _ in range(length):
        if temperature == 0:
            nxt = int(np.argmax(last))
        else:
            p = softmax_np(last / temperature)
            nxt = int(rng.choice(len(p), p=p))
        out.append(nxt)
        logits, states = model.forward(np.array([[nxt]]), states, training=False)
        last = logits.data[-1, 0].astype(np.float64)
    return bytes(out)


def bpc_to_word_ppl(bpc: float, n_chars: int, n_words: int) -> float:
    """Word-level perplexity implied by a bits-per-character score.

    Computes ``2 ** (bpc * n_chars / n_words)``.  The conversion assumes
    entropy is spread equally across the characters of each word, and it
    ignores what teacher forcing reveals during evaluation; treat the result
    as a rough comparison, not an equivalent measurement.
    """
    if n_chars < 1 or n_words < 1:
        raise ContractError(f"character and word counts must be positive, got {n_chars}, {n_words}")
    return 2.0 ** (bpc * n_chars / n_words)
