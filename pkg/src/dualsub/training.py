"""Joint-loss optimisation, schedules, early stopping and checkpoint averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, Parameters, Transformer, read_container, write_container, CHECKPOINT_FORMAT

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_lr: float = 0.0007
    warmup_steps: int = 4000
    fine_tune_lr: float = 8e-5
    batch_tokens: int = 2048
    patience_checkpoints: int = 4
    checkpoint_interval_steps: int = 100
    average_last_k: int = 5
    max_steps: int = 3000
    mode: str = "pretrain"
    label_smoothing: float = 0.0
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.patience_checkpoints < 1:
            raise ValueError("patience_checkpoints must be >= 1")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.betas = tuple(self.betas)


def lr_schedule(step: int, config: TrainConfig, mode: str | None = None) -> float:
    """Inverse-square-root decay after linear warmup, or a constant fine-tuning rate."""
    mode = mode or config.mode
    if step < 1:
        raise ValueError("step must be >= 1")
    if mode == "finetune":
        return config.fine_tune_lr
    w = config.warmup_steps
    return config.max_lr * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------------------
# losses


def slice_positions(logits: Tensor, start: int) -> Tensor:
    """Drop the first ``start`` time steps of (..., T, V) logits."""
    if start == 0:
        return logits
    return ad.take_positions(logits, start)


def _padded_refs(ref, length: int, pad_id: int) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.int64)
    if ref.shape[-1] > length:
        raise ValueError(f"reference length {ref.shape[-1]} exceeds logits length {length}")
    if ref.shape[-1] == 0 or np.any(ref[..., 0] == pad_id):
        raise ValueError("reference starts with PAD")
    pad = [(0, 0)] * (ref.ndim - 1) + [(0, length - ref.shape[-1])]
    return np.pad(ref, pad, constant_values=pad_id)


def sequence_loss(logits: Tensor, ref, pad_id: int, label_smoothing: float = 0.0) -> tuple[Tensor, int]:
    """Summed NLL of the non-PAD reference tokens, and their count."""
    ref = _padded_refs(ref, logits.shape[-2], pad_id)
    weights = (ref != pad_id).astype(np.float64)
    return ad.cross_entropy(logits, ref, weights, label_smoothing), int(weights.sum())


@dataclass
class LossValue:
    total: Tensor
    n_tokens: int

    @property
    def mean(self) -> Tensor:
        return ad.scale(self.total, 1.0 / max(self.n_tokens, 1))


def joint_loss(logits1: Tensor, logits2: Tensor, ref1, ref2, pad_id: int, label_smoothing: float = 0.0) -> LossValue:
    """Negative joint log-likelihood of both reference streams (PAD positions excluded)."""
    l1, n1 = sequence_loss(logits1, ref1, pad_id, label_smoothing)
    l2, n2 = sequence_loss(logits2, ref2, pad_id, label_smoothing)
    return LossValue(ad.add(l1, l2), n1 + n2)


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    """Token ids of one training unit (``tgt2`` is None for single-target data)."""

    src: list[int]
    tgt1: list[int]
    tgt2: list[int] | None = None

    def length(self) -> int:
        return max(len(self.src), len(self.tgt1), len(self.tgt2 or ()))


@dataclass
class Batch:
    src: np.ndarray
    inputs: list[np.ndarray]
    refs: list[np.ndarray]
    prefix_len: int

    @property
    def n_sentences(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[Sequence[int]], pad_id: int, length: int | None = None) -> np.ndarray:
    length = length or max(len(r) for r in rows)
    out = np.full((len(rows), length), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def decoder_prefix(config: ModelConfig, decoder_id: int) -> list[int]:
    """Forced start of a decoder input: BOS, plus the target tag for the shared variant."""
    if config.variant == "shared":
        return [config.bos_id, config.tag1_id if decoder_id == 1 else config.tag2_id]
    return [config.bos_id]


def collate(examples: Sequence[Example], config: ModelConfig) -> Batch:
    """Pad sources and build teacher-forced decoder inputs/targets.

    For two streams both are padded to a common length so that the shorter one
    continues with PAD after its EOS. Decoder inputs carry that EOS too, as
    they do at inference time, so the partner sees the same hidden states.
    """
    pad, eos = config.pad_id, config.eos_id
    src = _pad([e.src for e in examples], pad)
    streams = [[e.tgt1 for e in examples]]
    if examples[0].tgt2 is not None:
        streams.append([e.tgt2 for e in examples])
    prefix_len = len(decoder_prefix(config, 1))
    length = max(len(t) for s in streams for t in s) + 1
    inputs, refs = [], []
    for k, stream in enumerate(streams):
        prefix = decoder_prefix(config, k + 1)
        width = length + prefix_len - 1
        inputs.append(_pad([(prefix + list(t) + [eos])[:width] for t in stream], pad, width))
        refs.append(_pad([list(t) + [eos] for t in stream], pad, length))
    return Batch(src, inputs, refs, prefix_len)


def make_batches(examples: Sequence[Example], batch_tokens: int, rng: np.random.Generator) -> list[list[Example]]:
    """Length-bucketed batches holding at most ``batch_tokens`` padded tokens."""
    order = rng.permutation(len(examples))
    order = sorted(order, key=lambda i: examples[i].length())
    batches, current, longest = [], [], 0
    for i in order:
        n = examples[i].length() + 2
        if current and max(longest, n) * (len(current) + 1) > batch_tokens:
            batches.append(current)
            current, longest = [], 0
        current.append(examples[i])
        longest = max(longest, n)
    if current:
        batches.append(current)
    return [batches[i] for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Parameters, betas=(0.9, 0.98), eps: float = 1e-9):
        self.names = sorted(params)
        self.params = params
        self.betas = betas
        self.eps = eps
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            p = self.params[n]
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    step: int
    dev_loss: float = float("nan")
    train_loss: float = float("nan")
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> Parameters:
        return Parameters.from_arrays(self.config, self.arrays)

    def model(self) -> Transformer:
        return Transformer(self.config, self.parameters())

    def save(self, path, vocab_id: str = "") -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "vocab_hash": vocab_id,
            "extra": {"step": self.step, "dev_loss": self.dev_loss, "train_loss": self.train_loss},
        }
        arrays = {f"param/{k}": v for k, v in self.arrays.items()}
        arrays |= {f"adam_m/{k}": v for k, v in self.adam_m.items()}
        arrays |= {f"adam_v/{k}": v for k, v in self.adam_v.items()}
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path, expected_vocab_hash: str | None = None) -> "Checkpoint":
        meta, arrays = read_container(path)
        if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
            raise ValueError("vocabulary hash mismatch between checkpoint and data")

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        extra = meta["extra"]
        return cls(ModelConfig(**meta["config"]), group("param/"), extra.get("step", 0),
                   extra.get("dev_loss", float("nan")), extra.get("train_loss", float("nan")),
                   group("adam_m/"), group("adam_v/"))


class EarlyStopping:
    """Stop after ``patience`` consecutive checkpoints without a strictly lower dev loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_index = -1
        self.bad = 0
        self.seen = 0

    def update(self, dev_loss: float) -> bool:
        if dev_loss < self.best:
            self.best, self.best_index, self.bad = dev_loss, self.seen, 0
        else:
            self.bad += 1
        self.seen += 1
        return self.bad >= self.patience


class Trainer:
    """Owns the optimiser state for one model and runs single update steps."""

    def __init__(self, model: Transformer, config: TrainConfig, objective: str = "joint"):
        if objective not in ("single", "joint"):
            raise ValueError(f"unknown objective {objective!r}")
        if objective == "joint" and model.config.variant == "base":
            raise ValueError("joint objective needs a dual or shared model")
        self.model = model
        self.config = config
        self.objective = objective
        self.adam = Adam(model.params, config.betas, config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        model.rng = np.random.default_rng(config.seed + 1)

    @property
    def step_count(self) -> int:
        return self.adam.t

    def batch_loss(self, batch: Batch) -> LossValue:
        m, pad = self.model, self.model.config.pad_id
        enc_mask = m.padding_mask(batch.src)
        enc = m.encode(batch.src)
        start = batch.prefix_len - 1
        ls = self.config.label_smoothing
        if self.objective == "joint":
            l1, l2 = m.dual_forward(enc, batch.inputs[0], batch.inputs[1], enc_mask=enc_mask)
            return joint_loss(slice_positions(l1, start), slice_positions(l2, start),
                              batch.refs[0], batch.refs[1], pad, ls)
        logits = m.single_forward(enc, batch.inputs[0], 1, enc_mask=enc_mask)
        total, n = sequence_loss(slice_positions(logits, start), batch.refs[0], pad, ls)
        return LossValue(total, n)

    def train_step(self, examples: Sequence[Example]) -> float:
        batch = collate(examples, self.model.config)
        self.model.training = True
        self.adam.zero_grad()
        with ad.Tape() as tape:
            loss = self.batch_loss(batch)
            mean = loss.mean
        tape.backward(mean)
        self.model.training = False
        self.adam.step(lr_schedule(self.adam.t + 1, self.config))
        return float(mean.data)

    def evaluate(self, examples: Sequence[Example], batch_size: int = 64) -> float:
        """Per-token dev loss (no dropout, no tape)."""
        total, n = 0.0, 0
        for i in range(0, len(examples), batch_size):
            loss = self.batch_loss(collate(examples[i : i + batch_size], self.model.config))
            total += float(loss.total.data)
            n += loss.n_tokens
        return total / max(n, 1)

    def checkpoint(self, dev_loss: float = float("nan"), train_loss: float = float("nan")) -> Checkpoint:
        return Checkpoint(
            self.model.config, self.model.params.arrays(), self.adam.t, dev_loss, train_loss,
            {k: v.copy() for k, v in self.adam.m.items()}, {k: v.copy() for k, v in self.adam.v.items()},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        for name, value in ckpt.arrays.items():
            self.model.params[name].data[...] = value
        for name in self.adam.names:
            self.adam.m[name][...] = ckpt.adam_m[name]
            self.adam.v[name][...] = ckpt.adam_v[name]
        self.adam.t = ckpt.step


def train(
    model: Transformer,
    corpus: Sequence[Example],
    config: TrainConfig,
    objective: str = "joint",
    dev: Sequence[Example] | None = None,
    log_file=None,
) -> list[Checkpoint]:
    """Train until early stopping or ``max_steps``; returns every checkpoint.

    ``log_file`` (a text stream) receives one tab-separated line per
    checkpoint: step, train loss, dev loss, learning rate.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    if objective == "joint" and any(e.tgt2 is None for e in corpus):
        raise ValueError("joint objective needs tri-parallel examples")
    dev = list(dev) if dev is not None else list(corpus)
    trainer = Trainer(model, config, objective)
    stopper = EarlyStopping(config.patience_checkpoints)
    checkpoints: list[Checkpoint] = []
    recent: list[float] = []
    while trainer.step_count < config.max_steps:
        for batch in make_batches(corpus, config.batch_tokens, trainer.rng):
            try:
                recent.append(trainer.train_step(batch))
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(f"step {trainer.step_count + 1}: {exc}") from exc
            step = trainer.step_count
            if step % config.checkpoint_interval_steps == 0 or step >= config.max_steps:
                dev_loss = trainer.evaluate(dev)
                train_loss = float(np.mean(recent))
                recent = []
                checkpoints.append(trainer.checkpoint(dev_loss, train_loss))
                lr = lr_schedule(step, config)
                if log_file is not None:
                    log_file.write(f"{step}\t{train_loss:.6f}\t{dev_loss:.6f}\t{lr:.8g}\n")
                log.info("step %d train %.4f dev %.4f lr %.3g", step, train_loss, dev_loss, lr)
                if stopper.update(dev_loss) or step >= config.max_steps:
                    return checkpoints
    return checkpoints


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> Parameters:
    """Element-wise mean of the named tensors; optimiser state is dropped."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    first = checkpoints[0]
    names = set(first.arrays)
    for c in checkpoints[1:]:
        if set(c.arrays) != names or c.config != first.config:
            raise ValueError("checkpoints have different tensor names or configs")
        for n in names:
            if c.arrays[n].shape != first.arrays[n].shape:
                raise ValueError(f"shape mismatch for {n}")
    k = len(checkpoints)
    # offsets from the first checkpoint keep identical inputs exactly fixed
    mean = {n: first.arrays[n] + sum(c.arrays[n] - first.arrays[n] for c in checkpoints[1:]) / k
            for n in names}
    return Parameters.from_arrays(first.config, mean)
