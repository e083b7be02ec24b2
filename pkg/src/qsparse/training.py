"""Byte-level data pipeline, Adam with decoupled weight decay, schedules and the training loop."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import SparsityCounter, gradient_norms
from .model import Transformer

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8
EVAL_FRACTION = 0.05


class CorpusError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite gradients or loss; carries the partial run log."""

    def __init__(self, message: str, run_log: Optional["RunLog"] = None):
        super().__init__(message)
        self.run_log = run_log


class Schedule(str, enum.Enum):
    POLYNOMIAL = "polynomial"
    COSINE = "cosine"
    TWO_STAGE = "two_stage"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    end_learning_rate: float = 2e-4
    weight_decay: float = 0.1
    end_weight_decay: Optional[float] = None
    batch_size_tokens: int = 512
    adam_betas: tuple[float, float] = (0.9, 0.95)
    warmup_steps: int = 100
    warmup_ratio: Optional[float] = None
    schedule: Schedule = Schedule.COSINE
    polynomial_power: float = 1.0
    grad_clip: Optional[float] = 2.0
    total_steps: int = 2000
    seed: int = 0
    log_interval: int = 100

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup < self.total_steps:
            raise ValueError("warmup must satisfy 0 <= warmup < total_steps")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    @property
    def warmup(self) -> int:
        if self.warmup_ratio is not None:
            return int(round(self.warmup_ratio * self.total_steps))
        return self.warmup_steps


# data


def load_corpus(path) -> np.ndarray:
    """Raw bytes as uint8 token ids."""
    raw = Path(path).read_bytes()
    if not raw:
        raise CorpusError(f"{path}: corpus is empty")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def chunk_windows(tokens: np.ndarray, seq_length: int) -> np.ndarray:
    """Non-overlapping windows, shape (floor(len / seq_length), seq_length)."""
    count = len(tokens) // seq_length
    if count == 0:
        raise CorpusError(
            f"corpus of {len(tokens)} bytes is shorter than seq_length {seq_length}"
        )
    return tokens[: count * seq_length].reshape(count, seq_length)


_SYLLABLES = (
    "ka ri to an mo el su ve ni la or pe di us ta ro fi en ma co li be sa nu "
    "de it hu ga on ze ly pa te so mi ar ul bo ne"
).split()


def synthetic_corpus(n_bytes: int, seed: int = 0, vocab: int = 600) -> bytes:
    """Deterministic English-like text from a Zipfian word bigram process."""
    rng = np.random.default_rng(seed)
    words = []
    seen = set()
    while len(words) < vocab:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(1, 4)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, vocab + 1)
    zipf = 1.0 / ranks
    # each word has a sparse preferred-successor set layered over the unigram prior
    succ = rng.integers(0, vocab, size=(vocab, 8))
    out: list[str] = []
    size = 0
    current = 0
    sentence = 0
    while size < n_bytes:
        if rng.random() < 0.7:
            current = int(succ[current, rng.integers(0, 8)])
        else:
            current = int(rng.choice(vocab, p=zipf / zipf.sum()))
        w = words[current]
        if sentence == 0:
            w = w.capitalize()
        sentence += 1
        if sentence > 5 and rng.random() < 0.15:
            w += ". " if rng.random() < 0.9 else ".\n"
            sentence = 0
        else:
            w += ", " if rng.random() < 0.05 else " "
        out.append(w)
        size += len(w)
    return "".join(out).encode("ascii")[:n_bytes]


class Batches:
    """Seeded, epoch-shuffled batches over train windows plus a fixed eval split."""

    def __init__(self, tokens: np.ndarray, seq_length: int, batch_size: int, seed: int):
        windows = chunk_windows(tokens, seq_length)
        n_eval = max(1, int(len(windows) * EVAL_FRACTION)) if len(windows) > 1 else 0
        self.train = windows[: len(windows) - n_eval] if n_eval else windows
        self.eval = windows[len(windows) - n_eval :] if n_eval else windows
        self.batch_size = min(batch_size, len(self.train))
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self._rng.permutation(len(self.train))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.train[idx]

    def eval_batches(self, count: int) -> list[np.ndarray]:
        """The first ``count`` evaluation batches under the run seed."""
        order = np.random.default_rng([self.seed, 2]).permutation(len(self.eval))
        size = min(self.batch_size, len(self.eval))
        out = []
        for i in range(count):
            idx = np.take(order, np.arange(i * size, (i + 1) * size), mode="wrap")
            out.append(self.eval[idx])
        return out


def split_batch(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return batch[:, :-1], batch[:, 1:]


# optimisation


def lr_at(step: int, cfg: TrainConfig) -> float:
    return _scheduled(step, cfg, cfg.learning_rate, cfg.end_learning_rate)


def weight_decay_at(step: int, cfg: TrainConfig) -> float:
    if cfg.end_weight_decay is None:
        return cfg.weight_decay
    if cfg.schedule is Schedule.TWO_STAGE:
        return cfg.weight_decay if step < cfg.total_steps // 2 else cfg.end_weight_decay
    return cfg.weight_decay


def _scheduled(step: int, cfg: TrainConfig, peak: float, end: float) -> float:
    warm = cfg.warmup
    if warm and step < warm:
        return peak * step / warm
    if cfg.schedule is Schedule.TWO_STAGE:
        return peak if step < cfg.total_steps // 2 else end
    span = max(cfg.total_steps - warm, 1)
    frac = min(max((step - warm) / span, 0.0), 1.0)
    if cfg.schedule is Schedule.COSINE:
        return end + 0.5 * (peak - end) * (1.0 + math.cos(math.pi * frac))
    return end + (peak - end) * (1.0 - frac) ** cfg.polynomial_power


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    step: int,
) -> float:
    """One in-place AdamW update; returns the pre-clip global gradient norm.

    Weight decay is decoupled and applies to matrices only (not norm gains).
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at step {step}")
    grads = dict(grads)
    norm = (
        clip_by_global_norm(grads, cfg.grad_clip)
        if cfg.grad_clip is not None
        else math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    )
    lr = lr_at(step, cfg)
    wd = weight_decay_at(step, cfg)
    b1, b2 = cfg.adam_betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and p.ndim >= 2:
            p -= lr * wd * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return norm


# training loop


@dataclass
class StepRecord:
    step: int
    tokens: int
    loss: float
    lr: float
    overall_sparsity: float


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    # (step, layer, projection, value)
    sparsity: list[tuple[int, int, str, float]] = field(default_factory=list)
    grad_norms: list[tuple[int, int, str, float]] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.steps])

    def overall_sparsity(self) -> np.ndarray:
        return np.array([r.overall_sparsity for r in self.steps])

    def trailing_mean(self, n: int = 100) -> float:
        return float(self.losses()[-n:].mean())

    def leading_mean(self, n: int = 100) -> float:
        return float(self.losses()[:n].mean())

    def write(self, out_dir, prefix: str = "") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "runlog": out_dir / f"{prefix}runlog.csv",
            "sparsity": out_dir / f"{prefix}sparsity.csv",
            "grad_norms": out_dir / f"{prefix}grad_norms.csv",
        }
        with open(paths["runlog"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "tokens", "loss", "lr", "overall_sparsity"])
            for r in self.steps:
                w.writerow([r.step, r.tokens, repr(r.loss), repr(r.lr), repr(r.overall_sparsity)])
        for key, rows in (("sparsity", self.sparsity), ("grad_norms", self.grad_norms)):
            with open(paths[key], "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "layer", "projection", "value"])
                for step, layer, proj, value in rows:
                    w.writerow([step, layer, proj, repr(value)])
        return paths


def read_runlog(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        return [
            StepRecord(
                int(r["step"]), int(r["tokens"]), float(r["loss"]), float(r["lr"]),
                float(r["overall_sparsity"]),
            )
            for r in csv.DictReader(fh)
        ]


def train(
    model: Transformer,
    tokens: np.ndarray,
    cfg: TrainConfig,
    progress: bool = False,
) -> RunLog:
    """Next-token cross-entropy training; mutates ``model`` in place."""
    seq = model.cfg.seq_length
    batch_size = max(1, cfg.batch_size_tokens // seq)
    data = Batches(tokens, seq, batch_size, cfg.seed)
    params = {k: p.data for k, p in model.params.items()}
    state = AdamState()
    run = RunLog()
    seen = 0
    for step in range(cfg.total_steps):
        batch = data.next()
        inputs, targets = split_batch(batch)
        counter = SparsityCounter()
        model.zero_grad()
        loss = model.loss(inputs, targets, recorder=counter)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss diverged at step {step}", run)
        loss.backward()
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        lr = lr_at(step, cfg)
        if step % cfg.log_interval == 0 or step == cfg.total_steps - 1:
            for (layer, proj), ratio in sorted(counter.ratios().items()):
                run.sparsity.append((step, layer, proj, ratio))
            for (layer, proj), norm in sorted(gradient_norms(model).items()):
                run.grad_norms.append((step, layer, proj, norm))
        try:
            adam_step(params, grads, state, cfg, step)
        except TrainingError as exc:
            exc.run_log = run
            raise
        seen += inputs.size
        run.steps.append(StepRecord(step, seen, value, lr, counter.overall()))
        if progress and step % cfg.log_interval == 0:
            log.info("step %d loss %.4f sparsity %.4f", step, value, counter.overall())
    return run
