"""Sparsity, gradient-magnitude and FLOP accounting for trained or freshly initialised models."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

import numpy as np

from .sparse_ops import Mode

if TYPE_CHECKING:
    from .model import ModelConfig, Transformer

# projection name -> report class
PROJECTION_CLASS = {
    "q": "QKV",
    "k": "QKV",
    "v": "QKV",
    "out": "Out",
    "up": "Up",
    "gate": "Gate",
    "down": "Down",
}
REPORT_CLASSES = ("QKV", "Out", "Up", "Gate", "Down")
PROBE_VARIANTS = ("dense", "ste", "no_ste")


class SparsityCounter:
    """Recorder for ``Transformer.forward``: counts exact zeros in each projection input."""

    def __init__(self):
        self.zeros: dict[tuple[int, str], int] = defaultdict(int)
        self.total: dict[tuple[int, str], int] = defaultdict(int)

    def record(self, layer: int, projection: str, values: np.ndarray) -> None:
        key = (layer, projection)
        self.zeros[key] += int(values.size - np.count_nonzero(values))
        self.total[key] += int(values.size)

    def ratios(self) -> dict[tuple[int, str], float]:
        return {k: self.zeros[k] / self.total[k] for k in self.total}

    def class_ratios(self) -> dict[str, float]:
        zeros: dict[str, int] = defaultdict(int)
        total: dict[str, int] = defaultdict(int)
        for (layer, proj), n in self.total.items():
            cls = PROJECTION_CLASS[proj]
            zeros[cls] += self.zeros[(layer, proj)]
            total[cls] += n
        return {c: zeros[c] / total[c] for c in REPORT_CLASSES if total[c]}

    def overall(self) -> float:
        """Element-weighted mean over all projection inputs."""
        total = sum(self.total.values())
        return sum(self.zeros.values()) / total if total else 0.0


@dataclass
class SparsityReport:
    ratios: dict[str, float]
    overall: float
    total_params: int
    activated_params: float
    per_layer: dict[tuple[int, str], float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ratios": self.ratios,
            "overall": self.overall,
            "total_params": self.total_params,
            "activated_params": self.activated_params,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["projection", "layer", "value"])
            for (layer, proj), value in sorted(self.per_layer.items()):
                w.writerow([proj, layer, repr(value)])


def measure_sparsity(model: "Transformer", batches: Iterable[np.ndarray]) -> SparsityReport:
    """Fraction of exact zeros entering each projection, over one or more batches."""
    counter = SparsityCounter()
    for batch in _as_batches(batches):
        model.forward(batch[:, :-1], recorder=counter)
    overall = counter.overall()
    total = model.parameter_count()
    return SparsityReport(
        ratios=counter.class_ratios(),
        overall=overall,
        total_params=total,
        activated_params=total * (1.0 - overall),
        per_layer=counter.ratios(),
    )


def gradient_norms(model: "Transformer") -> dict[tuple[int, str], float]:
    """Frobenius norm of each projection weight's current gradient."""
    from .model import iter_weight_names

    out = {}
    for layer, proj, name in iter_weight_names(model.cfg):
        g = model.params[name].grad
        out[(layer, proj)] = 0.0 if g is None else float(np.sqrt((g * g).sum()))
    return out


@dataclass
class GradientProbe:
    variant: str
    norms: dict[tuple[int, str], float]

    def layer_mean(self, layer: int) -> float:
        vals = [v for (l, _), v in self.norms.items() if l == layer]
        return float(np.mean(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["projection", "layer", "value"])
            for (layer, proj), value in sorted(self.norms.items()):
                w.writerow([proj, layer, repr(value)])


def probe_variant_model(model: "Transformer", variant: str, keep_fraction: float) -> "Transformer":
    if variant == "dense":
        return model.with_sparsity(mode=Mode.DENSE)
    sp = model.cfg.sparsity
    mode = sp.mode if sp.masks_projections else Mode.TOPK
    keep = sp.keep_fraction if sp.masks_projections else keep_fraction
    if variant == "ste":
        return model.with_sparsity(mode=mode, keep_fraction=keep, ste=True)
    if variant == "no_ste":
        return model.with_sparsity(mode=mode, keep_fraction=keep, ste=False)
    raise ValueError(f"unknown probe variant {variant!r}")


def probe_gradients(
    model: "Transformer",
    batches: Iterable[np.ndarray],
    variants: Sequence[str] = PROBE_VARIANTS,
    keep_fraction: float = 0.5,
    grad_scale: float = 1.0,
) -> dict[str, GradientProbe]:
    """Mean per-(layer, projection) weight-gradient norm for each backward variant.

    All variants share the same weights and batches. ``keep_fraction`` only
    applies when the model itself is not top-K sparse. ``grad_scale`` scales
    the seed gradient of the loss; 0 injects a zero upstream gradient.
    """
    batches = _as_batches(batches)
    result = {}
    for variant in variants:
        probe_model = probe_variant_model(model, variant, keep_fraction)
        sums: dict[tuple[int, str], float] = defaultdict(float)
        for batch in batches:
            probe_model.zero_grad()
            loss = probe_model.loss(batch[:, :-1], batch[:, 1:])
            loss.backward(np.asarray(grad_scale, dtype=np.float64))
            for key, norm in gradient_norms(probe_model).items():
                sums[key] += norm
        result[variant] = GradientProbe(
            variant, {k: v / len(batches) for k, v in sorted(sums.items())}
        )
    model.zero_grad()
    return result


def linear_flops_per_token(cfg: "ModelConfig", report: Optional[SparsityReport] = None) -> float:
    """``2 * in * out * (1 - s)`` summed over the seven sparsifiable projections."""
    from .model import projection_shapes

    total = 0.0
    for layer in range(cfg.n_layers):
        for proj, (out_dim, in_dim) in projection_shapes(cfg).items():
            s = 0.0
            if report is not None:
                s = report.per_layer.get(
                    (layer, proj), report.ratios.get(PROJECTION_CLASS[proj], 0.0)
                )
            total += 2.0 * in_dim * out_dim * (1.0 - s)
    return total


def flops_per_token(cfg: "ModelConfig", report: Optional[SparsityReport] = None) -> float:
    """Forward FLOPs per token: sparse projections, dense output head, dense attention.

    Attention scores (QK^T and AV) are counted at full context length.
    """
    head = 2.0 * cfg.hidden_size * cfg.vocab_size
    attention = cfg.n_layers * 4.0 * cfg.seq_length * cfg.hidden_size
    return linear_flops_per_token(cfg, report) + head + attention


def write_summary(path, report: SparsityReport, flops: float) -> None:
    Path(path).write_text(
        json.dumps({**report.to_json(), "flops_per_token": flops}, indent=2, sort_keys=True) + "\n"
    )


def _as_batches(batches) -> list[np.ndarray]:
    if isinstance(batches, np.ndarray):
        return [batches if batches.ndim == 2 else batches[None, :]]
    return list(batches)
