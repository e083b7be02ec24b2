"""LLaMA-style toy transformer whose seven projections all route through sparse_linear."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Protocol

import numpy as np

from . import sparse_ops as S
from . import tensor as T
from .sparse_ops import Mode, SparsityConfig
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "out", "gate", "up", "down")
CHECKPOINT_MAGIC = b"QSPCKPT1"


class ModelInputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class FfnKind(str, enum.Enum):
    RELU2_GLU = "relu2glu"
    SILU_GLU_POST_TOPK = "siluglu"


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    glu_size: int = 172
    n_heads: int = 4
    n_layers: int = 2
    seq_length: int = 128
    vocab_size: int = 256
    ffn_kind: FfnKind = FfnKind.RELU2_GLU
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)

    def __post_init__(self):
        object.__setattr__(self, "ffn_kind", FfnKind(self.ffn_kind))
        for f in ("hidden_size", "glu_size", "n_heads", "n_layers", "seq_length", "vocab_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if (self.hidden_size // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        self.sparsity.check_width(self.hidden_size)
        self.sparsity.check_width(self.glu_size)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    def replace_sparsity(self, **changes) -> "ModelConfig":
        sp = SparsityConfig(**{**asdict(self.sparsity), **changes})
        return ModelConfig(**{**self._shallow(), "sparsity": sp})

    def _shallow(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_dict(self) -> dict:
        d = self._shallow()
        d["ffn_kind"] = self.ffn_kind.value
        sp = asdict(self.sparsity)
        sp["mode"] = self.sparsity.mode.value
        d["sparsity"] = sp
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["sparsity"] = SparsityConfig(**d.get("sparsity", {}))
        return cls(**d)


def projection_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """(out_dim, in_dim) of each per-layer projection."""
    h, g = cfg.hidden_size, cfg.glu_size
    return {
        "q": (h, h),
        "k": (h, h),
        "v": (h, h),
        "out": (h, h),
        "gate": (g, h),
        "up": (g, h),
        "down": (h, g),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, v = cfg.hidden_size, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, h)}
    for layer in range(cfg.n_layers):
        shapes[f"layers.{layer}.attn_norm"] = (h,)
        shapes[f"layers.{layer}.ffn_norm"] = (h,)
        for name, shape in projection_shapes(cfg).items():
            shapes[f"layers.{layer}.{name}"] = shape
    shapes["final_norm"] = (h,)
    shapes["head"] = (v, h)
    return shapes


def analytic_parameter_count(cfg: ModelConfig) -> dict[str, int]:
    h, v = cfg.hidden_size, cfg.vocab_size
    per_layer_proj = sum(o * i for o, i in projection_shapes(cfg).values())
    projection = cfg.n_layers * per_layer_proj
    norms = cfg.n_layers * 2 * h + h
    total = projection + norms + 2 * v * h
    return {"total": total, "projection": projection}


class ActivationRecorder(Protocol):
    def record(self, layer: int, projection: str, values: np.ndarray) -> None: ...


class Transformer:
    """Parameters live in ``self.params`` (name -> leaf Tensor)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.last_attention: list[np.ndarray] = []

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Transformer":
        rng = np.random.default_rng(seed)
        h, v = cfg.hidden_size, cfg.vocab_size
        params: dict[str, np.ndarray] = {"embed": rng.normal(0.0, 0.02, (v, h))}
        shapes = projection_shapes(cfg)
        for layer in range(cfg.n_layers):
            params[f"layers.{layer}.attn_norm"] = np.ones(h)
            params[f"layers.{layer}.ffn_norm"] = np.ones(h)
            for name in PROJECTIONS:
                out_dim, in_dim = shapes[name]
                std = in_dim**-0.5
                if name in ("out", "down"):
                    std /= np.sqrt(2 * cfg.n_layers)
                params[f"layers.{layer}.{name}"] = rng.normal(0.0, std, (out_dim, in_dim))
        params["final_norm"] = np.ones(h)
        params["head"] = rng.normal(0.0, h**-0.5, (v, h))
        return cls(cfg, {k: Tensor(a, requires_grad=True, name=k) for k, a in params.items()})

    def with_sparsity(self, **changes) -> "Transformer":
        """Same parameter tensors under a different sparsity configuration."""
        return Transformer(self.cfg.replace_sparsity(**changes), self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _rope(self, length: int) -> tuple[np.ndarray, np.ndarray]:
        if length not in self._rope_cache:
            half = self.cfg.head_dim // 2
            inv_freq = 1.0 / (10000.0 ** (np.arange(half) / half))
            angles = np.arange(length)[:, None] * inv_freq[None, :]
            self._rope_cache[length] = (np.cos(angles), np.sin(angles))
        return self._rope_cache[length]

    def _check_tokens(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise ModelInputError("token ids must be an integer (batch, seq) array")
        if ids.shape[1] > self.cfg.seq_length:
            raise ModelInputError(
                f"sequence length {ids.shape[1]} exceeds seq_length {self.cfg.seq_length}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ModelInputError("token id out of range for vocab_size")
        return ids

    def forward(
        self,
        token_ids,
        recorder: Optional[ActivationRecorder] = None,
        keep_attention: bool = False,
    ) -> Tensor:
        """Logits of shape (batch, seq, vocab)."""
        ids = self._check_tokens(token_ids)
        cfg, p = self.cfg, self.params
        sp = cfg.sparsity
        b, t = ids.shape
        nh, hd = cfg.n_heads, cfg.head_dim
        cos, sin = self._rope(t)
        causal = np.triu(np.full((t, t), -np.inf), k=1)
        self.last_attention = []

        def project(x_sparse: Tensor, layer: int, name: str) -> Tensor:
            if recorder is not None:
                recorder.record(layer, name, x_sparse.data)
            return T.matmul(x_sparse, S.effective_weight(p[f"layers.{layer}.{name}"], sp))

        def heads(x: Tensor) -> Tensor:
            return T.transpose(T.reshape(x, (b, t, nh, hd)), (0, 2, 1, 3))

        x = T.embedding(p["embed"], ids)
        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}."
            h = S.sparsify(T.rms_norm(x, p[pre + "attn_norm"]), sp)
            q = T.rotary(heads(project(h, layer, "q")), cos, sin)
            k = T.rotary(heads(project(h, layer, "k")), cos, sin)
            v = heads(project(h, layer, "v"))
            scores = T.add(T.mul(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), hd**-0.5), causal)
            att = T.softmax(scores, axis=-1)
            if keep_attention:
                self.last_attention.append(att.data)
            ctx = T.reshape(T.transpose(T.bmm(att, v), (0, 2, 1, 3)), (b, t, cfg.hidden_size))
            x = x + project(S.sparsify(ctx, sp), layer, "out")

            h = S.sparsify(T.rms_norm(x, p[pre + "ffn_norm"]), sp)
            x = x + project(S.sparsify(self._ffn_hidden(h, layer, project), sp), layer, "down")

        x = T.rms_norm(x, p["final_norm"])
        return T.matmul(x, p["head"])

    def _ffn_hidden(self, h: Tensor, layer: int, project) -> Tensor:
        gate = project(h, layer, "gate")
        up = project(h, layer, "up")
        if self.cfg.ffn_kind is FfnKind.RELU2_GLU:
            return T.mul(up, T.square(T.relu(gate)))
        act = T.silu(gate)
        sp = self.cfg.sparsity
        if sp.mode is not Mode.DENSE:
            act = S.post_activation_top_k(act, sp.keep_fraction)
        return T.mul(up, act)

    def loss(self, inputs, targets, recorder=None) -> Tensor:
        return T.cross_entropy(self.forward(inputs, recorder=recorder), targets)

    # persistence

    def save(self, path) -> None:
        write_checkpoint(path, self.cfg, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "Transformer":
        cfg, arrays = read_checkpoint(path)
        return cls(cfg, {k: Tensor(a, requires_grad=True, name=k) for k, a in arrays.items()})


def relu2glu(x: Tensor, w_up: Tensor, w_gate: Tensor, cfg: SparsityConfig) -> Tensor:
    """``(X W_up^T) * relu(X W_gate^T)^2`` with both projections sparse."""
    return T.mul(S.sparse_linear(x, w_up, cfg), T.square(T.relu(S.sparse_linear(x, w_gate, cfg))))


def count_parameters(model: Transformer, overall_sparsity: Optional[float] = None) -> dict:
    """Total N and activated N_a = N * (1 - S).

    Without a measured ``overall_sparsity`` the configured ``1 - k`` is used
    (0 for modes that do not mask projections).
    """
    counts = analytic_parameter_count(model.cfg)
    total = model.parameter_count()
    if total != counts["total"]:
        raise RuntimeError("parameter tensors disagree with the analytic count")
    if overall_sparsity is None:
        sp = model.cfg.sparsity
        masked = sp.masks_projections or sp.mode is Mode.POSTACT_TOPK
        overall_sparsity = 1.0 - sp.keep_fraction if masked else 0.0
    return {
        "total": total,
        "projection": counts["projection"],
        "sparsity": overall_sparsity,
        "activated": total * (1.0 - overall_sparsity),
        "activated_projection": counts["projection"] * (1.0 - overall_sparsity),
    }


def write_checkpoint(path, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    """Magic, u64 header length, JSON header, then little-endian float64 payload."""
    names = sorted(arrays)
    header = {
        "config": cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n])
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    offset = 16 + n
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        chunk = raw[offset : offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{path}: truncated payload")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    expected = parameter_shapes(cfg)
    got = {k: a.shape for k, a in arrays.items()}
    if got != expected:
        raise CheckpointError(f"{path}: tensors do not match the stored config")
    return cfg, arrays


def iter_weight_names(cfg: ModelConfig) -> Iterator[tuple[int, str, str]]:
    for layer in range(cfg.n_layers):
        for name in PROJECTIONS:
            yield layer, name, f"layers.{layer}.{name}"
