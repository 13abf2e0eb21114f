"""A toy Diffusion Transformer with a cache hook at every residual branch.

Each block runs self-attention, optional cross-attention and a feed-forward
sublayer.  Every sublayer is wrapped in adaLN modulation and contributes a
gated branch output ``h`` to the residual stream (``x <- x + h``).  Before
computing ``h`` the model asks a :class:`BranchPolicy` whether a cached value
should be injected instead; that branch output is the unit of caching.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .errors import CacheShapeError, ConfigError, FormatError, ShapeError


# Diffusion timesteps are scaled before the sinusoidal features so that a full
# 1000-step chain spans about 10 radians at the highest frequency.
TIME_SCALE = 0.01


class LayerKind(str, Enum):
    SELF_ATTENTION = "self_attn"
    CROSS_ATTENTION = "cross_attn"
    FEED_FORWARD = "ffn"

    def __str__(self) -> str:
        return self.value


class LayerKey(NamedTuple):
    kind: LayerKind
    block: int


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the toy model.

    ``channels`` is the per-token latent width that the input projection lifts
    to ``dim`` and the output head maps back to.  ``context_tokens=0`` removes
    cross-attention.
    """

    blocks: int = 4
    dim: int = 64
    heads: int = 4
    tokens: int = 16
    context_tokens: int = 8
    channels: int = 8
    ffn_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "dim", "heads", "tokens", "channels", "ffn_mult"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name}", f"must be a positive integer, got {value!r}")
        if not isinstance(self.context_tokens, int) or self.context_tokens < 0:
            raise ConfigError("model.context_tokens", "must be a non-negative integer")
        if self.dim % self.heads:
            raise ConfigError("model.heads", f"{self.heads} does not divide dim={self.dim}")
        if self.dim % 2 or self.dim < 2:
            raise ConfigError("model.dim", "must be even (sinusoidal embeddings)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("model.seed", "must be a non-negative integer")

    @property
    def kinds(self) -> tuple[LayerKind, ...]:
        if self.context_tokens > 0:
            return (LayerKind.SELF_ATTENTION, LayerKind.CROSS_ATTENTION, LayerKind.FEED_FORWARD)
        return (LayerKind.SELF_ATTENTION, LayerKind.FEED_FORWARD)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError("model", f"unknown fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class BranchOutput:
    key: LayerKey
    step: int
    value: np.ndarray


class BranchPolicy:
    """Decides, per sublayer and step, whether to inject a cached branch output.

    The base class always computes.  Subclasses override :meth:`lookup` to
    return a tensor to inject (skipping the sublayer) and :meth:`record` to
    observe every branch output that was actually computed.
    """

    def lookup(self, key: LayerKey, step: int) -> np.ndarray | None:
        return None

    def record(self, output: BranchOutput) -> None:
        pass


ALWAYS_COMPUTE = BranchPolicy()


def _weight_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    d, n_sub = cfg.dim, len(cfg.kinds)
    shapes = [
        ("embed_in", (cfg.channels, d)),
        ("time_mlp.0", (d, d)),
        ("time_mlp.1", (d, d)),
    ]
    for j in range(cfg.blocks):
        shapes.append((f"blocks.{j}.adaln", (d, 3 * n_sub * d)))
        shapes.append((f"blocks.{j}.self_attn.qkv", (d, 3 * d)))
        shapes.append((f"blocks.{j}.self_attn.out", (d, d)))
        if cfg.context_tokens:
            shapes.append((f"blocks.{j}.cross_attn.q", (d, d)))
            shapes.append((f"blocks.{j}.cross_attn.kv", (d, 2 * d)))
            shapes.append((f"blocks.{j}.cross_attn.out", (d, d)))
        shapes.append((f"blocks.{j}.ffn.up", (d, cfg.ffn_mult * d)))
        shapes.append((f"blocks.{j}.ffn.down", (cfg.ffn_mult * d, d)))
    shapes.append(("head", (d, cfg.channels)))
    return shapes


def weight_checksum(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f4").tobytes()).hexdigest()


def make_context(cfg: ModelConfig, seed: int) -> np.ndarray:
    """Seeded stand-in for an encoded text prompt, shape ``(context_tokens, dim)``."""
    if cfg.context_tokens == 0:
        raise ConfigError("model.context_tokens", "model has no cross-attention context")
    return nx.SeededRng(seed ^ 0xC0A7E7).normal((cfg.context_tokens, cfg.dim))


class Model:
    """Immutable weights plus the forward pass; build with :func:`build_model`."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, np.ndarray], null_context: np.ndarray | None):
        self.cfg = cfg
        self.weights = weights
        self.null_context = null_context
        self.pos_embedding = nx.sinusoidal_embedding(np.arange(cfg.tokens), cfg.dim)

    @property
    def kinds(self) -> tuple[LayerKind, ...]:
        return self.cfg.kinds

    @property
    def keys(self) -> list[LayerKey]:
        """Cacheable sublayers in execution order."""
        return [LayerKey(kind, j) for j in range(self.cfg.blocks) for kind in self.kinds]

    def checksums(self) -> dict[str, str]:
        sums = {name: weight_checksum(w) for name, w in self.weights.items()}
        if self.null_context is not None:
            sums["null_context"] = weight_checksum(self.null_context)
        return sums

    def timestep_embedding(self, t: float, batch: int) -> np.ndarray:
        w = self.weights
        freq = nx.sinusoidal_embedding(np.full(batch, t * TIME_SCALE), self.cfg.dim)
        return nx.matmul(nx.silu(nx.matmul(freq, w["time_mlp.0"])), w["time_mlp.1"])

    def _resolve_context(self, context: np.ndarray | None, batch: int) -> np.ndarray | None:
        cfg = self.cfg
        if cfg.context_tokens == 0:
            if context is not None:
                raise ShapeError("model has no cross-attention but a context was supplied")
            return None
        if context is None:
            context = self.null_context
        context = np.asarray(context, dtype=nx.DTYPE)
        if context.ndim == 2:
            context = np.broadcast_to(context, (batch,) + context.shape)
        if context.shape != (batch, cfg.context_tokens, cfg.dim):
            raise ShapeError(
                f"context shape {context.shape} != {(batch, cfg.context_tokens, cfg.dim)}"
            )
        return context

    def _attention(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        b, lq, d = q.shape
        lk = k.shape[1]
        h = self.cfg.heads
        dh = d // h
        q = q.reshape(b, lq, h, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, lk, h, dh).transpose(0, 2, 3, 1)
        v = v.reshape(b, lk, h, dh).transpose(0, 2, 1, 3)
        scores = nx.matmul(q, k) * nx.DTYPE(1.0 / math.sqrt(dh))
        out = nx.matmul(nx.softmax(scores, axis=-1), v)
        return out.transpose(0, 2, 1, 3).reshape(b, lq, d)

    def _sublayer(self, kind: LayerKind, block: int, x: np.ndarray, context) -> np.ndarray:
        w = self.weights
        prefix = f"blocks.{block}.{kind.value}"
        d = self.cfg.dim
        if kind is LayerKind.SELF_ATTENTION:
            qkv = nx.matmul(x, w[f"{prefix}.qkv"])
            out = self._attention(qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :])
            return nx.matmul(out, w[f"{prefix}.out"])
        if kind is LayerKind.CROSS_ATTENTION:
            q = nx.matmul(x, w[f"{prefix}.q"])
            kv = nx.matmul(context, w[f"{prefix}.kv"])
            out = self._attention(q, kv[..., :d], kv[..., d:])
            return nx.matmul(out, w[f"{prefix}.out"])
        return nx.matmul(nx.gelu(nx.matmul(x, w[f"{prefix}.up"])), w[f"{prefix}.down"])

    def forward(
        self,
        x: np.ndarray,
        t: float,
        context: np.ndarray | None = None,
        policy: BranchPolicy = ALWAYS_COMPUTE,
        step: int = 0,
    ) -> tuple[np.ndarray, list[BranchOutput]]:
        """Predict noise for a latent batch ``(B, tokens, channels)`` at timestep `t`.

        A 2-D latent is treated as a batch of one.  `context` may be
        ``(context_tokens, dim)`` (shared), ``(B, context_tokens, dim)`` or None
        for the model's null context.  Returns ``(eps, visited)`` where
        `visited` lists every branch output actually computed, in order.
        """
        cfg = self.cfg
        squeeze = np.ndim(x) == 2
        x = nx.as_tensor(x[None] if squeeze else x, name="x")
        if x.shape[1:] != (cfg.tokens, cfg.channels):
            raise ShapeError(f"latent shape {x.shape[1:]} != {(cfg.tokens, cfg.channels)}")
        batch = x.shape[0]
        context = self._resolve_context(context, batch)
        w = self.weights
        d = cfg.dim
        visited: list[BranchOutput] = []

        with nx.mac_label("non_eligible"):
            h = nx.matmul(x, w["embed_in"]) + self.pos_embedding
            cond = nx.silu(self.timestep_embedding(t, batch))[:, None, :]

        for j in range(cfg.blocks):
            with nx.mac_label("non_eligible"):
                mod = nx.matmul(cond, w[f"blocks.{j}.adaln"])
            for i, kind in enumerate(self.kinds):
                key = LayerKey(kind, j)
                cached = policy.lookup(key, step)
                if cached is None:
                    base = 3 * i * d
                    shift = mod[..., base : base + d]
                    scale = mod[..., base + d : base + 2 * d]
                    gate = mod[..., base + 2 * d : base + 3 * d]
                    with nx.mac_label(kind.value):
                        out = self._sublayer(kind, j, scale * nx.layer_norm(h) + shift, context)
                    branch = gate * out
                    produced = BranchOutput(key, step, branch)
                    visited.append(produced)
                    policy.record(produced)
                else:
                    if np.shape(cached) != h.shape:
                        raise CacheShapeError(
                            f"{kind.value}[{j}] step {step}: cached shape {np.shape(cached)} != {h.shape}"
                        )
                    branch = cached
                h = h + branch

        with nx.mac_label("non_eligible"):
            eps = nx.matmul(nx.layer_norm(h), w["head"])
        return (eps[0] if squeeze else eps), visited


def build_model(cfg: ModelConfig) -> Model:
    """Draw every weight from ``SeededRng(cfg.seed)`` in a fixed order.

    Matrices are standard normal scaled by ``1/sqrt(fan_in)``; the null
    context (used for unconditional evaluation) is drawn last, unscaled.
    """
    rng = nx.SeededRng(cfg.seed)
    weights = {}
    for name, shape in _weight_shapes(cfg):
        weights[name] = rng.normal(shape) * nx.DTYPE(1.0 / math.sqrt(shape[0]))
    null_context = rng.normal((cfg.context_tokens, cfg.dim)) if cfg.context_tokens else None
    return Model(cfg, weights, null_context)


def export_weights(model: Model, directory: str | Path) -> Path:
    """Write one SCTD file per matrix plus ``manifest.json`` with config and checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.weights)
    if model.null_context is not None:
        tensors["null_context"] = model.null_context
    for name, w in tensors.items():
        nx.write_sctd(directory / f"{name}.sctd", w)
    manifest = {"config": model.cfg.to_dict(), "checksums": model.checksums()}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def import_weights(directory: str | Path) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = ModelConfig.from_dict(manifest["config"])
    expected = manifest["checksums"]
    weights = {}
    for name, shape in _weight_shapes(cfg):
        w = nx.read_sctd(directory / f"{name}.sctd")
        if w.shape != shape:
            raise FormatError(f"{name}: shape {w.shape} != {shape}")
        weights[name] = w
    null_context = nx.read_sctd(directory / "null_context.sctd") if cfg.context_tokens else None
    model = Model(cfg, weights, null_context)
    actual = model.checksums()
    for name, digest in expected.items():
        if actual.get(name) != digest:
            raise FormatError(f"{name}: checksum mismatch")
    return model
