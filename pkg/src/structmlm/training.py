"""Deterministic MLM pre-training loop, held-out evaluation, checkpoints.

The structure-aware and vanilla runs differ in exactly one switch:
global_attention_enabled. When it is off, the attention pattern's global
set is forced empty regardless of token roles, which is what makes the
twin comparison a controlled experiment.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import TokenizedDoc, chunk_doc, mask_for_mlm
from .docfile import atomic_write_bytes
from .encoder import (
    LABEL_IGNORE,
    ModelConfig,
    Parameters,
    _forward_cached,
    _log_softmax,
    init_parameters,
    loss_and_grads,
)
from .errors import (
    CorruptFileError,
    DivergenceError,
    EmptyCorpusError,
    EmptyHeldoutError,
    NoMaskedPositionsError,
    VersionMismatchError,
)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    global_attention_enabled: bool = True
    eval_every: int = 0
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch_size and lr positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "global_attention_enabled": self.global_attention_enabled,
            "eval_every": self.eval_every,
            "mask_rate": self.mask_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    params: Parameters
    seed: int
    step: int
    global_attention_enabled: bool
    model_id: str = "model"


@dataclass(frozen=True)
class EvalReport:
    masked_ce_nats: float
    bpc: float
    n_masked: int
    n_chars: int

    def to_dict(self) -> dict:
        return {
            "masked_ce_nats": self.masked_ce_nats,
            "bpc": self.bpc,
            "n_masked": self.n_masked,
            "n_chars": self.n_chars,
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_curve: List[Tuple[int, float]]
    eval_curve: List[Tuple[int, EvalReport]] = field(default_factory=list)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


class _Adam:
    def __init__(self, params: Parameters, config: TrainConfig):
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: Parameters, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name in params.tensors:  # fixed order keeps updates reproducible
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            params.tensors[name] -= c.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.eps)


def _batch_rows(chunks, order, start, batch_size, config: TrainConfig, vocab_size: int, step: int):
    """Assemble one training batch as per-sequence rows (no padding)."""
    rows = []
    for r in range(batch_size):
        chunk = chunks[order[(start + r) % len(order)]]
        seed = _derived_seed(config.seed, 1, step, r)
        batch = mask_for_mlm(chunk, config.mask_rate, seed, vocab_size)
        gmask = batch.global_mask[0] if config.global_attention_enabled else np.zeros(len(chunk), dtype=np.uint8)
        rows.append((batch.input_ids[0], batch.labels[0], gmask))
    return rows


def train(
    corpus: Sequence[TokenizedDoc],
    config: TrainConfig,
    model_config: ModelConfig,
    heldout: Optional[Sequence[TokenizedDoc]] = None,
    model_id: Optional[str] = None,
) -> TrainResult:
    """Adam-optimized MLM training over seeded-shuffled chunks. Fully
    deterministic for fixed configs; aborts if the loss goes non-finite."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("train requires a non-empty corpus")
    if model_id is None:
        model_id = ("sa" if config.global_attention_enabled else "vanilla") + f"-seed{config.seed}"
    chunks = [c for doc in corpus for c in chunk_doc(doc, model_config.max_len)]
    params = init_parameters(model_config, config.seed)
    opt = _Adam(params, config)

    loss_curve: List[Tuple[int, float]] = []
    eval_curve: List[Tuple[int, EvalReport]] = []
    pos = 0
    epoch = 0
    order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(chunks))
    for step in range(config.steps):
        if pos >= len(order):
            epoch += 1
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(chunks))
            pos = 0
        rows = _batch_rows(chunks, order, pos, config.batch_size, config, model_config.vocab_size, step)
        pos += config.batch_size
        loss, grads = loss_and_grads(params, rows)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")
        loss_curve.append((step, loss))
        opt.step(params, grads)
        if heldout is not None and config.eval_every > 0 and (step + 1) % config.eval_every == 0:
            report = _evaluate_params(
                params, heldout, config.seed, config.global_attention_enabled, config.mask_rate
            )
            eval_curve.append((step + 1, report))

    ckpt = Checkpoint(params, config.seed, config.steps, config.global_attention_enabled, model_id)
    return TrainResult(ckpt, loss_curve, eval_curve)


def _evaluate_params(
    params: Parameters,
    heldout: Sequence[TokenizedDoc],
    seed: int,
    global_attention_enabled: bool,
    mask_rate: float,
) -> EvalReport:
    cfg = params.config
    ce_sum = 0.0
    n_masked = 0
    n_chars = 0
    for di, doc in enumerate(heldout):
        for ci, chunk in enumerate(chunk_doc(doc, cfg.max_len)):
            batch = mask_for_mlm(chunk, mask_rate, _derived_seed(seed, 3, di, ci), cfg.vocab_size)
            labels = batch.labels[0]
            sel = labels != LABEL_IGNORE
            if not sel.any():
                continue
            gmask = batch.global_mask[0] if global_attention_enabled else np.zeros(len(chunk), dtype=np.uint8)
            logits, _, _ = _forward_cached(params, batch.input_ids[0], gmask)
            logp = _log_softmax(logits[sel])
            ce_sum += float(-logp[np.arange(sel.sum()), labels[sel]].sum())
            n_masked += int(sel.sum())
            n_chars += int(chunk.char_lens[sel].sum())
    if n_masked == 0:
        raise NoMaskedPositionsError("evaluation masking selected no positions")
    return EvalReport(ce_sum / n_masked, (ce_sum / LN2) / n_chars, n_masked, n_chars)


def evaluate(
    checkpoint: Checkpoint,
    heldout_corpus: Sequence[TokenizedDoc],
    seed: int,
    mask_rate: float = 0.15,
) -> EvalReport:
    """Masked cross entropy and bits-per-character on held-out documents.

    Masked positions depend only on (corpus, seed), so two checkpoints
    evaluated with the same seed see identical masks and any metric
    difference is attributable to parameters. bpc divides the summed base-2
    log-loss by the character length of the masked tokens. The pattern
    follows the checkpoint's own global attention policy.
    """
    heldout = list(heldout_corpus)
    if not heldout:
        raise EmptyHeldoutError("held-out corpus is empty")
    return _evaluate_params(
        checkpoint.params, heldout, seed, checkpoint.global_attention_enabled, mask_rate
    )


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------
#
#   magic "SMCK" | u32 LE format version | u64 LE manifest length |
#   manifest JSON (model config, seed, step, policy, model id, tensor
#   shapes in order) | per-tensor raw little-endian float64, row-major |
#   sha256 of everything above
#
# The sha256 trailer makes truncation and corruption detectable; the
# round-trip is bit-exact.

_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    manifest = {
        "model_config": checkpoint.params.config.to_dict(),
        "seed": checkpoint.seed,
        "step": checkpoint.step,
        "global_attention_enabled": checkpoint.global_attention_enabled,
        "model_id": checkpoint.model_id,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in checkpoint.params.tensors.items()],
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(blob)), blob]
    for arr in checkpoint.params.tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    atomic_write_bytes(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 4 + 4 + 8 + 32 or data[:4] != _MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError(f"{path}: checksum mismatch")
    version = struct.unpack("<I", body[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    mlen = struct.unpack("<Q", body[8:16])[0]
    try:
        manifest = json.loads(body[16 : 16 + mlen].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["model_config"])
        offset = 16 + mlen
        ordered = OrderedDict()
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = body[offset : offset + 8 * count]
            if len(raw) != 8 * count:
                raise CorruptFileError(f"{path}: truncated tensor {entry['name']}")
            ordered[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            offset += 8 * count
        if offset != len(body):
            raise CorruptFileError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: malformed manifest ({exc})") from exc
    return Checkpoint(
        Parameters(config, ordered),
        int(manifest["seed"]),
        int(manifest["step"]),
        bool(manifest["global_attention_enabled"]),
        str(manifest["model_id"]),
    )


def write_loss_curve(path: Union[str, Path], curve: Sequence[Tuple[int, float]]) -> None:
    lines = ["step,loss"] + [f"{s},{v:.17g}" for s, v in curve]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_eval_report(path: Union[str, Path], report: EvalReport) -> None:
    atomic_write_bytes(path, (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8"))
