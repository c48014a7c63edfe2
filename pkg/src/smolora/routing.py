"""Router computations, the pluggable instruction embedder, and routing analytics.

Two gating paths feed the adapter banks: instance-based gates computed from
the sequence-averaged layer input, and instruction-based gates computed from
an embedding of the task's instruction text. The default embedder is a
deterministic feature-hashing bag of words standing in for a learned sentence
encoder; precomputed vectors can be supplied through the benchmark stream
file instead.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Matrix, Tape, matmul, mean_over_columns, softmax_columns, topk_mask

# 64-bit token hash: blake2b keyed with an 8-byte zero seed, fixed for all
# runs and platforms.
_HASH_SEED = (0).to_bytes(8, "little")
_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def token_hash(token: str) -> int:
    """Stable unsigned 64-bit hash of a token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_SEED).digest()
    return int.from_bytes(digest, "big")


def embed_text(text: str, e: int) -> Matrix:
    """Feature-hashing bag-of-words embedding, L2-normalized, as an e x 1 matrix.

    Tokens are lowercased and split on non-alphanumerics; each token lands in
    bucket hash % e with sign taken from hash bit 63.
    """
    if e < 1:
        raise ValueError(f"embedding dimension must be positive, got {e}")
    stripped = text.strip()
    if not stripped:
        raise ValueError("cannot embed empty text")
    tokens = [t for t in _TOKEN_RE.split(stripped.lower()) if t]
    if not tokens:
        raise ValueError(f"text has no alphanumeric tokens: {text!r}")
    v = np.zeros(e)
    for tok in tokens:
        h = token_hash(tok)
        sign = 1.0 if (h >> 63) & 1 else -1.0
        v[h % e] += sign
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ContractError(f"token signs cancelled to a zero embedding: {text!r}")
    return Matrix._wrap((v / norm).reshape(-1, 1))


class InstructionEmbedder(Protocol):
    """Contract for instruction encoders: deterministic, unit-norm output."""

    dimension: int

    def embed(self, text: str) -> Matrix: ...


class HashingEmbedder:
    """Default embedder; memoizes per text since task templates repeat heavily."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError(f"embedding dimension must be positive, got {dimension}")
        self.dimension = dimension
        self._cache: dict[str, Matrix] = {}

    def embed(self, text: str) -> Matrix:
        hit = self._cache.get(text)
        if hit is None:
            hit = embed_text(text, self.dimension)
            self._cache[text] = hit
        return hit


def route_instance(
    R_vu: Matrix, x: Matrix, top_k: int, tape: Tape | None = None
) -> Matrix:
    """Gate vector over the visual-understanding bank from the averaged input.

    softmax(topk_mask(R_vu @ mean(x), top_k)): exactly top_k positive entries
    summing to 1.
    """
    logits = matmul(R_vu, mean_over_columns(x, tape), tape)
    return softmax_columns(topk_mask(logits, top_k, tape), tape)


def route_instruction(
    R_if: Matrix, emb: Matrix, top_k: int, tape: Tape | None = None
) -> Matrix:
    """Gate vector over the instruction-following bank from the text embedding."""
    logits = matmul(R_if, emb, tape)
    return softmax_columns(topk_mask(logits, top_k, tape), tape)


@dataclass
class RoutingTrace:
    """Per-forward routing record: selected blocks, gate weights, fusion means."""

    layer_id: int
    vu_selected: list[tuple[int, float]] = field(default_factory=list)
    if_selected: list[tuple[int, float]] = field(default_factory=list)
    alpha_mean: float = 0.0
    beta_mean: float = 0.0


def selected_from_gate(gate: Matrix) -> list[tuple[int, float]]:
    """Nonzero (block index, weight) pairs of a gate column vector."""
    col = gate.a[:, 0]
    return [(int(i), float(w)) for i, w in enumerate(col) if w > 0.0]


def routing_histogram(
    traces_by_task: Mapping[int, Sequence[RoutingTrace]],
    vu_blocks: int,
    if_blocks: int,
) -> dict[int, dict[str, np.ndarray]]:
    """Gate-weighted block-usage frequencies per task and bank; rows sum to 1."""
    if not traces_by_task:
        raise ValueError("routing_histogram requires at least one trace")
    out: dict[int, dict[str, np.ndarray]] = {}
    for task_id in sorted(traces_by_task):
        traces = traces_by_task[task_id]
        if not traces:
            raise ValueError(f"task {task_id} has no traces")
        vu = np.zeros(vu_blocks)
        if_ = np.zeros(if_blocks)
        for tr in traces:
            for i, w in tr.vu_selected:
                vu[i] += w
            for j, w in tr.if_selected:
                if_[j] += w
        out[task_id] = {"vu": vu / vu.sum(), "if": if_ / if_.sum()}
    return out


def histogram_entropy(freq: np.ndarray) -> float:
    """Shannon entropy (nats) of a frequency vector."""
    p = freq[freq > 0]
    return float(-(p * np.log(p)).sum())


def write_routing_csv(path, hist: Mapping[int, Mapping[str, np.ndarray]]) -> None:
    """CSV rows (task, bank, block_0..block_{n-1}); short banks pad with blanks."""
    width = max(len(v) for banks in hist.values() for v in banks.values())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "bank"] + [f"block_{i}" for i in range(width)])
        for task_id in sorted(hist):
            for bank in ("vu", "if"):
                freq = hist[task_id][bank]
                row = [task_id, bank] + [repr(float(x)) for x in freq]
                row += [""] * (width - len(freq))
                w.writerow(row)


def read_routing_csv(path) -> dict[int, dict[str, np.ndarray]]:
    out: dict[int, dict[str, np.ndarray]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)  # header
        for row in reader:
            task_id, bank = int(row[0]), row[1]
            freq = np.array([float(x) for x in row[2:] if x != ""])
            out.setdefault(task_id, {})[bank] = freq
    return out
