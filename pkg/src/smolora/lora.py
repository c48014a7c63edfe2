"""Low-rank adapter blocks and the mixture layers built from them.

Three adapter designs share a frozen base weight W0:

* a single LoRA block (sequential fine-tuning control),
* a token-wise mixture of blocks with one router (MoLoRA control),
* the separable mixture: one bank gated per instance on the averaged layer
  input, a second bank gated on the instruction embedding, with the two bank
  outputs fused per position by trainable importance scores.

Blocks initialize with B = 0 so a fresh layer is exactly W0 @ x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .routing import RoutingTrace, route_instance, route_instruction, selected_from_gate
from .tensor import (
    Matrix,
    Tape,
    add,
    concat_rows,
    matmul,
    rowvec_mul,
    scalar_mul,
    scale_const,
    softmax_columns,
    take_entry,
    take_row,
    topk_mask,
)


@dataclass
class LoRABlock:
    """Rank-r update scale * B @ A with A (r x d) and B (k_out x r)."""

    A: Matrix
    B: Matrix
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        if self.A.rows != self.rank or self.B.cols != self.rank:
            raise ShapeError(
                f"rank {self.rank} inconsistent with A {self.A.rows}x{self.A.cols}, "
                f"B {self.B.rows}x{self.B.cols}"
            )
        d, k_out = self.A.cols, self.B.rows
        if self.rank > min(d, k_out) / 2:
            raise ShapeError(f"rank {self.rank} too large for {k_out}x{d} base (max {min(d, k_out) // 2})")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def init_lora_block(d: int, k_out: int, r: int, rng: np.random.Generator, scale: float = 1.0) -> LoRABlock:
    """A ~ N(0, 1/d), B = 0, so the initial update is identically zero."""
    A = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / d), size=(r, d)))
    B = Matrix.zeros(k_out, r)
    return LoRABlock(A=A, B=B, rank=r, scale=scale)


def lora_apply(block: LoRABlock, x: Matrix, tape: Tape | None = None) -> Matrix:
    """scale * B @ (A @ x); the k_out x d product is never materialized."""
    ax = matmul(block.A, x, tape)
    bax = matmul(block.B, ax, tape)
    if block.scale == 1.0:
        return bax
    return scale_const(bax, block.scale, tape)


@dataclass
class MoLoRALayer:
    """Frozen W0 plus N blocks gated token-wise by a single router."""

    W0: Matrix
    blocks: list[LoRABlock]
    router: Matrix
    top_k: int

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("MoLoRALayer needs at least one block")
        if not 1 <= self.top_k <= len(self.blocks):
            raise ValueError(f"top_k {self.top_k} out of range for {len(self.blocks)} blocks")
        if self.router.rows != len(self.blocks) or self.router.cols != self.W0.cols:
            raise ShapeError(
                f"router {self.router.rows}x{self.router.cols} inconsistent with "
                f"{len(self.blocks)} blocks over {self.W0.cols} inputs"
            )

    def trainable(self) -> list[Matrix]:
        out = [self.router]
        for b in self.blocks:
            out.extend([b.A, b.B])
        return out


def molora_forward(layer: MoLoRALayer, x: Matrix, tape: Tape | None = None) -> Matrix:
    """W0 @ x plus the gate-weighted block updates, gated per token.

    Each column of x routes independently: its gate vector is
    softmax(topk_mask(router @ x[:, t], top_k)).
    """
    if x.rows != layer.W0.cols:
        raise ShapeError(f"input rows {x.rows} != layer input dim {layer.W0.cols}")
    logits = matmul(layer.router, x, tape)
    gates = softmax_columns(topk_mask(logits, layer.top_k, tape), tape)
    out = matmul(layer.W0, x, tape)
    used = np.flatnonzero(gates.a.max(axis=1) > 0.0)
    for i in used:
        delta_i = lora_apply(layer.blocks[i], x, tape)
        out = add(out, rowvec_mul(take_row(gates, int(i), tape), delta_i, tape), tape)
    return out


@dataclass
class SMoLoRALayer:
    """Frozen W0 with separable banks, dual routers, and fusion importances."""

    W0: Matrix
    vu_blocks: list[LoRABlock]
    if_blocks: list[LoRABlock]
    R_vu: Matrix
    R_if: Matrix
    I_vu: Matrix
    I_if: Matrix
    top_k: int
    layer_id: int = 0

    def __post_init__(self):
        if not self.vu_blocks or not self.if_blocks:
            raise ValueError("both banks need at least one block")
        if self.top_k > min(len(self.vu_blocks), len(self.if_blocks)):
            raise ValueError(
                f"top_k {self.top_k} exceeds bank sizes "
                f"{len(self.vu_blocks)}/{len(self.if_blocks)}"
            )
        k_out = self.W0.rows
        if self.I_vu.shape != (1, k_out) or self.I_if.shape != (1, k_out):
            raise ShapeError(f"importance matrices must be 1x{k_out}")

    def trainable(self) -> list[Matrix]:
        out = [self.R_vu, self.R_if, self.I_vu, self.I_if]
        for b in self.vu_blocks + self.if_blocks:
            out.extend([b.A, b.B])
        return out


def adaptive_fusion(
    x_vu: Matrix,
    x_if: Matrix,
    I_vu: Matrix,
    I_if: Matrix,
    tape: Tape | None = None,
) -> tuple[Matrix, Matrix, Matrix]:
    """Per-position convex combination of the two bank outputs.

    Scores u = I_vu @ x_vu and v = I_if @ x_if (1 x s each) pass through a
    pairwise softmax at every column, yielding weights alpha, beta with
    alpha_t + beta_t = 1; the result is alpha*x_vu + beta*x_if column-wise.
    """
    if x_vu.shape != x_if.shape:
        raise ShapeError(f"bank outputs differ: {x_vu.shape} vs {x_if.shape}")
    u = matmul(I_vu, x_vu, tape)
    v = matmul(I_if, x_if, tape)
    ab = softmax_columns(concat_rows(u, v, tape), tape)
    alpha = take_row(ab, 0, tape)
    beta = take_row(ab, 1, tape)
    y = add(rowvec_mul(alpha, x_vu, tape), rowvec_mul(beta, x_if, tape), tape)
    return y, alpha, beta


def _bank_output(
    blocks: list[LoRABlock], gate: Matrix, x: Matrix, tape: Tape | None
) -> Matrix:
    """Gate-weighted sum of block applications; zero-gate blocks are skipped,
    so they (and their router logits) receive exactly zero gradient."""
    out = None
    for i, w in enumerate(gate.a[:, 0]):
        if w == 0.0:
            continue
        term = scalar_mul(take_entry(gate, i, tape), lora_apply(blocks[i], x, tape), tape)
        out = term if out is None else add(out, term, tape)
    assert out is not None  # gates always keep at least one block
    return out


def smolora_delta(
    layer: SMoLoRALayer,
    x: Matrix,
    instr_emb: Matrix,
    tape: Tape | None = None,
) -> tuple[Matrix, RoutingTrace]:
    """The fused adapter update (everything except W0 @ x) plus its trace."""
    if x.rows != layer.W0.cols:
        raise ShapeError(f"input rows {x.rows} != layer input dim {layer.W0.cols}")
    if instr_emb.cols != 1 or instr_emb.rows != layer.R_if.cols:
        raise ShapeError(
            f"instruction embedding must be {layer.R_if.cols}x1, got "
            f"{instr_emb.rows}x{instr_emb.cols}"
        )
    vu_gate = route_instance(layer.R_vu, x, layer.top_k, tape)
    if_gate = route_instruction(layer.R_if, instr_emb, layer.top_k, tape)
    x_vu = _bank_output(layer.vu_blocks, vu_gate, x, tape)
    x_if = _bank_output(layer.if_blocks, if_gate, x, tape)
    fused, alpha, beta = adaptive_fusion(x_vu, x_if, layer.I_vu, layer.I_if, tape)
    trace = RoutingTrace(
        layer_id=layer.layer_id,
        vu_selected=selected_from_gate(vu_gate),
        if_selected=selected_from_gate(if_gate),
        alpha_mean=float(alpha.a.mean()),
        beta_mean=float(beta.a.mean()),
    )
    return fused, trace


def smolora_forward(
    layer: SMoLoRALayer,
    x: Matrix,
    instr_emb: Matrix,
    tape: Tape | None = None,
) -> tuple[Matrix, RoutingTrace]:
    """Full layer output W0 @ x + fused bank update, with the routing trace."""
    delta, trace = smolora_delta(layer, x, instr_emb, tape)
    y = add(matmul(layer.W0, x, tape), delta, tape)
    return y, trace


def init_smolora(
    d: int,
    k_out: int,
    M: int,
    N_minus_M: int,
    r: int,
    e: int,
    top_k: int,
    seed: int,
    layer_id: int = 0,
) -> SMoLoRALayer:
    """Seeded layer construction matching the default configuration.

    W0 and A matrices draw from N(0, 1/d), routers from N(0, 1/fan_in),
    importance rows from N(0, 0.02^2); all B matrices start at zero.
    """
    for name, val in (("d", d), ("k_out", k_out), ("M", M), ("N_minus_M", N_minus_M), ("r", r), ("e", e)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    if not 1 <= top_k <= min(M, N_minus_M):
        raise ValueError(f"top_k {top_k} out of range for banks of {M} and {N_minus_M}")
    rng = np.random.default_rng(seed)
    W0 = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / d), size=(k_out, d)))
    vu_blocks = [init_lora_block(d, k_out, r, rng) for _ in range(M)]
    if_blocks = [init_lora_block(d, k_out, r, rng) for _ in range(N_minus_M)]
    R_vu = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / d), size=(M, d)))
    R_if = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / e), size=(N_minus_M, e)))
    I_vu = Matrix._wrap(rng.normal(0.0, 0.02, size=(1, k_out)))
    I_if = Matrix._wrap(rng.normal(0.0, 0.02, size=(1, k_out)))
    return SMoLoRALayer(
        W0=W0,
        vu_blocks=vu_blocks,
        if_blocks=if_blocks,
        R_vu=R_vu,
        R_if=R_if,
        I_vu=I_vu,
        I_if=I_if,
        top_k=top_k,
        layer_id=layer_id,
    )


def init_molora(
    d: int, k_out: int, N: int, r: int, top_k: int, seed: int
) -> MoLoRALayer:
    """Seeded token-wise mixture layer with N blocks."""
    if N < 1:
        raise ValueError(f"N must be positive, got {N}")
    if not 1 <= top_k <= N:
        raise ValueError(f"top_k {top_k} out of range for {N} blocks")
    rng = np.random.default_rng(seed)
    W0 = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / d), size=(k_out, d)))
    blocks = [init_lora_block(d, k_out, r, rng) for _ in range(N)]
    router = Matrix._wrap(rng.normal(0.0, np.sqrt(1.0 / d), size=(N, d)))
    return MoLoRALayer(W0=W0, blocks=blocks, router=router, top_k=top_k)
