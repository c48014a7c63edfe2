import numpy as np
import pytest
from _oracles import central_diff, rel_err, scalar_softmax, straight_line_smolora

from smolora.errors import ShapeError
from smolora.lora import (
    LoRABlock,
    MoLoRALayer,
    adaptive_fusion,
    init_lora_block,
    init_molora,
    init_smolora,
    lora_apply,
    molora_forward,
    smolora_delta,
    smolora_forward,
)
from smolora.tensor import (
    Matrix,
    Tape,
    add,
    backward,
    cross_entropy,
    matmul,
    mean_over_columns,
    scale_const,
    sum_all,
)


def _seeded_smolora(seed=0, d=8, k_out=8, M=4, nm=4, r=2, e=6, top_k=1):
    return init_smolora(d=d, k_out=k_out, M=M, N_minus_M=nm, r=r, e=e, top_k=top_k, seed=seed)


def _fill_blocks(layer, rng):
    """Give every B matrix nonzero entries so updates actually fire."""
    blocks = getattr(layer, "blocks", None)
    if blocks is None:
        blocks = layer.vu_blocks + layer.if_blocks
    for b in blocks:
        b.B.a[...] = rng.normal(size=b.B.shape)


class TestLoRABlock:
    def test_zero_init_output(self):
        rng = np.random.default_rng(0)
        block = init_lora_block(6, 4, 2, rng)
        x = Matrix(rng.normal(size=(6, 3)))
        assert np.all(lora_apply(block, x).a == 0.0)

    def test_hand_expansion(self):
        block = LoRABlock(A=Matrix([[1.0, 0.0]]), B=Matrix([[2.0], [0.0]]), rank=1, scale=1.0)
        out = lora_apply(block, Matrix([[3.0], [5.0]]))
        assert out.tolist() == [[6.0], [0.0]]

    def test_scale_linearity(self):
        a = Matrix([[1.0, -0.5]])
        b = Matrix([[2.0], [1.0]])
        one = LoRABlock(A=a, B=b, rank=1, scale=1.0)
        two = LoRABlock(A=a, B=b, rank=1, scale=2.0)
        x = Matrix([[0.4], [1.2]])
        assert np.allclose(lora_apply(two, x).a, 2.0 * lora_apply(one, x).a)

    def test_rank_bound_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            init_lora_block(4, 4, 3, rng)  # max allowed is 2

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        block = init_lora_block(6, 4, 2, rng)
        with pytest.raises(ShapeError):
            lora_apply(block, Matrix(np.zeros((5, 2))))


class TestMoLoRAForward:
    def test_single_expert_degeneracy(self):
        layer = init_molora(d=6, k_out=4, N=1, r=2, top_k=1, seed=3)
        rng = np.random.default_rng(4)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(6, 3)))
        expected = add(matmul(layer.W0, x), lora_apply(layer.blocks[0], x))
        assert np.allclose(molora_forward(layer, x).a, expected.a, atol=1e-12)

    def test_zero_init_is_base_only(self):
        layer = init_molora(d=6, k_out=4, N=3, r=2, top_k=2, seed=5)
        x = Matrix(np.random.default_rng(6).normal(size=(6, 2)))
        assert np.array_equal(molora_forward(layer, x).a, (layer.W0.a @ x.a))

    def test_token_wise_routing_brute_force(self):
        # Token 0 routes to block 0, token 1 to block 1, by construction.
        rng = np.random.default_rng(7)
        layer = init_molora(d=2, k_out=3, N=2, r=1, top_k=1, seed=8)
        _fill_blocks(layer, rng)
        layer.router.a[...] = [[10.0, 0.0], [0.0, 10.0]]
        x = Matrix([[1.0, 0.0], [0.0, 1.0]])
        out = molora_forward(layer, x)
        for t, block in ((0, layer.blocks[0]), (1, layer.blocks[1])):
            col = Matrix(x.a[:, t : t + 1])
            expected = layer.W0.a @ col.a + lora_apply(block, col).a
            assert np.allclose(out.a[:, t : t + 1], expected, atol=1e-12)

    def test_equals_plain_lora_when_single_block(self):
        # Degenerate equivalence on a batch of random inputs.
        layer = init_molora(d=8, k_out=6, N=1, r=3, top_k=1, seed=11)
        rng = np.random.default_rng(12)
        _fill_blocks(layer, rng)
        for _ in range(100):
            x = Matrix(rng.normal(size=(8, 2)))
            plain = layer.W0.a @ x.a + lora_apply(layer.blocks[0], x).a
            assert np.max(np.abs(molora_forward(layer, x).a - plain)) <= 1e-12


class TestAdaptiveFusion:
    def test_equal_scores_average(self):
        x_vu = Matrix([[2.0, 4.0], [0.0, 2.0]])
        x_if = Matrix([[0.0, 2.0], [2.0, 0.0]])
        # Zero importances give u == v == 0 everywhere.
        y, alpha, beta = adaptive_fusion(x_vu, x_if, Matrix([[0.0, 0.0]]), Matrix([[0.0, 0.0]]))
        assert np.allclose(alpha.a, 0.5) and np.allclose(beta.a, 0.5)
        assert np.allclose(y.a, 0.5 * (x_vu.a + x_if.a))

    def test_large_gap_saturates(self):
        x_vu = Matrix([[1.0], [2.0]])
        x_if = Matrix([[-3.0], [5.0]])
        # u - v = 50 >= 40 at the single position.
        y, alpha, beta = adaptive_fusion(
            x_vu, x_if, Matrix([[50.0, 0.0]]), Matrix([[0.0, 0.0]])
        )
        assert alpha.a[0, 0] > 1.0 - 1e-12
        assert np.max(np.abs(y.a - x_vu.a)) < 1e-12

    def test_scalar_softmax_oracle(self):
        # Importances picked so u = [1.5], v = [0.9].
        x_vu = Matrix([[1.5]])
        x_if = Matrix([[0.9]])
        y, alpha, beta = adaptive_fusion(x_vu, x_if, Matrix([[1.0]]), Matrix([[1.0]]))
        expected = scalar_softmax([1.5, 0.9])
        assert alpha.a[0, 0] == pytest.approx(expected[0], abs=1e-12)
        assert alpha.a[0, 0] == pytest.approx(0.6457, abs=1e-4)
        assert beta.a[0, 0] == pytest.approx(0.3543, abs=1e-4)

    def test_fusion_simplex(self):
        rng = np.random.default_rng(13)
        x_vu = Matrix(rng.normal(size=(5, 7)))
        x_if = Matrix(rng.normal(size=(5, 7)))
        _, alpha, beta = adaptive_fusion(
            x_vu, x_if, Matrix(rng.normal(size=(1, 5))), Matrix(rng.normal(size=(1, 5)))
        )
        assert np.all(alpha.a > 0) and np.all(alpha.a < 1)
        assert np.all(np.abs(alpha.a + beta.a - 1.0) <= 1e-12)


class TestSMoLoRAForward:
    def test_zero_init_neutrality(self):
        for seed in range(5):
            layer = _seeded_smolora(seed=seed)
            rng = np.random.default_rng(seed + 100)
            x = Matrix(rng.normal(size=(8, 3)))
            emb = Matrix(rng.normal(size=(6, 1)))
            y, _ = smolora_forward(layer, x, emb)
            assert np.array_equal(y.a, layer.W0.a @ x.a)

    def test_single_block_banks_gate_to_one(self):
        layer = _seeded_smolora(M=1, nm=1, top_k=1)
        rng = np.random.default_rng(14)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(8, 2)))
        emb = Matrix(rng.normal(size=(6, 1)))
        y, trace = smolora_forward(layer, x, emb)
        assert trace.vu_selected == [(0, 1.0)]
        assert trace.if_selected == [(0, 1.0)]
        x_vu = lora_apply(layer.vu_blocks[0], x)
        x_if = lora_apply(layer.if_blocks[0], x)
        fused, _, _ = adaptive_fusion(x_vu, x_if, layer.I_vu, layer.I_if)
        assert np.allclose(y.a, layer.W0.a @ x.a + fused.a, atol=1e-12)

    def test_straight_line_oracle(self):
        layer = _seeded_smolora(seed=21, top_k=2)
        rng = np.random.default_rng(22)
        _fill_blocks(layer, rng)
        x = rng.normal(size=(8, 3))
        emb = rng.normal(size=(6, 1))
        emb /= np.linalg.norm(emb)
        y, _ = smolora_forward(layer, Matrix(x), Matrix(emb))
        expected = straight_line_smolora(
            W0=layer.W0.a,
            vu_A=[b.A.a for b in layer.vu_blocks],
            vu_B=[b.B.a for b in layer.vu_blocks],
            if_A=[b.A.a for b in layer.if_blocks],
            if_B=[b.B.a for b in layer.if_blocks],
            R_vu=layer.R_vu.a,
            R_if=layer.R_if.a,
            I_vu=layer.I_vu.a,
            I_if=layer.I_if.a,
            top_k=2,
            x=x,
            emb=emb,
        )
        assert np.allclose(y.a, expected, rtol=1e-12, atol=1e-12)

    def test_linearity_in_base_weight(self):
        layer = _seeded_smolora(seed=30)
        rng = np.random.default_rng(31)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(8, 4)))
        emb = Matrix(rng.normal(size=(6, 1)))
        delta, _ = smolora_delta(layer, x, emb)
        y, _ = smolora_forward(layer, x, emb)
        assert np.array_equal(y.a, add(matmul(layer.W0, x), delta).a)

    def test_gate_and_fusion_simplex_on_trace(self):
        layer = _seeded_smolora(seed=40, top_k=2)
        rng = np.random.default_rng(41)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(8, 3)))
        emb = Matrix(rng.normal(size=(6, 1)))
        _, trace = smolora_forward(layer, x, emb)
        for selected in (trace.vu_selected, trace.if_selected):
            assert len(selected) == 2
            assert all(w > 0 for _, w in selected)
            assert abs(sum(w for _, w in selected) - 1.0) <= 1e-12
        assert abs(trace.alpha_mean + trace.beta_mean - 1.0) <= 1e-9

    def test_embedding_shape_checked(self):
        layer = _seeded_smolora()
        x = Matrix(np.zeros((8, 2)))
        with pytest.raises(ShapeError):
            smolora_forward(layer, x, Matrix(np.zeros((5, 1))))


class TestInitSMoLoRA:
    def test_same_seed_bitwise_identical(self):
        a = init_smolora(d=16, k_out=16, M=4, N_minus_M=4, r=4, e=8, top_k=1, seed=77)
        b = init_smolora(d=16, k_out=16, M=4, N_minus_M=4, r=4, e=8, top_k=1, seed=77)
        for ma, mb in (
            (a.W0, b.W0),
            (a.R_vu, b.R_vu),
            (a.R_if, b.R_if),
            (a.I_vu, b.I_vu),
            (a.I_if, b.I_if),
        ):
            assert np.array_equal(ma.a, mb.a)
        for ba, bb in zip(a.vu_blocks + a.if_blocks, b.vu_blocks + b.if_blocks):
            assert np.array_equal(ba.A.a, bb.A.a)
            assert np.array_equal(ba.B.a, bb.B.a)

    def test_reference_defaults_constructible(self):
        layer = init_smolora(d=64, k_out=64, M=4, N_minus_M=4, r=16, e=64, top_k=1, seed=0)
        assert len(layer.vu_blocks) == 4
        assert len(layer.if_blocks) == 4
        assert all(b.rank == 16 for b in layer.vu_blocks + layer.if_blocks)
        assert layer.top_k == 1
        assert all(np.all(b.B.a == 0.0) for b in layer.vu_blocks + layer.if_blocks)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            init_smolora(d=8, k_out=8, M=0, N_minus_M=4, r=2, e=4, top_k=1, seed=0)
        with pytest.raises(ValueError):
            init_smolora(d=8, k_out=8, M=2, N_minus_M=2, r=2, e=4, top_k=3, seed=0)


class TestGradients:
    def _loss_through_layer(self, layer, x, emb, tape=None):
        y, _ = smolora_forward(layer, x, emb, tape)
        pooled = mean_over_columns(y, tape)
        return add(
            cross_entropy(pooled, 1, tape),
            scale_const(sum_all(y, tape), 0.1, tape),
            tape,
        )

    def test_full_composition_matches_finite_differences(self):
        layer = _seeded_smolora(seed=50, top_k=2)
        rng = np.random.default_rng(51)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(8, 3)))
        emb = Matrix(rng.normal(size=(6, 1)))

        tape = Tape()
        params = layer.trainable()
        tape.watch(*params)
        grads = backward(tape, self._loss_through_layer(layer, x, emb, tape))

        _, trace = smolora_forward(layer, x, emb)
        vu_sel = {i for i, _ in trace.vu_selected}
        if_sel = {j for j, _ in trace.if_selected}

        rng_pick = np.random.default_rng(52)
        checked = 0
        worst = 0.0
        for param in params:
            g = grads[param].a
            n_checks = min(10, param.rows * param.cols)
            for _ in range(n_checks):
                i = int(rng_pick.integers(param.rows))
                j = int(rng_pick.integers(param.cols))
                fd = central_diff(
                    lambda: self._loss_through_layer(layer, x, emb).item(), param.a, i, j
                )
                worst = max(worst, rel_err(g[i, j], fd))
                checked += 1
        assert checked >= 100
        assert worst < 1e-4

        # Non-selected blocks must receive exactly zero gradient.
        for i, block in enumerate(layer.vu_blocks):
            if i not in vu_sel:
                assert np.all(grads[block.A].a == 0.0)
                assert np.all(grads[block.B].a == 0.0)
        for j, block in enumerate(layer.if_blocks):
            if j not in if_sel:
                assert np.all(grads[block.A].a == 0.0)
                assert np.all(grads[block.B].a == 0.0)

    def test_molora_gradients_match_finite_differences(self):
        layer = init_molora(d=6, k_out=5, N=4, r=2, top_k=2, seed=60)
        rng = np.random.default_rng(61)
        _fill_blocks(layer, rng)
        x = Matrix(rng.normal(size=(6, 3)))

        def loss(tape=None):
            y = molora_forward(layer, x, tape)
            return add(
                cross_entropy(mean_over_columns(y, tape), 0, tape),
                scale_const(sum_all(y, tape), 0.1, tape),
                tape,
            )

        tape = Tape()
        params = layer.trainable()
        tape.watch(*params)
        grads = backward(tape, loss(tape))
        worst = 0.0
        for param in params:
            g = grads[param].a
            for i in range(param.rows):
                for j in range(param.cols):
                    fd = central_diff(lambda: loss().item(), param.a, i, j)
                    worst = max(worst, rel_err(g[i, j], fd))
        assert worst < 1e-4
