from __future__ import annotations

import json
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from breakformake.matcore import frobenius_norm, gaussian, make_rng
from breakformake.plp import (
    EXACT,
    PlainLoraAdapter,
    block_profile,
    break_adapter,
    frozen_blocks,
    make_adapter,
    new_plain,
    new_plp,
)
from breakformake.synth import Batch, batch_from_inputs, fit_plp, delta_target, gen_task, sample_batch
from breakformake.train import (
    Sgd,
    TrainConfig,
    finetune_combined,
    grad_plain,
    grad_plp,
    loss_joint,
    loss_mcp,
    mse_loss,
    read_trace,
    train_content,
    train_joint,
    train_single,
    train_style,
    write_trace,
)

GOLDEN = Path(__file__).parent / "golden"


def small_case(seed, m=8, n=6, r=4, d=4, batch=3, mode=EXACT):
    # r > n - d on purpose: the seeded shape 8x6, r=4, d=4 exercises rank-limited blocks
    rng = make_rng(seed, 9)
    with pytest.warns(UserWarning) if r > min(d, m - d, n - d) else nullcontext():
        ad = new_plp(m, n, r, d, mode, seed, "gaussian-both", rng)
    ad = ad.with_trainable(gaussian(m - d, r, rng, 0.5), gaussian(r, n - d, rng, 0.5))
    W0 = gaussian(m, n, rng)
    b = Batch(gaussian(n, batch, rng), gaussian(m, batch, rng), None, None)
    return ad, W0, b


def fd_grad(loss_of, param, h=1e-5):
    g = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        p = np.array(param)
        p[idx] += h
        up = loss_of(p)
        p[idx] -= 2 * h
        g[idx] = (up - loss_of(p)) / (2 * h)
    return g


def assert_fd_close(analytic, fd, rel=1e-6):
    mask = np.abs(fd) > 1e-8
    assert mask.any()
    err = np.abs(analytic[mask] - fd[mask]) / np.abs(fd[mask])
    assert err.max() <= rel, f"max relative error {err.max():.3g}"


class TestLosses:
    def test_definition(self):
        ad, W0, b = small_case(0)
        R = W0 @ b.Z + ad.w_up @ (ad.w_down @ b.Z) - b.X
        assert mse_loss(ad, W0, b) == pytest.approx(np.sum(R**2) / 3, rel=1e-12)

    def test_hand_computed(self):
        ad = new_plp(4, 4, 2, 2, trainable_init="zero-D")
        ad = ad.with_trainable(np.zeros_like(ad.B), ad.D)
        # residual = 0*Z + 0 - X with X = Z = I gives |I|^2 / 4 = 1
        b = Batch(np.eye(4), np.eye(4), None, None)
        assert mse_loss(ad, np.zeros((4, 4)), b) == 1.0

    def test_scalar_loop_oracle(self):
        ad, W0, b = small_case(1)
        W = W0 + ad.w_up @ ad.w_down
        total = 0.0
        for j in range(b.size):
            for i in range(W.shape[0]):
                pred = sum(W[i, k] * b.Z[k, j] for k in range(W.shape[1]))
                total += (pred - b.X[i, j]) ** 2
        assert mse_loss(ad, W0, b) == pytest.approx(total / b.size, abs=1e-12 * total)

    def test_zero_residual(self):
        task = gen_task(8, 8, 1, 1, 1, 0)
        M = delta_target(task, 0, 0)
        ad = new_plain(8, 8, 2, make_rng(0))
        U, s, Vt = np.linalg.svd(M)
        ad = PlainLoraAdapter(8, 8, 2, U[:, :2] * s[:2], Vt[:2])
        b = sample_batch(task, 0, 0, 5, make_rng(1))
        assert mse_loss(ad, task.W0, b) <= 1e-16 * frobenius_norm(b.X) ** 2
        g = grad_plain(ad, task.W0, b)
        assert frobenius_norm(g.dW_up) <= 1e-10 and frobenius_norm(g.dW_down) <= 1e-10

    def test_joint_weights(self):
        ad, W0, b = small_case(2)
        _, _, b2 = small_case(3)
        assert loss_joint(ad, W0, b, b2, (1.0, 0.0)) == mse_loss(ad, W0, b)
        assert loss_joint(ad, W0, b, b, (1.0, 1.0)) == 2 * mse_loss(ad, W0, b)
        assert loss_joint(ad, W0, b, b2) == mse_loss(ad, W0, b) + mse_loss(ad, W0, b2)

    def test_mcp(self):
        ad, W0, b = small_case(4)
        aux = [small_case(s)[2] for s in (5, 6, 7)]
        assert loss_mcp(ad, W0, b, [aux[0], aux[0]]) == mse_loss(ad, W0, b) + mse_loss(ad, W0, aux[0])
        hand = mse_loss(ad, W0, b) + (mse_loss(ad, W0, aux[0]) + mse_loss(ad, W0, aux[1]) + mse_loss(ad, W0, aux[2])) / 3
        assert loss_mcp(ad, W0, b, aux) == pytest.approx(hand, rel=1e-12)
        with pytest.raises(ValueError):
            loss_mcp(ad, W0, b, [])

    @pytest.mark.parametrize("seed", range(20))
    def test_mcp_single_partner_equals_joint(self, seed):
        ad, W0, b = small_case(seed)
        _, _, b2 = small_case(seed + 100)
        assert loss_mcp(ad, W0, b, [b2]) == loss_joint(ad, W0, b, b2, (1.0, 1.0))


class TestGradients:
    @pytest.mark.parametrize("seed", range(4))
    def test_plp_both(self, seed):
        ad, W0, b = small_case(seed)
        g = grad_plp(ad, W0, b, "both")
        assert_fd_close(g.dB, fd_grad(lambda B: mse_loss(ad.with_trainable(B, ad.D), W0, b), ad.B))
        assert_fd_close(g.dD, fd_grad(lambda D: mse_loss(ad.with_trainable(ad.B, D), W0, b), ad.D))

    def test_routes_mask(self):
        ad, W0, b = small_case(0)
        full = grad_plp(ad, W0, b, "both")
        gb, gd = grad_plp(ad, W0, b, "B-only"), grad_plp(ad, W0, b, "D-only")
        assert np.all(gb.dD == 0) and np.all(gd.dB == 0)
        assert gb.dB.tobytes() == full.dB.tobytes() and gd.dD.tobytes() == full.dD.tobytes()
        with pytest.raises(ValueError):
            grad_plp(ad, W0, b, "A-only")

    def test_plain(self):
        rng = make_rng(3)
        ad = PlainLoraAdapter(8, 6, 3, gaussian(8, 3, rng), gaussian(3, 6, rng))
        W0 = gaussian(8, 6, rng)
        b = Batch(gaussian(6, 4, rng), gaussian(8, 4, rng), None, None)
        g = grad_plain(ad, W0, b)
        up = fd_grad(lambda U: mse_loss(PlainLoraAdapter(8, 6, 3, U, ad.W_down), W0, b), ad.W_up)
        down = fd_grad(lambda V: mse_loss(PlainLoraAdapter(8, 6, 3, ad.W_up, V), W0, b), ad.W_down)
        assert_fd_close(g.dW_up, up)
        assert_fd_close(g.dW_down, down)

    def test_plain_up_gradient_zero_when_down_zero(self):
        ad = new_plain(8, 6, 3, make_rng(0))
        _, W0, b = small_case(0, n=6)
        assert np.all(grad_plain(ad, W0, b).dW_up == 0)

    def test_stationary_at_planted_optimum(self):
        task = gen_task(16, 16, 1, 1, 2, 3)
        ad = new_plp(16, 16, 4, 8)
        fit = fit_plp(delta_target(task, 0, 0), ad.A, ad.C)
        ad = ad.with_trainable(*fit.factors)
        # with Z = I the sample loss equals the operator loss, whose gradient vanishes at the optimum
        b = batch_from_inputs(task, 0, 0, np.eye(16))
        g = grad_plp(ad, task.W0, b, "both")
        assert frobenius_norm(g.dB) <= 1e-10 * frobenius_norm(b.X) and frobenius_norm(g.dD) <= 1e-10 * frobenius_norm(b.X)


class TestOptimizer:
    def test_sgd(self):
        assert np.array_equal(Sgd(0.5).step("x", np.ones(2), np.ones(2)), np.full(2, 0.5))

    def test_momentum_accumulates(self):
        opt = Sgd(1.0, 0.5)
        p = opt.step("x", np.zeros(1), np.ones(1))
        p = opt.step("x", p, np.ones(1))
        assert p[0] == -1.0 - 1.5


@pytest.fixture(scope="module")
def smoke_task():
    return gen_task(32, 32, 1, 3, 2, 42)


SMALL = TrainConfig(steps=30, n_aux_styles=2, n_aux_contents=1)


class TestProcedures:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(n_aux_styles=0)
        TrainConfig(routing="one-to-one", n_aux_styles=0)

    def test_one_step_moves_b_only_frozen_untouched(self, smoke_task):
        ad, _ = train_content(smoke_task, 0, replace(SMALL, steps=1))
        fresh = new_plp(32, 32, 8, 16, EXACT, 7, "zero-D", make_rng(42, 10))
        assert not np.array_equal(ad.B, fresh.B)
        A, C = frozen_blocks(16, 8, EXACT, 7)
        assert ad.A.tobytes() == A.tobytes() and ad.C.tobytes() == C.tobytes()

    def test_tags(self, smoke_task):
        assert train_content(smoke_task, 0, SMALL)[0].tag == "content:0"
        assert train_style(smoke_task, 2, SMALL)[0].tag == "style:2"

    def test_not_enough_partners(self, smoke_task):
        with pytest.raises(ValueError, match="distinct"):
            train_content(smoke_task, 0, replace(SMALL, n_aux_styles=4))
        with pytest.raises(ValueError):
            train_style(smoke_task, 0, replace(SMALL, n_aux_contents=2))

    def test_bad_ids(self, smoke_task):
        with pytest.raises(IndexError):
            train_content(smoke_task, 1, SMALL)
        with pytest.raises(IndexError):
            train_style(smoke_task, 3, SMALL)

    def test_zero_block_every_step(self, smoke_task):
        for fn in (train_content, train_style):
            _, traces = fn(smoke_task, 0, SMALL)
            assert all(t.blocks["ul"] == 0.0 for t in traces)
            assert all(t.loss >= 0 for t in traces)

    def test_deterministic(self, smoke_task):
        a, _ = train_content(smoke_task, 0, SMALL)
        b, _ = train_content(smoke_task, 0, SMALL)
        assert a.B.tobytes() == b.B.tobytes() and a.D.tobytes() == b.D.tobytes()

    def test_one_to_one_has_no_aux_term(self, smoke_task):
        _, traces = train_content(smoke_task, 0, replace(SMALL, routing="one-to-one", partner_id=1))
        assert all(t.style_term is None for t in traces)
        _, traces = train_style(smoke_task, 0, replace(SMALL, routing="one-to-one", partner_id=0))
        assert all(t.content_term is None for t in traces)

    def test_routing_exclusivity_in_mcp(self, smoke_task):
        # with n_aux_styles aux batches routed to D only, a loss_weights=(1, 0) run never moves D
        ad, _ = train_content(smoke_task, 0, replace(SMALL, loss_weights=(1.0, 0.0)))
        assert np.all(ad.D == 0)
        ad, _ = train_content(smoke_task, 0, replace(SMALL, loss_weights=(0.0, 1.0)))
        fresh = new_plp(32, 32, 8, 16, EXACT, 7, "zero-D", make_rng(SMALL.seed, 10))
        assert ad.B.tobytes() == fresh.B.tobytes()

    def test_both_routing_differs(self, smoke_task):
        a, _ = train_content(smoke_task, 0, SMALL)
        b, _ = train_content(smoke_task, 0, replace(SMALL, routing="both"))
        assert not np.array_equal(a.B, b.B)

    def test_momentum_runs(self, smoke_task):
        ad, _ = train_content(smoke_task, 0, replace(SMALL, optimizer="sgd-momentum", lr=1e-3))
        plain, _ = train_content(smoke_task, 0, replace(SMALL, lr=1e-3))
        assert np.all(np.isfinite(ad.B)) and not np.array_equal(ad.B, plain.B)

    def test_joint_counts_and_alternation(self, smoke_task):
        cfg = replace(SMALL, lr=5e-3)
        plain, tr = train_joint(smoke_task, 0, 0, cfg)
        assert plain.trainable_count == 32 * 8 + 8 * 32
        assert all(t.content_term is not None and t.style_term is not None for t in tr)
        plp, _ = train_joint(smoke_task, 0, 0, cfg, "plp-both-routes")
        assert plp.trainable_count == 16 * 8 + 8 * 16
        assert block_profile(plp).norm_ul == 0.0

    def test_single_target(self, smoke_task):
        ad, tr = train_single(smoke_task, 0, None, replace(SMALL, steps=200))
        assert tr[-1].loss < 1e-3 * tr[0].loss

    def test_finetune(self, smoke_task):
        c, _ = train_content(smoke_task, 0, SMALL)
        s, _ = train_style(smoke_task, 0, SMALL)
        comb = make_adapter(break_adapter(c)[0], break_adapter(s)[1])
        same, tr = finetune_combined(comb, smoke_task, 0, 0, steps=0)
        assert same is comb and tr == []
        tuned, tr = finetune_combined(comb, smoke_task, 0, 0, steps=5)
        assert len(tr) == 5 and tuned.history[-1]["op"] == "finetune"
        assert tuned.A.tobytes() == comb.A.tobytes() and tuned.C.tobytes() == comb.C.tobytes()
        with pytest.warns(UserWarning, match="combined"):
            finetune_combined(c, smoke_task, 0, 0, steps=1)
        with pytest.raises(ValueError):
            finetune_combined(comb, smoke_task, 0, 0, steps=-1)


class TestTraces:
    def test_roundtrip(self, tmp_path, smoke_task):
        _, tr = train_content(smoke_task, 0, replace(SMALL, steps=3))
        write_trace(tr, tmp_path / "t.jsonl")
        assert read_trace(tmp_path / "t.jsonl") == tr

    @pytest.mark.parametrize("side", ["content", "style"])
    def test_golden_smoke_trace(self, side, smoke_task):
        cfg = TrainConfig(steps=200, lr=1e-2, seed=42, n_aux_styles=2, n_aux_contents=1)
        fn = train_content if side == "content" else train_style
        _, tr = fn(smoke_task, 0, cfg)
        golden = read_trace(GOLDEN / f"{side}_smoke_trace.jsonl")
        assert [json.loads(t.to_json()) for t in tr] == [json.loads(g.to_json()) for g in golden]

    @pytest.mark.parametrize("side", ["content", "style"])
    def test_smoke_trend(self, side):
        losses = np.array([t.loss for t in read_trace(GOLDEN / f"{side}_smoke_trace.jsonl")])
        # fresh batches each step make single-step changes noisy; the trend over windows is downward
        assert losses[-20:].mean() < losses[:20].mean()
