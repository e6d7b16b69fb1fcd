import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoupleseg.errors import DimensionError
from decoupleseg.gradsuite import SUITE
from decoupleseg.supervision import (
    IGNORE_INDEX,
    LossConfig,
    align_labels,
    balanced_bce,
    body_label_relaxation,
    body_relaxation_ce,
    edge_gt_from_labels,
    edge_prior_ohem_ce,
    mean_ce,
    ohem_budget,
    total_loss,
)
from oracles import edge_gt_oracle, ohem_oracle


def ce_oracle(logits, label):
    z = logits - logits.max()
    return -(z[label] - math.log(np.exp(z).sum()))


def half_half():
    lab = np.zeros((1, 4, 4), dtype=np.uint8)
    lab[:, :, 2:] = 1
    return lab


def posterior_logits(p_true, k=2):
    # two-class logits whose softmax puts p_true on class 0
    z = np.zeros((1, k) + p_true.shape)
    z[0, 0] = np.log(p_true)
    z[0, 1] = np.log1p(-p_true)
    return z


class TestEdgeGT:
    def test_uniform(self):
        assert not edge_gt_from_labels(np.full((1, 8, 8), 3, np.uint8), 2).any()

    def test_half_half(self):
        m = edge_gt_from_labels(half_half(), 1)[0, 0]
        assert m.shape == (4, 4)
        assert np.array_equal(m, np.tile([0, 1, 1, 0], (4, 1)))

    def test_checkerboard(self):
        lab = (np.indices((6, 6)).sum(0) % 2).astype(np.uint8)
        assert edge_gt_from_labels(lab, 1).all()

    def test_ignore_neither_edge_nor_trigger(self):
        lab = np.zeros((5, 5), np.uint8)
        lab[2, 2] = IGNORE_INDEX
        m = edge_gt_from_labels(lab, 1)[0, 0]
        assert not m.any()

    def test_radius_validation(self):
        with pytest.raises(ValueError):
            edge_gt_from_labels(half_half(), 0)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_bruteforce(self, seed):
        r = np.random.default_rng(seed)
        lab = r.integers(0, 3, (9, 11)).astype(np.uint8)
        lab[r.random(lab.shape) < 0.1] = IGNORE_INDEX
        radius = int(r.integers(1, 4))
        assert np.array_equal(edge_gt_from_labels(lab, radius)[0, 0], edge_gt_oracle(lab, radius))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.permutations(list(range(4))))
    def test_relabel_invariance(self, seed, perm):
        lab = np.random.default_rng(seed).integers(0, 4, (10, 10)).astype(np.uint8)
        relabel = np.asarray(perm, np.uint8)[lab]
        assert np.array_equal(edge_gt_from_labels(lab, 2), edge_gt_from_labels(relabel, 2))


class TestBodyRelaxation:
    def test_perfect_logits(self):
        lab = half_half()
        z = np.where(np.arange(2)[None, :, None, None] == lab[:, None], 20.0, 0.0)
        loss, _, empty = body_relaxation_ce(z, lab, edge_gt_from_labels(lab, 1))
        assert loss < 1e-6 and not empty

    def test_uniform_logits(self, rng):
        lab = rng.integers(0, 4, (1, 8, 8)).astype(np.uint8)
        loss, _, _ = body_relaxation_ce(np.zeros((1, 4, 8, 8)), lab, edge_gt_from_labels(lab, 1))
        if loss:
            assert loss == pytest.approx(math.log(4))
        loss, _, _ = body_relaxation_ce(np.zeros((1, 4, 8, 8)), lab, np.zeros((1, 1, 8, 8)))
        assert loss == pytest.approx(math.log(4))

    def test_half_half_averages_eight_interior_pixels(self, rng):
        lab = half_half()
        z = rng.standard_normal((1, 2, 4, 4))
        edge = edge_gt_from_labels(lab, 1)
        loss, grad, _ = body_relaxation_ce(z, lab, edge)
        picked = [(y, x) for y in range(4) for x in (0, 3)]
        expect = sum(ce_oracle(z[0, :, y, x], lab[0, y, x]) for y, x in picked) / 8
        assert loss == pytest.approx(expect, rel=1e-12)
        assert not grad[0, :, :, 1:3].any()

    def test_empty_mask_equals_plain_ce(self, rng):
        lab = rng.integers(0, 3, (2, 6, 6)).astype(np.uint8)
        z = rng.standard_normal((2, 3, 6, 6))
        a, ga, _ = body_relaxation_ce(z, lab, np.zeros((2, 1, 6, 6), np.uint8))
        b, gb, _ = mean_ce(z, lab)
        assert a == b and np.array_equal(ga, gb)

    def test_all_band_flags_empty(self):
        lab = (np.indices((4, 4)).sum(0) % 2).astype(np.uint8)[None]
        loss, grad, empty = body_relaxation_ce(np.zeros((1, 2, 4, 4)), lab, edge_gt_from_labels(lab, 1))
        assert empty and loss == 0.0 and not grad.any()

    def test_label_relaxation_mode(self, rng):
        lab = half_half()
        z = rng.standard_normal((1, 2, 4, 4))
        loss, grad, _ = body_label_relaxation(z, lab, 1)
        # interior columns allow only their own class, band columns allow both
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        terms = [-np.log(p[0, lab[0, y, x], y, x]) if x in (0, 3) else 0.0
                 for y in range(4) for x in range(4)]
        assert loss == pytest.approx(sum(terms) / 16, rel=1e-12)
        eps = 1e-6
        z2 = z.copy()
        z2[0, 0, 1, 0] += eps
        num = (body_label_relaxation(z2, lab, 1)[0] - loss) / eps
        assert grad[0, 0, 1, 0] == pytest.approx(num, rel=1e-4)


class TestBalancedBCE:
    def test_confident(self):
        gt = np.zeros((1, 1, 4, 4), np.uint8)
        gt[..., 0, :3] = 1
        loss, _ = balanced_bce(np.where(gt > 0, 20.0, -20.0), gt)
        assert loss < 1e-6

    def test_zero_logits_ln2_bruteforce(self):
        gt = np.zeros((1, 1, 4, 4), np.uint8)
        gt[0, 0, [0, 1, 3], [2, 0, 3]] = 1
        loss, _ = balanced_bce(np.zeros((1, 1, 4, 4)), gt)
        n, npos = 16, 3
        total = 0.0
        for y in gt.ravel():
            w = n / (2 * npos) if y else n / (2 * (n - npos))
            total += w * math.log(2)
        assert total / n == pytest.approx(math.log(2), rel=1e-12)
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    @pytest.mark.parametrize("npos", [1, 5, 15])
    def test_ln2_any_imbalance(self, npos):
        gt = np.zeros((1, 1, 4, 4), np.uint8)
        gt.reshape(-1)[:npos] = 1
        assert balanced_bce(np.zeros(gt.shape), gt)[0] == pytest.approx(math.log(2))

    def test_negative_only(self, rng):
        z = rng.standard_normal((1, 1, 4, 4))
        loss, _ = balanced_bce(z, np.zeros(z.shape, np.uint8))
        assert loss == pytest.approx(np.mean(np.log1p(np.exp(z))))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            balanced_bce(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))

    def test_gradient(self, rng):
        z = rng.standard_normal((1, 1, 5, 5))
        gt = (rng.random(z.shape) < 0.3).astype(np.uint8)
        loss, g = balanced_bce(z, gt)
        eps = 1e-6
        num = np.zeros_like(z)
        for i in range(z.size):
            zp = z.copy()
            zp.flat[i] += eps
            zm = z.copy()
            zm.flat[i] -= eps
            num.flat[i] = (balanced_bce(zp, gt)[0] - balanced_bce(zm, gt)[0]) / (2 * eps)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)


class TestOHEM:
    def test_gate_removes_everything(self, rng):
        z = rng.standard_normal((1, 3, 4, 4))
        lab = rng.integers(0, 3, (1, 4, 4)).astype(np.uint8)
        loss, m, grad = edge_prior_ohem_ce(z, lab, np.full((1, 1, 4, 4), -5.0), LossConfig())
        assert loss == 0.0 and m == 0 and not grad.any()

    def test_eight_candidates_k3(self):
        p = np.array([[0.9, 0.8, 0.7, 0.6], [0.5, 0.4, 0.3, 0.2]])
        s = posterior_logits(p)
        lab = np.zeros((1, 2, 4), np.uint8)
        cfg = LossConfig(k_ratio=3 / 8)
        loss, m, _, chosen = edge_prior_ohem_ce(s, lab, np.full((1, 1, 2, 4), 5.0), cfg, True)
        assert m == 3
        assert np.array_equal(np.sort(p[chosen[0]]), [0.2, 0.3, 0.4])
        assert loss == pytest.approx(-(math.log(0.2) + math.log(0.3) + math.log(0.4)) / 3, rel=1e-12)

    def test_saturation_equals_mean_ce(self, rng):
        z = rng.standard_normal((1, 3, 6, 6))
        lab = rng.integers(0, 3, (1, 6, 6)).astype(np.uint8)
        b = np.full((1, 1, 6, 6), -5.0)
        b[0, 0, 2:4] = 5.0
        loss, m, grad = edge_prior_ohem_ce(z, lab, b, LossConfig(k_ratio=1.0))
        mask = (b[:, 0] > 0)
        ref, gref, _ = mean_ce(z, lab, mask)
        assert m == 12
        assert loss == pytest.approx(ref, rel=1e-12)
        np.testing.assert_allclose(grad, gref, rtol=1e-12)

    def test_strict_k_normalisation(self):
        p = np.array([[0.9, 0.8, 0.7, 0.6]])
        s = posterior_logits(p)
        lab = np.zeros((1, 1, 4), np.uint8)
        b = np.array([[[[5.0, 5.0, -5.0, -5.0]]]])
        sel, _, _ = edge_prior_ohem_ce(s, lab, b, LossConfig(k_ratio=1.0))
        strict, _, _ = edge_prior_ohem_ce(s, lab, b, LossConfig(k_ratio=1.0, ohem_norm="k"))
        assert strict == pytest.approx(sel * 2 / 4)

    def test_tie_break_by_index(self):
        s = np.zeros((1, 2, 2, 3))
        lab = np.zeros((1, 2, 3), np.uint8)
        _, m, _, chosen = edge_prior_ohem_ce(s, lab, np.ones((1, 1, 2, 3)) * 5, LossConfig(k_ratio=2 / 6), True)
        assert m == 2 and np.array_equal(np.flatnonzero(chosen), [0, 1])

    def test_no_gradient_to_edge_logits(self, rng):
        z = rng.standard_normal((1, 3, 6, 6))
        lab = rng.integers(0, 3, (1, 6, 6)).astype(np.uint8)
        out = SimpleNamespace(s_final=z, b_logit=rng.standard_normal((1, 1, 6, 6)) + 2)
        cfg = LossConfig(lambda_bce=0.0)
        _, grads = total_loss(out, lab, cfg)
        assert "b_logit" not in grads

    def test_budget(self):
        assert ohem_budget(40, 0.1) == 4
        assert ohem_budget(45, 0.1) == 5
        assert ohem_budget(3, 0.1) == 1

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_sort_oracle(self, seed):
        r = np.random.default_rng(seed)
        z = r.standard_normal((2, 4, 16, 16)) * 2
        lab = r.integers(0, 4, (2, 16, 16)).astype(np.uint8)
        lab[r.random(lab.shape) < 0.05] = IGNORE_INDEX
        b = r.standard_normal((2, 1, 16, 16)) * 2
        cfg = LossConfig(k_ratio=float(r.uniform(0.02, 0.6)), t_b=float(r.uniform(0.3, 0.95)))
        loss, m, _, chosen = edge_prior_ohem_ce(z, lab, b, cfg, True)
        ref, sel = ohem_oracle(z, lab, b, cfg.k_ratio, cfg.t_b)
        assert np.array_equal(chosen, sel)
        assert m == sel.sum()
        assert loss == pytest.approx(ref, rel=1e-12, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.3, 0.9), st.floats(0.01, 0.09))
    def test_candidates_monotone_in_threshold(self, seed, t_b, dt):
        r = np.random.default_rng(seed)
        z = r.standard_normal((1, 3, 8, 8))
        lab = r.integers(0, 3, (1, 8, 8)).astype(np.uint8)
        b = r.standard_normal((1, 1, 8, 8)) * 2
        hi = LossConfig(k_ratio=1.0, t_b=t_b)
        lo = LossConfig(k_ratio=1.0, t_b=t_b - dt)
        assert edge_prior_ohem_ce(z, lab, b, lo)[1] >= edge_prior_ohem_ce(z, lab, b, hi)[1]

    def test_invariant_to_unselected_perturbation(self, rng):
        z = rng.standard_normal((1, 3, 8, 8))
        lab = rng.integers(0, 3, (1, 8, 8)).astype(np.uint8)
        b = rng.standard_normal((1, 1, 8, 8)) * 2
        cfg = LossConfig(k_ratio=0.1, t_b=0.5)
        loss, m, _, chosen = edge_prior_ohem_ce(z, lab, b, cfg, True)
        z2 = z.copy()
        gated_out = (1 / (1 + np.exp(-b[:, 0])) <= cfg.t_b)[:, None]
        z2 += rng.standard_normal(z.shape) * gated_out
        loss2, m2, _, chosen2 = edge_prior_ohem_ce(z2, lab, b, cfg, True)
        assert np.array_equal(chosen, chosen2) and loss == loss2 and m == m2

    def test_inverse_freq_weights(self):
        lab = np.zeros((1, 2, 4), np.uint8)
        lab[0, 0, 0] = 1
        s = np.zeros((1, 2, 2, 4))
        cfg = LossConfig(k_ratio=1.0, weight_mode="inverse_freq")
        loss, m, _ = edge_prior_ohem_ce(s, lab, np.full((1, 1, 2, 4), 5.0), cfg)
        # class 1 weight 8/(2*1)=4, class 0 weight 8/(2*7)
        expect = (4 + 7 * 8 / 14) * math.log(2) / 8
        assert m == 8 and loss == pytest.approx(expect)


class TestTotalLoss:
    def make_out(self, rng, n=2, k=3, h=8, w=8):
        return SimpleNamespace(s_final=rng.standard_normal((n, k, h, w)),
                               s_body=rng.standard_normal((n, k, h, w)),
                               b_logit=rng.standard_normal((n, 1, h, w)) * 2)

    def test_plain_segmentation(self, rng):
        out = self.make_out(rng)
        lab = rng.integers(0, 3, (2, 8, 8)).astype(np.uint8)
        br, grads = total_loss(out, lab, LossConfig(lambda_body=0, lambda_edge=0))
        assert br.total == br.l_final == mean_ce(out.s_final, lab)[0]
        assert set(grads) == {"s_final"}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.lists(st.floats(0, 30), min_size=5, max_size=5),
           st.sampled_from(["exclude", "relax"]))
    def test_reconstruction(self, seed, lams, mode):
        r = np.random.default_rng(seed)
        out = self.make_out(r)
        lab = r.integers(0, 3, (2, 8, 8)).astype(np.uint8)
        cfg = LossConfig(*lams, body_mode=mode)
        br, _ = total_loss(out, lab, cfg)
        parts = (cfg.lambda_body * br.l_body
                 + cfg.lambda_edge * (cfg.lambda_bce * br.l_bce + cfg.lambda_edge_ce * br.l_edge_ce)
                 + cfg.lambda_final * br.l_final)
        assert abs(br.total - parts) <= 1e-6

    def test_labels_resampled(self, rng):
        out = self.make_out(rng, h=4, w=4)
        lab = np.repeat(np.repeat(rng.integers(0, 3, (2, 4, 4)), 2, 1), 2, 2).astype(np.uint8)
        a, _ = total_loss(out, lab, LossConfig())
        b, _ = total_loss(out, align_labels(lab, 4, 4), LossConfig())
        assert a == b

    def test_config_validation(self):
        for bad in (dict(k_ratio=0), dict(t_b=1.0), dict(weight_mode="x"), dict(ohem_norm="y"),
                    dict(body_mode="z"), dict(relax_radius=0)):
            with pytest.raises(ValueError):
                LossConfig(**bad)

    @pytest.mark.parametrize("seed", range(3))
    def test_full_chain_gradcheck(self, seed):
        assert SUITE["total_loss"](seed).passed
