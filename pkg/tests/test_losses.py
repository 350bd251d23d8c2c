import math

import numpy as np
import pytest
import torch

from speechbridge.losses import (LossError, SimilarityMatrix, contrastive_loss,
                                 embedding_mse_loss, kl_margin_loss, masked_mse,
                                 mse_loss, phoneme_ce_loss, similarity_matrix,
                                 total_loss)

from helpers import (closed_form_kl, finite_difference_check, monte_carlo_kl,
                     naive_contrastive, naive_similarity)


def _sim(logits, tau=1.0, valid=None):
    return SimilarityMatrix(logits=torch.as_tensor(logits, dtype=torch.float64),
                            tau=tau,
                            valid=None if valid is None else torch.as_tensor(valid))


# ---------------------------------------------------------------------------
# similarity matrix
# ---------------------------------------------------------------------------

def test_similarity_identity_case():
    s = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    sim = similarity_matrix(s, s, tau=1.0, l2_normalize=False)
    assert torch.allclose(sim.logits, torch.eye(2, dtype=torch.float64))


def test_similarity_tau_linearity():
    s = torch.randn(1, 3, 4, dtype=torch.float64)
    p = torch.randn(1, 3, 4, dtype=torch.float64)
    one = similarity_matrix(s, p, tau=1.0, l2_normalize=False)
    two = similarity_matrix(s, p, tau=2.0, l2_normalize=False)
    assert torch.allclose(two.logits, 2.0 * one.logits)


def test_similarity_shape_is_bt_squared():
    s = torch.randn(2, 3, 4, dtype=torch.float64)
    sim = similarity_matrix(s, s, tau=1.0)
    assert sim.logits.shape == (6, 6)


def test_similarity_matches_naive_flattening():
    rng = np.random.default_rng(3)
    for l2 in (False, True):
        s = rng.standard_normal((2, 3, 4))
        p = rng.standard_normal((2, 3, 4))
        sim = similarity_matrix(torch.as_tensor(s), torch.as_tensor(p),
                                tau=1.7, l2_normalize=l2)
        expected = naive_similarity(s, p, 1.7, l2)
        np.testing.assert_allclose(sim.logits.numpy(), expected, atol=1e-12)


def test_similarity_rejects_bad_inputs():
    s = torch.randn(1, 2, 3)
    with pytest.raises(LossError):
        similarity_matrix(s, torch.randn(1, 3, 3), tau=1.0)
    with pytest.raises(LossError):
        similarity_matrix(s, s, tau=0.0)
    with pytest.raises(LossError):
        similarity_matrix(s, s, tau=1.0, valid_mask=torch.ones(2, 2, dtype=torch.bool))


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def test_contrastive_single_frame_is_zero():
    assert float(contrastive_loss(_sim([[3.7]]))) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_identity_2x2_analytic():
    # each softmax row/column is [e, 1]/(e+1); -log gives log(1+e^-1)
    expected = math.log(1.0 + math.exp(-1.0))
    value = float(contrastive_loss(_sim(np.eye(2))))
    assert value == pytest.approx(expected, abs=1e-9)


def test_contrastive_matches_naive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(30):
        b = int(rng.integers(1, 3))
        t = int(rng.integers(1, 5))
        d = int(rng.integers(2, 5))
        tau = float(rng.uniform(0.5, 3.0))
        l2 = bool(rng.integers(0, 2))
        s = rng.standard_normal((b, t, d))
        p = rng.standard_normal((b, t, d))
        valid = None
        if rng.integers(0, 2) and b * t > 1:
            valid = rng.integers(0, 2, size=(b, t)).astype(bool)
            valid.flat[int(rng.integers(0, b * t))] = True  # keep >= 1 frame
        sim = similarity_matrix(torch.as_tensor(s), torch.as_tensor(p), tau,
                                l2, None if valid is None else torch.as_tensor(valid))
        expected = naive_contrastive(naive_similarity(s, p, tau, l2),
                                     None if valid is None else valid.reshape(-1))
        assert float(contrastive_loss(sim)) == pytest.approx(expected, abs=1e-9)


def test_contrastive_symmetric_under_transpose():
    rng = np.random.default_rng(1)
    c = rng.standard_normal((5, 5))
    assert float(contrastive_loss(_sim(c))) == pytest.approx(
        float(contrastive_loss(_sim(c.T))), abs=1e-12)


def test_contrastive_invariant_under_joint_permutation():
    rng = np.random.default_rng(2)
    c = rng.standard_normal((6, 6))
    perm = rng.permutation(6)
    permuted = c[np.ix_(perm, perm)]
    assert float(contrastive_loss(_sim(permuted))) == pytest.approx(
        float(contrastive_loss(_sim(c))), abs=1e-12)


def test_contrastive_nonnegative_and_tau_monotone():
    rng = np.random.default_rng(4)
    s = torch.as_tensor(rng.standard_normal((1, 6, 8)))
    previous = None
    for tau in (1.0, 4.0, 16.0, 64.0):
        value = float(contrastive_loss(similarity_matrix(s, s, tau, l2_normalize=True)))
        assert value >= 0.0
        if previous is not None:
            assert value < previous
        previous = value


def test_contrastive_masked_frames_do_not_contribute():
    rng = np.random.default_rng(5)
    s = rng.standard_normal((1, 3, 4))
    p = rng.standard_normal((1, 3, 4))
    base = contrastive_loss(similarity_matrix(
        torch.as_tensor(s), torch.as_tensor(p), 1.0, True))
    s_pad = np.concatenate([s, 99.0 * np.ones((1, 2, 4))], axis=1)
    p_pad = np.concatenate([p, -99.0 * np.ones((1, 2, 4))], axis=1)
    valid = torch.tensor([[True, True, True, False, False]])
    padded = contrastive_loss(similarity_matrix(
        torch.as_tensor(s_pad), torch.as_tensor(p_pad), 1.0, True, valid))
    assert float(padded) == pytest.approx(float(base), abs=1e-12)


def test_contrastive_rejects_all_masked():
    with pytest.raises(LossError):
        contrastive_loss(_sim(np.eye(2), valid=[False, False]))


# ---------------------------------------------------------------------------
# reconstruction / kl / ablation losses
# ---------------------------------------------------------------------------

def test_mse_loss_cases():
    gt = torch.randn(1, 5, 40, dtype=torch.float64)
    assert float(mse_loss(gt, gt, gt)) == 0.0
    assert float(mse_loss(gt + 1.0, gt, gt)) == pytest.approx(0.5, abs=1e-12)
    a, b = torch.randn_like(gt), torch.randn_like(gt)
    assert float(mse_loss(a, b, gt)) == pytest.approx(float(mse_loss(b, a, gt)), abs=1e-12)
    with pytest.raises(LossError):
        mse_loss(gt[:, :3], gt, gt)


def test_masked_mse_ignores_padding():
    gt = torch.randn(2, 4, 40, dtype=torch.float64)
    pred = gt + 1.0
    valid = torch.tensor([[True, True, False, False], [True, False, False, False]])
    wrecked = pred.clone()
    wrecked[~valid] = 1e6
    assert float(masked_mse(wrecked, gt, valid)) == pytest.approx(1.0, abs=1e-9)


def test_kl_margin_analytic_values():
    zero = kl_margin_loss(torch.zeros(3, dtype=torch.float64),
                          torch.ones(3, dtype=torch.float64), margin=0.7)
    assert float(zero) == 0.0
    half = kl_margin_loss(torch.tensor([1.0], dtype=torch.float64),
                          torch.tensor([1.0], dtype=torch.float64), margin=0.0)
    assert float(half) == pytest.approx(0.5, abs=1e-12)
    hinged = kl_margin_loss(torch.tensor([1.0], dtype=torch.float64),
                            torch.tensor([1.0], dtype=torch.float64), margin=1.0)
    assert float(hinged) == 0.0


def test_kl_matches_closed_form_loop():
    rng = np.random.default_rng(6)
    mu = rng.uniform(-1.5, 1.5, size=5)
    sigma = rng.uniform(0.3, 2.0, size=5)
    value = kl_margin_loss(torch.as_tensor(mu), torch.as_tensor(sigma), margin=0.0)
    assert float(value) == pytest.approx(closed_form_kl(mu, sigma), abs=1e-12)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(8)
    mu = rng.uniform(-1.0, 1.0, size=3)
    sigma = rng.uniform(0.5, 1.5, size=3)
    analytic = float(kl_margin_loss(torch.as_tensor(mu), torch.as_tensor(sigma), 0.0))
    estimate = monte_carlo_kl(mu, sigma, n=1_000_000, seed=1)
    assert analytic == pytest.approx(estimate, abs=1e-2)


def test_kl_rejects_bad_sigma():
    with pytest.raises(LossError):
        kl_margin_loss(torch.zeros(2), torch.tensor([1.0, 0.0]), margin=0.0)


def test_embedding_mse_cases():
    s = torch.randn(1, 4, 8, dtype=torch.float64)
    assert float(embedding_mse_loss(s, s)) == 0.0
    assert float(embedding_mse_loss(s, s + 1.0)) == pytest.approx(1.0, abs=1e-12)
    p = torch.randn_like(s)
    assert float(embedding_mse_loss(s, p)) == pytest.approx(
        float(embedding_mse_loss(p, s)), abs=1e-12)


def test_phoneme_ce_cases():
    uniform = torch.zeros(3, 4, dtype=torch.float64)
    targets = torch.tensor([0, 1, 2])
    assert float(phoneme_ce_loss(uniform, targets)) == pytest.approx(math.log(4.0), abs=1e-12)

    saturated = torch.full((2, 5), -10.0, dtype=torch.float64)
    saturated[0, 1] = 10.0
    saturated[1, 3] = 10.0
    assert float(phoneme_ce_loss(saturated, torch.tensor([1, 3]))) < 1e-4

    tied = torch.zeros(1, 2, dtype=torch.float64)
    assert float(phoneme_ce_loss(tied, torch.tensor([0]))) == pytest.approx(math.log(2.0), abs=1e-12)

    with pytest.raises(LossError):
        phoneme_ce_loss(uniform, torch.tensor([0, 1, 4]))


# ---------------------------------------------------------------------------
# totals
# ---------------------------------------------------------------------------

def test_total_loss_variants():
    bd = total_loss("full", contrastive=1.0, mse=2.0, kl=3.0)
    assert bd.total == 6.0
    nd = total_loss("no_decoder", contrastive=1.5)
    assert nd.total == 1.5 and nd.mse is None
    em = total_loss("plus_embed_mse", contrastive=1.0, mse=1.0, kl=1.0, embed_mse=0.25)
    assert em.total == 3.25
    pd = total_loss("plus_phoneme_decoder", contrastive=1.0, mse=1.0, kl=1.0, phoneme_ce=0.5)
    assert pd.total == 3.5
    zero = total_loss("full", contrastive=0.0, mse=0.0, kl=0.0)
    assert zero.total == 0.0


def test_total_loss_exact_sum_with_tensors():
    parts = [torch.tensor(v, dtype=torch.float64) for v in (0.1, 0.2, 0.3)]
    bd = total_loss("full", contrastive=parts[0], mse=parts[1], kl=parts[2])
    assert float(bd.total) == float(parts[0] + parts[1] + parts[2])


def test_total_loss_validates_components():
    with pytest.raises(LossError):
        total_loss("full", contrastive=1.0, mse=None, kl=1.0)
    with pytest.raises(LossError):
        total_loss("no_decoder", contrastive=1.0, mse=1.0)
    with pytest.raises(LossError):
        total_loss("bogus", contrastive=1.0)


# ---------------------------------------------------------------------------
# loss gradients vs central differences
# ---------------------------------------------------------------------------

def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    s = torch.tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    p = torch.tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    log_tau = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    valid = torch.tensor([[True, True, False], [True, True, True]])

    def contrastive():
        return contrastive_loss(similarity_matrix(s, p, log_tau.exp(), True, valid))

    checked, failed, worst = finite_difference_check(contrastive, [s, p, log_tau])
    assert failed == 0, f"{failed}/{checked} gradient entries off (worst {worst:.2e})"

    mu = torch.tensor(rng.uniform(-1, 1, size=4), requires_grad=True)
    sigma = torch.tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)

    def kl():
        return kl_margin_loss(mu, sigma, margin=0.1)

    checked, failed, worst = finite_difference_check(kl, [mu, sigma])
    assert failed == 0, f"kl gradients off (worst {worst:.2e})"

    pred_s = torch.tensor(rng.standard_normal((1, 4, 40)), requires_grad=True)
    pred_p = torch.tensor(rng.standard_normal((1, 4, 40)), requires_grad=True)
    gt = torch.tensor(rng.standard_normal((1, 4, 40)))
    vmask = torch.tensor([[True, True, True, False]])

    def rec():
        return mse_loss(pred_s, pred_p, gt, vmask)

    checked, failed, worst = finite_difference_check(
        rec, [pred_s, pred_p], max_entries=60, rng=rng)
    assert failed == 0, f"mse gradients off (worst {worst:.2e})"

    logits = torch.tensor(rng.standard_normal((5, 6)), requires_grad=True)
    targets = torch.tensor([0, 2, 1, 5, 3])

    def ce():
        return phoneme_ce_loss(logits, targets)

    checked, failed, worst = finite_difference_check(ce, [logits])
    assert failed == 0, f"ce gradients off (worst {worst:.2e})"
