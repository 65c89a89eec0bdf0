import math

import numpy as np
import pytest

from pumpwatch.anomaly_transformer import (
    AnomalyTransformer,
    AnomTransConfig,
    association_discrepancy,
    max_phase_loss,
    min_phase_loss,
    prior_association,
    series_association,
)
from pumpwatch.clstm import CLSTM, CLstmConfig, clstm_loss
from pumpwatch.errors import LabelOutOfRange, NonFiniteLoss, NonPositiveSigma, SegmentTooShort, ShapeMismatch
from pumpwatch.nn import Adam, Checkpoint, Tensor, count_params, grad_check, load_checkpoint, save_checkpoint
from pumpwatch.nn.gradcheck import numeric_grad, relative_error

SMALL_CLSTM = CLstmConfig(conv_out=4, lstm_hidden=5)
# short sequences keep the frozen checks fast; prior entries below the 1e-12 log clamp stay
# flat under perturbation, so the clamp does not break the difference quotient
SMALL_AT = AnomTransConfig(seq_len=4, d_model=8, n_heads=2, d_ff=8, n_layers=2, lam=0.5)


# --- C-LSTM -------------------------------------------------------------------

def test_clstm_default_parameter_count():
    m = CLSTM()
    conv = 350 * 15 * 3 + 350
    lstm = 4 * (350 * 350 + 350 * 350 + 350)
    head = 350 + 1
    assert conv + lstm + head == 997_851
    assert count_params(m) == 997_851


def test_clstm_shapes_and_range(rng):
    m = CLSTM(SMALL_CLSTM, rng=rng)
    p = m.predict(rng.normal(size=(7, 15, 15)))
    assert p.shape == (7,)
    assert np.all((p > 0) & (p < 1))
    assert m.sequence_lengths(15) == (13, 12)


def test_clstm_minimum_segment(rng):
    m = CLSTM(SMALL_CLSTM, rng=rng)
    m.predict(rng.normal(size=(2, 4, 15)))
    with pytest.raises(SegmentTooShort):
        m.predict(rng.normal(size=(2, 3, 15)))


def test_clstm_loss_rejects_soft_labels():
    with pytest.raises(LabelOutOfRange):
        clstm_loss(np.array([0.3]), np.array([0.5]))


def test_clstm_gradcheck_one_seed(rng):
    m = CLSTM(SMALL_CLSTM, rng=rng)
    x = rng.normal(size=(3, 8, 15))
    err = grad_check(lambda: clstm_loss(m.forward(x), np.array([0.0, 1.0, 1.0])), m.parameters())
    assert err < 1e-4


def test_clstm_train_step_reduces_loss(rng):
    m = CLSTM(SMALL_CLSTM, rng=rng)
    x = rng.normal(size=(16, 6, 15))
    y = (x[:, -1, 0] > 0).astype(float)
    opt = Adam(m.parameters(), lr=1e-2)
    first = m.train_step(x, y, opt)
    for _ in range(30):
        last = m.train_step(x, y, opt)
    assert last < first


def test_nonfinite_loss_is_reported(rng):
    m = CLSTM(SMALL_CLSTM, rng=rng)
    x = np.full((2, 6, 15), np.nan)
    with pytest.raises(NonFiniteLoss) as info:
        m.train_step(x, np.array([0.0, 1.0]), Adam(m.parameters()), batch_index=3)
    assert info.value.batch_index == 3


# --- associations -------------------------------------------------------------

def prior_loops(sigma):
    n = len(sigma)
    out = np.empty((n, n))
    for i in range(n):
        row = [math.exp(-((j - i) ** 2) / (2 * sigma[i] ** 2)) / (math.sqrt(2 * math.pi) * sigma[i]) for j in range(n)]
        total = sum(row)
        out[i] = [r / total for r in row]
    return out


def test_prior_matches_gaussian_oracle(rng):
    sigma = rng.uniform(0.3, 4.0, size=9)
    np.testing.assert_allclose(prior_association(sigma).data, prior_loops(sigma), rtol=1e-12, atol=1e-15)


def test_prior_small_cases():
    assert prior_association(np.array([1.0])).data.tolist() == [[1.0]]
    row0 = prior_association(np.array([1.0, 1.0])).data[0]
    np.testing.assert_allclose(row0, [1 / (1 + np.exp(-0.5)), np.exp(-0.5) / (1 + np.exp(-0.5))], rtol=1e-12)
    assert round(row0[0], 4) == 0.6225


def test_prior_rejects_nonpositive_sigma():
    with pytest.raises(NonPositiveSigma):
        prior_association(np.array([1.0, 0.0, 2.0]))


def test_series_association_is_scaled_softmax(rng):
    q, k = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    s = q @ k.T / 2.0
    expect = np.exp(s - s.max(1, keepdims=True))
    expect /= expect.sum(1, keepdims=True)
    np.testing.assert_allclose(series_association(q, k).data, expect, rtol=1e-12)


def test_series_association_shape_check(rng):
    with pytest.raises(ShapeMismatch):
        series_association(rng.normal(size=(5, 4)), rng.normal(size=(5, 3)))


def test_ad_properties(rng):
    P = [prior_association(rng.uniform(0.5, 3, size=(2, 6))) for _ in range(3)]
    S = [series_association(rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 4))) for _ in range(3)]
    ad = association_discrepancy(P, S).data
    assert ad.shape == (2, 6)
    assert np.all(ad >= 0)
    np.testing.assert_array_equal(association_discrepancy(P, P).data, 0.0)
    np.testing.assert_allclose(ad, association_discrepancy(S, P).data, atol=1e-12, rtol=0)


def test_ad_layer_mismatch():
    with pytest.raises(ShapeMismatch):
        association_discrepancy([np.eye(3)], [])


# --- Anomaly Transformer ------------------------------------------------------

def test_at_parameter_count_by_hand():
    d, ff, h, L = 64, 128, 4, 4
    per_layer = (d * d + d) * 3 + d * d + (d * h + h) + (d * ff + ff) + (ff * d + d) + 4 * d
    expected = (15 * d + d) + L * per_layer + 2 * d + (d + 1)
    assert count_params(AnomalyTransformer()) == expected == 135_889


def test_at_outputs(rng):
    a = AnomalyTransformer(SMALL_AT, rng=rng)
    probs, P, S = a.forward(rng.normal(size=(3, 4, 15)))
    assert probs.shape == (3,)
    assert len(P) == len(S) == 2
    assert P[0].shape == S[0].shape == (3, 2, 4, 4)
    np.testing.assert_allclose(P[1].data.sum(-1), 1.0, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        a.forward(rng.normal(size=(3, 5, 15)))


def test_at_config_validation():
    with pytest.raises(ValueError):
        AnomTransConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        AnomTransConfig(lam=0)


def frozen_check(model, x, y, phase):
    """Backprop through the phase loss vs central differences of the same loss
    with the stopped side replaced by constants taken at the base point.

    Each coordinate is scored against two stencils: Richardson at 1e-3, where
    gradients near 1e-8 survive round-off, and plain 1e-5, narrow enough to
    miss a ReLU kink the wide one straddles. A wrong analytic gradient fails both."""
    probs, P, S = model.forward_all(x)
    P0 = [Tensor(p.data.copy()) for p in P]
    S0 = [Tensor(s.data.copy()) for s in S]
    loss = min_phase_loss if phase == "min" else max_phase_loss

    def frozen():
        pr, P, S = model.forward_all(x)
        if phase == "min":
            return loss(pr[:, -1], y, P, S0, model.config.lam)
        return loss(pr[:, -1], y, P0, S, model.config.lam)

    model.zero_grad()
    pr, P, S = model.forward_all(x)
    loss(pr[:, -1], y, P, S, model.config.lam).backward()
    worst = 0.0
    for p in model.parameters().values():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        err = relative_error(g, numeric_grad(frozen, p, eps=1e-3, richardson=True)).reshape(-1)
        retry = np.flatnonzero(err >= 1e-4)
        if retry.size:
            narrow = relative_error(g, numeric_grad(frozen, p, eps=1e-5, coords=retry)).reshape(-1)
            err[retry] = np.minimum(err[retry], narrow[retry])
        worst = max(worst, float(err.max()))
    return worst


@pytest.mark.parametrize("phase", ["min", "max"])
def test_at_gradcheck_one_seed(rng, phase):
    a = AnomalyTransformer(SMALL_AT, rng=rng)
    x = rng.normal(size=(3, 4, 15))
    assert frozen_check(a, x, np.array([0.0, 1.0, 1.0]), phase) < 1e-4


def test_stop_gradient_phases(rng):
    a = AnomalyTransformer(SMALL_AT, rng=rng)
    x = rng.normal(size=(4, 4, 15))
    y = np.array([0.0, 1.0, 0.0, 1.0])
    grads = {}
    for name in ("min", "max"):
        a.zero_grad()
        (a.min_loss if name == "min" else a.max_loss)(x, y).backward()
        grads[name] = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in a.parameters().items()}
    # the prior only enters through the AD term; in the max phase its side is stopped
    assert np.all(grads["max"]["layers.0.sigma.weight"] == 0)
    assert np.any(grads["min"]["layers.0.sigma.weight"] != 0)
    # the head only reaches the loss through the MSE term, which both phases share
    np.testing.assert_allclose(grads["min"]["head.weight"], grads["max"]["head.weight"], rtol=1e-12)


def test_at_train_step_two_updates(rng):
    a = AnomalyTransformer(SMALL_AT, rng=rng)
    x = rng.normal(size=(4, 4, 15))
    y = np.array([0.0, 1.0, 0.0, 1.0])
    before = a.state_dict()
    opt = Adam(a.parameters(), lr=1e-3)
    lmin, lmax = a.train_step(x, y, opt)
    assert opt.t == 2
    assert lmax < lmin  # max phase subtracts the discrepancy term
    assert any(not np.array_equal(before[k], v) for k, v in a.state_dict().items())


def test_at_mse_all_positions(rng):
    cfg = AnomTransConfig(seq_len=4, d_model=8, n_heads=2, d_ff=8, n_layers=1, mse_mode="all")
    a = AnomalyTransformer(cfg, rng=rng)
    x = rng.normal(size=(2, 4, 15))
    y = np.array([[0, 0, 1, 1], [0, 0, 0, 0]], dtype=float)
    assert np.isfinite(float(a.min_loss(x, y).data))


# --- checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("cls,cfg", [(CLSTM, SMALL_CLSTM), (AnomalyTransformer, SMALL_AT)])
def test_checkpoint_round_trip(tmp_path, rng, cls, cfg):
    m = cls(cfg, rng=rng)
    ck = Checkpoint(m.name, cfg.as_dict(), m.state_dict(), "abc", 3, 11, {"threshold": 0.4})
    back = load_checkpoint(save_checkpoint(tmp_path / "m.npz", ck))
    assert (back.model, back.config_hash, back.epoch, back.seed, back.extra) == (m.name, "abc", 3, 11, {"threshold": 0.4})
    m2 = cls(type(cfg)(**back.model_config), rng=np.random.default_rng(99))
    m2.load_state_dict(back.params)
    x = rng.normal(size=(2, 4, 15))
    np.testing.assert_array_equal(m.predict(x), m2.predict(x))
