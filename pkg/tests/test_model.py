import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from zigzag.errors import InputError, TrainingError
from zigzag.kernels import StreamingConfig
from zigzag.model import (
    HEAD,
    LAYER,
    AlphaMatrix,
    ModelConfig,
    ToyTransformer,
    TrainSample,
    alpha_gradient,
    classify_heads,
    distill_loss,
    loss_and_gradient,
    loss_csv,
    reg_loss,
    train_alphas,
)

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=8, vocab=16, seed=3)
TOKENS = [1, 5, 9, 2, 7]

# tests/oracles.py forward(), SMALL model, TOKENS
FULL_HIDDEN = np.array([
    [0.14900707917491507, 0.36739900590084473, 1.8438210398109312, -0.3658246386552711,
     -1.052114600240413, -1.1180576578070167, -1.3972121402504871, -0.0104637627775372],
    [0.8625292154313531, -0.9348206956731252, 1.0840234304060181, -1.2963390433117996,
     -1.2514676372167646, -0.9067695983847069, 0.9869071399433161, 0.4051667208676852],
    [0.2820636598833907, -1.3791115108206058, -0.8005369519567845, -0.22281970658344152,
     1.0274980512626724, -0.27926586424372135, -0.1003049584779478, -2.045526593840681],
    [-0.26860473783579125, 0.3914733294447211, -0.3808085187047985, -1.8799351568735212,
     0.7127226536983544, 1.7074850116732698, 0.2943294480051484, 0.7650604535449795],
    [0.06143583474652276, -1.5881754385732283, -0.825183905680279, 0.7928221589189139,
     -0.28506315276658584, 0.3150173058096048, -1.6165298048789143, -1.1707916290920592],
])
# same oracle, checkerboard alpha [[1, 0], [0, 1]], A=1, W=2 (rows 0-2 unaffected by the mask)
CHECKER_TAIL = np.array([
    [-0.25280536846589496, 0.40149051509138384, -0.3393728000400433, -1.8715663001379483,
     0.718075017524523, 1.7158702300855178, 0.2808886962072669, 0.7862676960444697],
    [0.10363205509125503, -1.3784670396980907, -0.44137895041926234, 0.8800486504189884,
     -0.1752430060890478, 0.08904298257492954, -1.6708147907467719, -1.5131155861422052],
])


@pytest.fixture(scope="module")
def small():
    return ToyTransformer(SMALL)


def test_forward_full_matches_frozen_oracle(small):
    np.testing.assert_allclose(small.forward_full(TOKENS), FULL_HIDDEN, atol=1e-12)


def test_forward_mixed_checkerboard(small):
    alpha = AlphaMatrix([[1.0, 0.0], [0.0, 1.0]])
    out = small.forward_mixed(TOKENS, alpha, StreamingConfig(1, 2))
    np.testing.assert_allclose(out[:3], FULL_HIDDEN[:3], atol=1e-12)
    np.testing.assert_allclose(out[3:], CHECKER_TAIL, atol=1e-12)


def test_forward_is_deterministic(small):
    again = ToyTransformer(SMALL)
    np.testing.assert_array_equal(small.forward_full(TOKENS), again.forward_full(TOKENS))


def test_all_ones_mixed_equals_full(small):
    out = small.forward_mixed(TOKENS, AlphaMatrix.ones(2, 2), StreamingConfig(1, 1))
    np.testing.assert_array_equal(out, small.forward_full(TOKENS))


def test_degenerate_window_mixed_equals_full(small):
    out = small.forward_mixed(TOKENS, AlphaMatrix(np.zeros((2, 2))), StreamingConfig(2, 3))
    np.testing.assert_allclose(out, small.forward_full(TOKENS), atol=1e-12)


def test_rejects_bad_tokens_and_shapes(small):
    with pytest.raises(InputError):
        small.forward_full([0, 16])
    with pytest.raises(InputError):
        small.forward_mixed(TOKENS, AlphaMatrix.ones(3, 2), StreamingConfig())
    with pytest.raises(InputError):
        ModelConfig(d_model=10, n_heads=4)


def test_distill_loss_cases():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 5, 8))
    assert distill_loss(a, a, 3) == 0.0
    assert distill_loss(a, a + 0.5, 4) == pytest.approx(4 * 0.25, abs=1e-15)
    assert distill_loss(a, b, 2) == pytest.approx(1.9702525992120112, abs=1e-14)
    assert distill_loss(a, b, 2) == pytest.approx(oracles.distill(a, b, 2), abs=1e-14)
    with pytest.raises(InputError):
        distill_loss(a, b, 6)


def test_reg_loss():
    assert reg_loss(AlphaMatrix.ones(4, 4)) == 16.0
    assert reg_loss(AlphaMatrix(np.zeros((3, 2)))) == 0.0
    vals = np.random.default_rng(2).uniform(size=(3, 5))
    assert reg_loss(AlphaMatrix(vals)) == pytest.approx(sum(sum(row) for row in vals.tolist()), abs=1e-14)


def test_loss_breakdown_total_is_additive(small):
    sample = TrainSample([1, 2, 3, 4, 5, 6, 7, 8], 3)
    lb, _ = loss_and_gradient(small, sample, np.full((2, 2), 0.3), StreamingConfig(1, 2), 0.7)
    assert lb.total == lb.dist + 0.7 * lb.reg


def test_gradient_is_lambda_when_streaming_equals_full(small):
    sample = TrainSample([1, 2, 3, 4, 5], 2)
    g = alpha_gradient(small, sample, np.full((2, 2), 0.4), StreamingConfig(2, 4), 0.05)
    np.testing.assert_allclose(g, 0.05, atol=1e-15)


def central_difference(model, sample, alpha, cfg, lam, eps=1e-5):
    fd = np.zeros_like(alpha)
    for idx in np.ndindex(alpha.shape):
        up, down = alpha.copy(), alpha.copy()
        up[idx] += eps
        down[idx] -= eps
        f_up = loss_and_gradient(model, sample, up, cfg, lam)[0].total
        f_down = loss_and_gradient(model, sample, down, cfg, lam)[0].total
        fd[idx] = (f_up - f_down) / (2 * eps)
    return fd


def test_single_head_gradient_matches_finite_difference():
    model = ToyTransformer(ModelConfig(1, 1, 4, 8, seed=9))
    sample = TrainSample([1, 3, 5, 7, 2, 4, 6, 0], 3)
    alpha = np.array([[0.6]])
    g = alpha_gradient(model, sample, alpha, StreamingConfig(1, 2), 0.0)
    fd = central_difference(model, sample, alpha, StreamingConfig(1, 2), 0.0)
    np.testing.assert_allclose(g, fd, rtol=1e-4)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 2), st.integers(3, 8), st.integers(0, 2**31))
def test_gradient_property(L, H, T, seed):
    model = ToyTransformer(ModelConfig(L, H, 4 * H, 12, seed=seed))
    rng = np.random.default_rng(seed)
    sample = TrainSample(rng.integers(0, 12, T), int(rng.integers(1, T + 1)))
    alpha = rng.uniform(0.05, 0.95, (L, H))
    cfg = StreamingConfig(1, 1)
    g = alpha_gradient(model, sample, alpha, cfg, 0.05)
    fd = central_difference(model, sample, alpha, cfg, 0.05)
    np.testing.assert_allclose(g, fd, rtol=1e-4)


def test_gradient_vanishes_at_dist_minimum():
    model = ToyTransformer(ModelConfig(2, 2, 8, 16, seed=4))
    sample = TrainSample(np.arange(8) % 16, 3)
    cfg = StreamingConfig(1, 2)
    res = train_alphas(model, [sample], cfg, lam=0.0, lr=0.5, steps=300,
                       init=AlphaMatrix(np.full((2, 2), 0.3)))
    g = alpha_gradient(model, sample, res.alpha, cfg, 0.0)
    assert np.linalg.norm(g) < 1e-6
    assert res.history[-1][1].dist < 1e-12


def test_train_zero_steps_returns_ones(small):
    res = train_alphas(small, [TrainSample(TOKENS, 2)], StreamingConfig(1, 1), steps=0)
    np.testing.assert_array_equal(res.alpha.values, np.ones((2, 2)))
    assert len(res.history) == 1


def test_strong_regularization_drives_alpha_down(small):
    res = train_alphas(small, [TrainSample(TOKENS, 2)], StreamingConfig(1, 1), lam=10.0, lr=1e-3, steps=20)
    assert res.alpha.granularity == HEAD
    means = []
    alpha = np.ones((2, 2))
    for _ in range(5):
        step = train_alphas(small, [TrainSample(TOKENS, 2)], StreamingConfig(1, 1), lam=10.0, lr=1e-3,
                            steps=1, init=AlphaMatrix(alpha))
        alpha = step.alpha.values
        means.append(alpha.mean())
    assert all(b < a for a, b in zip([1.0] + means, means))


@pytest.fixture(scope="module")
def toy_run():
    model = ToyTransformer(ModelConfig(2, 4, 16, 32, seed=1))
    rng = np.random.default_rng(0)
    data = [TrainSample(rng.integers(0, 32, 24), 4) for _ in range(3)]
    return train_alphas(model, data, StreamingConfig(2, 4), lam=0.05, lr=0.5, steps=200)


def test_toy_run_lowers_total_loss_and_clamps(toy_run):
    first, last = toy_run.history[0][1], toy_run.history[-1][1]
    assert last.total < first.total
    assert 0.0 <= toy_run.alpha.values.min() and toy_run.alpha.values.max() <= 1.0
    assert len(toy_run.history) == 201


def test_layer_granularity_rows_constant(small):
    rng = np.random.default_rng(3)
    data = [TrainSample(rng.integers(0, 16, 10), 3) for _ in range(2)]
    init = AlphaMatrix.from_layers([0.0, 1.0], 2)
    res = train_alphas(small, data, StreamingConfig(1, 2), lr=0.5, steps=30, granularity=LAYER, init=init)
    assert res.alpha.granularity == LAYER
    np.testing.assert_array_equal(res.alpha.values, res.alpha.values[:, :1].repeat(2, axis=1))
    dists = [lb.dist for _, lb in res.history]
    assert dists[-1] <= dists[0]


def test_training_divergence_names_step(small, monkeypatch):
    import zigzag.model as mod

    real = mod.dataset_loss_and_gradient
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        lb, g = real(*args, **kwargs)
        if calls["n"] == 3:
            return mod.LossBreakdown(float("nan"), lb.reg, lb.lam), g
        return lb, g

    monkeypatch.setattr(mod, "dataset_loss_and_gradient", flaky)
    with pytest.raises(TrainingError) as err:
        train_alphas(small, [TrainSample(TOKENS, 2)], StreamingConfig(1, 1), steps=5)
    assert err.value.step == 2


def test_classify_heads_examples():
    alpha = AlphaMatrix([[0.9, 0.1], [0.8, 0.2]])
    assert classify_heads(alpha, 0.0).sum() == 0
    assert classify_heads(alpha, 1.0).all()
    assert np.argwhere(classify_heads(alpha, 0.5)).tolist() == [[0, 1], [1, 1]]


def test_classify_ties_prefer_lower_index():
    labels = classify_heads(np.full((2, 3), 0.5), 0.5)
    assert np.argwhere(labels).tolist() == [[0, 0], [0, 1], [0, 2]]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0, 1), st.integers(0, 2**31))
def test_classify_count(L, H, s, seed):
    alpha = np.random.default_rng(seed).uniform(size=(L, H))
    labels = classify_heads(alpha, s)
    assert labels.sum() == int(np.floor(s * L * H + 1e-9))
    if 0 < labels.sum() < L * H:
        assert alpha[labels].max() <= alpha[~labels].min()


def test_alpha_file_round_trip(tmp_path):
    a = AlphaMatrix(np.random.default_rng(8).uniform(size=(3, 4)))
    a.save(tmp_path / "a.txt")
    b = AlphaMatrix.load(tmp_path / "a.txt")
    np.testing.assert_array_equal(a.values, b.values)
    assert (tmp_path / "a.txt").read_text().splitlines()[0] == "3 4 head"
    lay = AlphaMatrix.from_layers([0.25, 1.0], 3)
    assert AlphaMatrix.from_text(lay.to_text()).granularity == LAYER


@pytest.mark.parametrize("text", ["", "2 2 head\n0.1 0.2\n", "1 1 head\n1.5\n", "1 2 layer\n0.1 0.2\n"])
def test_alpha_file_rejects_malformed(text):
    with pytest.raises(InputError):
        AlphaMatrix.from_text(text)


def test_loss_csv_format(toy_run):
    lines = loss_csv(toy_run.history[:2]).splitlines()
    assert lines[0] == "step,dist,reg,total"
    assert lines[1].startswith("0,0.0,8.0,")
