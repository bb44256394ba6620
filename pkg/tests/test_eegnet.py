import numpy as np
import pytest

from gradcheck import SMALL_CONFIG, model_grad_check
from oracles import grad_error, numerical_gradient, rel_error
from wordaad.eegnet import EegNetConfig, EEGNetClassifier, build_model, forward, param_count
from wordaad.nn import BatchNorm, FusedFrontEnd, decode_checkpoint, encode_checkpoint, lagged_moments
from wordaad.nn.layers import same_padding
from wordaad.rng import RngStream


@pytest.fixture(scope="module")
def model():
    return build_model(rng=RngStream(0, "init"))


def _batch(n, seed=0, cfg=EegNetConfig()):
    return np.random.default_rng(seed).normal(scale=10, size=(n, 1, cfg.C, cfg.T)).astype(np.float32)


# structure --------------------------------------------------------------------------------------------

def test_param_counts(model):
    assert param_count(model, "trainable") == 2705
    assert param_count(model, "+buffers") == 2817


def test_param_breakdown(model):
    sizes = [int(p.size) for p in model.params().values()]
    assert sizes == [1024, 8, 8, 512, 16, 16, 256, 512, 32, 32, 288, 1]


def test_count_grows_with_f1():
    assert param_count(build_model(EegNetConfig(F1=16))) > 2705


def test_unknown_convention(model):
    with pytest.raises(ValueError):
        param_count(model, "everything")


def test_block_shapes(model):
    shapes = dict((name, s) for name, s in model.block_shapes())
    seq = [s for _, s in model.block_shapes()]
    assert seq[5][1:] == (16, 1, 76)
    assert seq[10][1:] == (32, 1, 9)
    assert shapes["flatten"][1:] == (288,)


def test_too_short_input():
    with pytest.raises(ValueError):
        build_model(EegNetConfig(T=20))


def test_constraints_hold_at_init(model):
    dw = model.layers[2].params["weight"].reshape(16, -1)
    assert np.all(np.linalg.norm(dw, axis=1) <= 1.0 + 1e-6)
    assert np.linalg.norm(model.layers[-1].params["weight"]) <= 0.25 + 1e-6


# forward -------------------------------------------------------------------------------------------------

def test_single_probability(model):
    p = forward(model, _batch(1))
    assert p.shape == (1,) and 0 < p[0] < 1


def test_eval_deterministic_and_duplicates(model):
    x = _batch(3)
    x[2] = x[0]
    p = forward(model, x)
    assert p[0] == p[2]
    assert np.array_equal(p, forward(model, x))


def test_batch_size_invariance(model):
    x = _batch(64, seed=1)
    batch = forward(model, x)
    alone = np.array([forward(model, x[i:i + 1])[0] for i in range(0, 64, 7)])
    assert np.max(np.abs(batch[::7] - alone)) <= 1e-6


def test_wrong_shape(model):
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, 1, 31, 307), np.float32))
    with pytest.raises(ValueError):
        forward(model, _batch(1), mode="predict")


def test_init_deterministic():
    a = build_model(rng=RngStream(5, "i")).state()
    b = build_model(rng=RngStream(5, "i")).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_dropout_free_forward_is_pure():
    cfg = EegNetConfig(dropout_p=0.0)
    m = build_model(cfg, RngStream(1, "i"))
    x = _batch(4)
    a = forward(m, x, mode="train")
    m2 = build_model(cfg, RngStream(1, "i"))
    assert np.array_equal(a, forward(m2, x, mode="train"))


# fused execution ------------------------------------------------------------------------------------------

@pytest.mark.parametrize("training", [False, True])
def test_fused_matches_unfused(training):
    fused = build_model(rng=RngStream(2, "i")).astype(np.float64)
    plain = build_model(rng=RngStream(2, "i"), fused=False).astype(np.float64)
    x = _batch(8, 3).astype(np.float64)
    fused.set_dropout_rng(RngStream(0, "d"))
    plain.set_dropout_rng(RngStream(0, "d"))
    pf = fused.forward(x, training)
    pp = plain.forward(x, training)
    assert np.allclose(pf, pp, rtol=1e-9, atol=1e-12)
    if training:
        fused.zero_grad()
        plain.zero_grad()
        g = np.random.default_rng(0).normal(size=pf.shape)
        fused.backward(g)
        plain.backward(g)
        for k, v in plain.grads().items():
            assert grad_error(fused.grads()[k], v, atol=1e-9) <= 1e-7, k
        for k, v in plain.buffers().items():
            assert np.allclose(fused.buffers()[k], v, rtol=1e-9)


def test_fused_has_no_input_gradient():
    m = build_model()
    m.set_dropout_rng(RngStream(0, "d"))
    m.forward(_batch(2), True)
    with pytest.raises(RuntimeError):
        m.backward_input(np.ones(2))


def test_lagged_moments_oracle():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4, 20))
    k = 6
    left, right = same_padding(k)
    xp = np.pad(x0, ((0, 0), (0, 0), (left, right)))
    windows = np.stack([xp[..., j:j + 20] for j in range(k)], axis=-1).reshape(-1, k)
    m, G = lagged_moments(x0, k)
    assert np.allclose(m, windows.mean(axis=0))
    assert np.allclose(G, windows.T @ windows / len(windows))


def test_fused_front_end_gradient_fd():
    rng = np.random.default_rng(4)
    m = build_model(SMALL_CONFIG, RngStream(4, "i"), fused=False).astype(np.float64)
    front = FusedFrontEnd(*m.layers[:3])
    bn = m.layers[1]
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 2)
    x = rng.normal(size=(3, 1, 3, 12))
    proj = rng.normal(size=front.forward(x, True).shape)

    def f():
        return float(np.sum(front.forward(x, True) * proj))

    f()
    for layer in m.layers[:3]:
        layer.zero_grad()
    front.backward(proj)
    for layer in m.layers[:3]:
        for name, p in layer.params.items():
            assert rel_error(layer.grads[name].copy(), numerical_gradient(f, p)) <= 1e-5


def test_fused_rejects_mismatched_layers():
    m = build_model(fused=False)
    with pytest.raises(ValueError):
        FusedFrontEnd(m.layers[0], BatchNorm(3), m.layers[2])


# assembled gradients ------------------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("fused", [True, False])
def test_model_gradient_train_mode(seed, fused):
    worst, errors = model_grad_check(seed, fused)
    assert worst <= 1e-3, errors


@pytest.mark.parametrize("seed", range(3))
def test_model_gradient_eval_mode(seed):
    worst, errors = model_grad_check(seed, fused=False, training=False)
    assert worst <= 1e-4, errors


# checkpoints -------------------------------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(model):
    blob = encode_checkpoint(model.state(), config=model.cfg.to_dict())
    state, adam, config, _ = decode_checkpoint(blob)
    assert adam is None and config["F1"] == 8
    for k, v in model.state().items():
        assert state[k].tobytes() == v.tobytes()
    other = build_model(rng=RngStream(99, "i"))
    other.load_state(state)
    x = _batch(2)
    assert np.array_equal(forward(other, x), forward(model, x))


# estimator -----------------------------------------------------------------------------------------------------

def test_classifier_fit_predict():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 4, 64)).astype(np.float32)
    y = np.arange(40) % 2
    X[y == 1, :, 20:30] += 3.0
    clf = EEGNetClassifier(K1=8, F2=8, K2=4, epochs=3, batch_size=8, lr=1e-3, random_state=1)
    clf.fit(X, y)
    proba = clf.predict_proba(X)
    assert proba.shape == (40, 2) and np.allclose(proba.sum(axis=1), 1)
    assert set(clf.predict(X)) <= {0, 1}
    assert 0.0 <= clf.score(X, y) <= 1.0
    assert np.all(np.isfinite(clf.decision_function(X)))
