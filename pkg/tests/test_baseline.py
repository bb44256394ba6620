import numpy as np
import pytest

from wordaad.baseline import (LAMBDA_GRID, N_LAGS, WINDOW_SAMPLES, EnvelopeDecoder, LinearDecoder, SingularSystemError,
                              classify_window, correlation, cut_windows, decode_decoder, decide, encode_decoder,
                              extract_envelope, lag_matrix, normalise_windows, train_decoder)
from wordaad.synth import synth_envelope_dataset


@pytest.fixture(scope="module")
def planted():
    trials = synth_envelope_dataset(1, 16, 60.0, 20.0, 0)
    return cut_windows(trials[:12]), cut_windows(trials[12:])


# envelope extraction -----------------------------------------------------------------------------------------

FS = 8000.0
T = np.arange(int(4 * FS)) / FS


def _core(x):
    cut = len(x) // 8
    return x[cut:-cut]


def test_constant_tone_gives_flat_envelope():
    env = _core(extract_envelope(np.sin(2 * np.pi * 440 * T), FS))
    assert env.std() / env.mean() < 0.05


def test_am_tone_tracks_modulator():
    mod = 1 + 0.5 * np.sin(2 * np.pi * 2 * T)
    env = extract_envelope(mod * np.sin(2 * np.pi * 1000 * T), FS)
    mod64 = 1 + 0.5 * np.sin(2 * np.pi * 2 * np.arange(len(env)) / 64.0)
    assert correlation(_core(env), _core(mod64)) > 0.95


def test_zero_signal():
    assert np.all(extract_envelope(np.zeros(len(T)), FS) == 0)


def test_envelope_errors():
    with pytest.raises(ValueError):
        extract_envelope(np.ones(100), 100.0)
    with pytest.raises(ValueError):
        extract_envelope(np.ones(50), FS)


# decoder training --------------------------------------------------------------------------------------------

def test_lag_matrix_oracle():
    eeg = np.random.default_rng(0).normal(size=(3, 10))
    X = lag_matrix(eeg, 4)
    for t in range(10):
        for c in range(3):
            for tau in range(4):
                expected = eeg[c, t + tau] if t + tau < 10 else 0.0
                assert X[t, c * 4 + tau] == expected


def test_planted_decoder_recovery():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, N_LAGS))
    eeg = rng.normal(size=(40, 4, WINDOW_SAMPLES))
    env = np.stack([LinearDecoder(w, 0.0).reconstruct(x) for x in eeg])
    dec = train_decoder(eeg[:30], env[:30], 1e-6)
    assert correlation(dec.weights.ravel(), w.ravel()) > 0.999
    assert min(correlation(dec.reconstruct(x), e) for x, e in zip(eeg[30:], env[30:])) > 0.99


def test_reconstruction_on_envelope_driven_eeg(planted):
    (X, a, _), (Xt, at, _) = planted
    dec = EnvelopeDecoder(lam=1e-2).fit(X, a)
    assert dec.score(Xt, normalise_windows(at)) >= 0.9


def test_shrinkage_monotone(planted):
    (X, a, _), _ = planted
    norms = [np.linalg.norm(train_decoder(X[:100], a[:100], lam).weights) for lam in (0.01, 0.1, 1, 10, 100, 1e4)]
    assert all(b <= a_ + 1e-12 for a_, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.01 * norms[0]


def test_duplicated_data_identical_decoder(planted):
    (X, a, _), _ = planted
    one = train_decoder(X[:50], a[:50], 0.1)
    two = train_decoder(np.concatenate([X[:50]] * 2), np.concatenate([a[:50]] * 2), 0.1)
    assert np.allclose(one.weights, two.weights, rtol=1e-9, atol=1e-12)


def test_scaling_equivariance(planted):
    (X, a, _), (Xt, at, ut) = planted
    base = train_decoder(X[:80], a[:80], 0.1)
    scaled = train_decoder(3.0 * X[:80], a[:80], 0.1)
    assert np.allclose(scaled.weights, base.weights / 3.0, rtol=1e-8, atol=1e-12)
    for x, e1, e2 in zip(Xt[:20], at[:20], ut[:20]):
        assert classify_window(base, x, e1, e2).label == classify_window(scaled, 3.0 * x, e1, e2).label


def test_singular_system_reported():
    rng = np.random.default_rng(0)
    eeg = rng.normal(size=(20, 2, WINDOW_SAMPLES))
    eeg[:, 1] = eeg[:, 0]
    with pytest.raises(SingularSystemError):
        train_decoder(eeg, rng.normal(size=(20, WINDOW_SAMPLES)), 0.0)


def test_too_few_samples():
    with pytest.raises(ValueError):
        train_decoder(np.zeros((1, 32, 10)), np.zeros((1, 10)), 1.0)
    with pytest.raises(ValueError):
        LinearDecoder(np.zeros((2, 3)), -1.0)


def test_best_lambda_is_interior():
    trials = synth_envelope_dataset(1, 13, 60.0, -10.0, 0)
    X, a, _ = cut_windows(trials[:10])
    Xv, av, _ = cut_windows(trials[10:])
    dec = EnvelopeDecoder(lam="auto").fit(X, a, validation_data=(Xv, av))
    assert LAMBDA_GRID[0] < dec.lam_ < LAMBDA_GRID[-1]


# classification -----------------------------------------------------------------------------------------------

def test_perfect_reconstruction_picks_attended():
    rng = np.random.default_rng(0)
    att, un = rng.uniform(size=77), rng.uniform(size=77)
    d = decide(att, att, un)
    assert d.label == 1 and d.corr1 == pytest.approx(1.0) and not d.tie
    assert decide(att, un, att).label == 0


def test_tie_goes_to_stream_one():
    env = np.random.default_rng(0).uniform(size=77)
    d = decide(env, env, env.copy())
    assert d.label == 1 and d.tie


def test_window_normalisation_irrelevant():
    rng = np.random.default_rng(2)
    rec, e1, e2 = rng.normal(size=(3, 77))
    assert decide(rec, e1, e2).label == decide(rec, 5 * e1 + 3, 0.1 * e2 - 7).label


def test_zero_variance_envelope():
    with pytest.raises(ValueError):
        decide(np.ones(77), np.ones(77), np.arange(77.0))


def test_window_length_mismatch():
    dec = LinearDecoder(np.ones((2, 3)), 0.0)
    with pytest.raises(ValueError):
        classify_window(dec, np.zeros((2, 77)), np.ones(77), np.ones(76))


def test_cut_windows_count():
    trials = synth_envelope_dataset(1, 2, 10.0, 20.0, 0)
    X, a, u = cut_windows(trials)
    assert X.shape == (2 * (640 // 77), 32, 77) and a.shape == u.shape == (len(X), 77)


def test_classifies_planted_set(planted):
    (X, a, _), (Xt, at, ut) = planted
    dec = EnvelopeDecoder(lam=1e-2).fit(X, a)
    assert np.mean(dec.classify(Xt, at, ut)) >= 0.9


# serialisation --------------------------------------------------------------------------------------------------

def test_decoder_checkpoint_roundtrip():
    dec = LinearDecoder(np.random.default_rng(0).normal(size=(32, 17)).astype(np.float32).astype(np.float64), 0.1)
    back = decode_decoder(encode_decoder(dec))
    assert np.array_equal(back.weights, dec.weights) and back.lam == 0.1 and back.n_lags == 17


def test_decode_rejects_other_checkpoints():
    from wordaad.nn import encode_checkpoint
    with pytest.raises(ValueError):
        decode_decoder(encode_checkpoint({"w": np.zeros(3)}, config={"kind": "eegnet"}))
