import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wordaad.augment import (AugmentedSet, AugmentedView, DegenerateTemplateError, ErpTemplate,
                             build_augmented_corpus, draw_variation, estimate_template, gain_factor,
                             simulate_attended, upsample_by_averaging, vary_erp)
from wordaad.data import N_CHANNELS, N_TIMES, EpochSet, Label, Origin, make_uid
from wordaad.rng import RngStream
from wordaad.synth import ErpShape, gen_erp_waveform, random_topography, synth_dataset, synth_subject


def _const_set(values, subject=1, paradigm=1, label=0):
    n = len(values)
    data = np.ones((n, N_CHANNELS, N_TIMES), np.float32) * np.asarray(values, np.float32)[:, None, None]
    return EpochSet(data, np.full(n, subject), np.full(n, paradigm), np.zeros(n), np.full(n, label),
                    uid=[make_uid(subject, paradigm, i) for i in range(n)])


def _half_sine_template(latency=0.45, width=0.3):
    wave = gen_erp_waveform(ErpShape(latency, width, 4.0, random_topography(RngStream(0, "t"))))
    return estimate_template(wave[None])


@pytest.fixture(scope="module")
def small_original():
    return synth_dataset(2, 3.0, master_seed=0, counts={1: (6, 20), 2: (5, 12), 3: (7, 30)})


@pytest.fixture(scope="module")
def small_corpus(small_original):
    return build_augmented_corpus(small_original, RngStream(0, "augment"))


# upsampling ------------------------------------------------------------------------------------

def test_single_epoch_duplicated():
    src = _const_set([2.5])
    out = upsample_by_averaging(src, 3, RngStream(0, "u"), k_max=1)
    assert len(out) == 3
    assert np.all(out.data == src.data[0])
    assert set(out.origin.tolist()) == {int(Origin.UPSAMPLED_AVG)}


def test_two_epoch_mean():
    out = upsample_by_averaging(_const_set([2.0, 4.0]), 200, RngStream(0, "u"), k_max=2)
    k = (out.sources != 0).sum(axis=1)
    assert np.all(out.data[k == 2] == 3.0)
    assert set(np.unique(out.data[k == 1]).tolist()) <= {2.0, 4.0}
    assert (k == 2).any() and (k == 1).any()


def test_average_uses_distinct_sources():
    out = upsample_by_averaging(_const_set(np.arange(10.0)), 500, RngStream(1, "u"))
    for row in out.sources:
        used = row[row != 0]
        assert len(set(used.tolist())) == len(used)
    k = (out.sources != 0).sum(axis=1)
    assert set(k.tolist()) == {1, 2, 3}


def test_class_smaller_than_kmax():
    with pytest.raises(ValueError):
        upsample_by_averaging(_const_set([1.0, 2.0]), 4, RngStream(0, "u"), k_max=3)


def test_mixed_classes_rejected():
    s = EpochSet.concat([_const_set([1, 2, 3], label=0), _const_set([1, 2, 3], label=1)])
    with pytest.raises(ValueError):
        upsample_by_averaging(s, 4, RngStream(0, "u"))


# templates ---------------------------------------------------------------------------------------

def test_template_of_single_epoch():
    s = synth_subject(1, 1, (1, 3), 6.0, RngStream(0, "s")).select(label=1)
    t = estimate_template(s)
    assert np.array_equal(t.waveform, s.data[0])
    assert 0.0 <= t.peak_latency_s <= 1.0
    assert t.source_uids == frozenset(s.uid.tolist())


def test_template_peak_latency_at_6db():
    s = synth_subject(1, 1, (60, 260), 6.0, RngStream(0, "s"))
    t = estimate_template(s.select(label=1), s.select(label=0))
    assert abs(t.peak_latency_s - s.info["erp_latency_s"]) <= 0.030


def test_cancelling_epochs_degenerate():
    x = np.random.default_rng(0).normal(size=(N_CHANNELS, N_TIMES))
    with pytest.raises(DegenerateTemplateError):
        estimate_template(np.stack([x, -x]))


def test_empty_template_input():
    with pytest.raises(ValueError):
        estimate_template(np.zeros((0, N_CHANNELS, N_TIMES)))


# variation -------------------------------------------------------------------------------------------

def test_identity_variation():
    t = _half_sine_template()
    lo, hi = t.segment_s
    out = vary_erp(t, None, width_s=hi - lo, shift_s=0.0)
    assert np.allclose(out, t.waveform, atol=1e-5)


def test_stretch_doubles_support():
    t = _half_sine_template(latency=0.4, width=0.3)
    out = vary_erp(t, None, width_s=0.6, shift_s=0.0)
    before = np.count_nonzero(np.abs(t.waveform).max(axis=0) > 1e-6)
    after = np.count_nonzero(np.abs(out).max(axis=0) > 1e-6)
    assert abs(after - 2 * before) <= 2


def test_shift_moves_peak():
    t = _half_sine_template()
    lo, hi = t.segment_s
    out = vary_erp(t, None, width_s=hi - lo, shift_s=0.05)
    moved = np.argmax(np.abs(out).max(axis=0)) - np.argmax(np.abs(t.waveform).max(axis=0))
    assert abs(moved - round(0.05 * 256)) <= 1


def test_shift_distribution():
    rng = RngStream(0, "v")
    draws = np.array([draw_variation(rng) for _ in range(10_000)])
    assert 0.009 <= draws[:, 1].std() <= 0.011
    assert np.all((draws[:, 0] >= 0.3) & (draws[:, 0] <= 0.6))


def test_vary_needs_segment():
    t = ErpTemplate(1, 1, np.zeros((N_CHANNELS, N_TIMES), np.float32), 0.4, None)
    with pytest.raises(DegenerateTemplateError):
        vary_erp(t, RngStream(0, "v"))


# simulation ------------------------------------------------------------------------------------------

def test_gain_factors():
    assert gain_factor(0) == 1.0
    assert gain_factor(3) == pytest.approx(1.4125, abs=1e-3)
    assert gain_factor(6) == pytest.approx(1.9953, abs=1e-3)


def test_zero_waveform_flips_label_only():
    e = _const_set([1.5])[0]
    out = simulate_attended(e, np.zeros((N_CHANNELS, N_TIMES)), 3.0)
    assert np.array_equal(out.data, e.data)
    assert out.label == Label.ATTENDED and out.origin == Origin.SIMULATED_3DB


def test_simulation_linear_exactly():
    rng = np.random.default_rng(0)
    e = _const_set([0.0])[0]
    e = type(e)(**{**e.__dict__, "data": rng.normal(size=(N_CHANNELS, N_TIMES)).astype(np.float32)})
    wave = rng.normal(size=(N_CHANNELS, N_TIMES)).astype(np.float32)
    out = simulate_attended(e, wave, 6.0)
    assert np.array_equal(out.data, e.data + np.float32(gain_factor(6.0)) * wave)


def test_simulation_shape_mismatch():
    with pytest.raises(ValueError):
        simulate_attended(_const_set([0.0])[0], np.zeros((N_CHANNELS, 10)), 0.0)


# corpus ---------------------------------------------------------------------------------------------------

def test_single_subject_p1_counts():
    s = synth_subject(1, 1, (60, 260), 0.0, RngStream(0, "s"))
    c = build_augmented_corpus(s, RngStream(0, "a"))
    counts = c.counts(1)
    for name in ("upsampled", "sim0", "sim3", "sim6"):
        assert counts[name] == (520, 520)
    assert counts["augmented"] == (2080, 2080)


def test_corpus_class_balanced(small_corpus, small_original):
    for p in (1, 2, 3):
        n_un = int(((small_original.paradigm == p) & (small_original.label == 0)).sum())
        for name, (a, u) in small_corpus.counts(p).items():
            assert a == u
            assert a == (8 if name == "augmented" else 2) * n_un


def test_corpus_provenance_within_original(small_corpus, small_original):
    assert small_corpus.source_ids() <= small_original.source_ids()
    for s in small_corpus.sets.values():
        # Averages never mix subjects, paradigms or (for upsampled rows) classes.
        src = s.src
        for j in range(src.shape[1]):
            ok = src[:, j] >= 0
            assert np.all(small_original.subject[src[ok, j]] == s.subject[ok])
            assert np.all(small_original.paradigm[src[ok, j]] == s.paradigm[ok])


def test_simulated_rows_built_from_unattended(small_corpus, small_original):
    for s in (small_corpus.sim0, small_corpus.sim3, small_corpus.sim6):
        valid = s.src[s.src >= 0]
        assert np.all(small_original.label[valid] == Label.UNATTENDED)
        assert np.all((s.template >= 0) == (s.label == Label.ATTENDED))


def test_corpus_deterministic(small_original, small_corpus):
    again = build_augmented_corpus(small_original, RngStream(0, "augment"))
    for a, b in zip(small_corpus.sets.values(), again.sets.values()):
        assert np.array_equal(a.src, b.src) and np.array_equal(a.width, b.width)
    assert np.array_equal(small_corpus.sim3.materialize([0, 5]), again.sim3.materialize([0, 5]))


def test_materialized_simulated_row(small_corpus, small_original):
    s = small_corpus.sim6
    i = int(np.flatnonzero(s.template >= 0)[0])
    src = s.src[i][s.src[i] >= 0]
    base = small_original.data[src].astype(np.float64).mean(axis=0).astype(np.float32)
    wave = vary_erp(s.templates[s.template[i]], None, width_s=float(s.width[i]), shift_s=float(s.shift[i]))
    expected = base + np.float32(gain_factor(6.0)) * wave
    assert np.allclose(s.materialize([i])[0], expected, atol=1e-4)


def test_to_epochset_and_view(small_corpus, small_original):
    part = small_corpus.upsampled
    es = part.to_epochset()
    assert len(es) == len(part) and es.source_ids() <= small_original.source_ids()
    view = AugmentedView([small_original, part])
    idx = np.array([0, len(small_original) + 3, 2])
    batch = view.batch(idx)
    assert np.array_equal(batch[0], small_original.data[0])
    assert np.array_equal(batch[1], part.materialize([3])[0])
    assert len(view) == len(small_original) + len(part)


def test_view_select_paradigm(small_corpus):
    view = AugmentedView(list(small_corpus.sets.values())).select_paradigm(2)
    assert set(view.paradigm.tolist()) == {2}
    assert len(view) == sum(v for v in small_corpus.counts(2)["augmented"])


def test_concat_requires_shared_base(small_corpus):
    other = AugmentedSet(_const_set([1, 2, 3]), small_corpus.sim0.src[:1] * 0, np.ones(1, int), np.ones(1, int),
                         -np.ones(1, int), np.zeros(1), np.zeros(1), 0.0)
    with pytest.raises(ValueError):
        AugmentedSet.concat([small_corpus.sim0, other])


def test_missing_class_rejected():
    with pytest.raises(ValueError):
        build_augmented_corpus(_const_set([1, 2, 3, 4]), RngStream(0, "a"))


def test_degenerate_subject_skipped():
    att = _const_set([0.0, 0.0, 0.0], label=1)
    un = _const_set([0.0, 0.0, 0.0, 0.0], label=0)
    c = build_augmented_corpus(EpochSet.concat([att, un]), RngStream(0, "a"))
    assert c.skipped == [(1, 1)]
    assert c.counts(1)["upsampled"] == (8, 8) and c.counts(1)["sim0"] == (0, 0)


@settings(max_examples=15, deadline=None)
@given(n_att=st.integers(3, 12), n_un=st.integers(3, 40), seed=st.integers(0, 10 ** 6))
def test_count_identity_property(n_att, n_un, seed):
    rng = np.random.default_rng(seed)
    n = n_att + n_un
    data = rng.normal(size=(n, N_CHANNELS, N_TIMES)).astype(np.float32)
    data[:n_att, :, 150:200] += 5.0
    s = EpochSet(data, np.ones(n), np.full(n, 2), np.zeros(n), np.r_[np.ones(n_att), np.zeros(n_un)],
                 uid=[make_uid(1, 2, i) for i in range(n)])
    c = build_augmented_corpus(s, RngStream(seed, "a"))
    counts = c.counts(2)
    for name in ("upsampled", "sim0", "sim3", "sim6"):
        assert counts[name] == (2 * n_un, 2 * n_un)
    assert counts["augmented"] == (8 * n_un, 8 * n_un)
    assert c.source_ids() <= set(s.uid.tolist())
