import numpy as np
import pytest

from jfe.errors import ConfigurationError, ContractViolation
from jfe.evaluate import probe_leakage
from jfe.features import extract_features, read_wav
from jfe.synthcorpus import (
    PEAK,
    ChannelProfile,
    CorpusSpec,
    Manifest,
    corpus_profiles,
    generate_corpus,
    generate_utterance,
    identity_channel,
    make_channels,
    make_speakers,
    read_enrollment,
    read_trials,
    speaker_source,
    split_trials,
    synthesize,
    write_enrollment,
    write_trials,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(n_speakers=4, n_channels=3, n_utterances=3, seed=5)
    return spec, out, generate_corpus(spec, out)


def _mean_mfcc(w):
    # static cepstra + log-energy; delta means are ~0 and only add probe noise
    return extract_features(w).frames[:, :20].mean(axis=0)


def test_profiles_valid():
    rng = np.random.default_rng(0)
    sps = make_speakers(20, rng)
    assert len({s.speaker_id for s in sps}) == 20
    for s in sps:
        assert all(0 < f < 8000 for f in s.formants)
    chs = make_channels(4, rng)
    assert len({c.channel_id for c in chs}) == 4
    with pytest.raises(ContractViolation):
        ChannelProfile("bad", tuple(np.ones(65)), 1.0, 0.0)
    with pytest.raises(ContractViolation):
        ChannelProfile("bad", (1.0,), 1.0, -0.1)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        CorpusSpec(n_speakers=1)
    with pytest.raises(ConfigurationError):
        CorpusSpec(min_duration=0.2, max_duration=0.3)


def test_utterance_determinism():
    sp = make_speakers(2, np.random.default_rng(0))[0]
    ch = make_channels(2, np.random.default_rng(1))[0]
    a, labels = generate_utterance(sp, ch, 1.0, np.random.default_rng(9))
    b, _ = generate_utterance(sp, ch, 1.0, np.random.default_rng(9))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert labels == {"speaker": sp.speaker_id, "channel": ch.channel_id}
    assert np.max(np.abs(a.samples)) <= PEAK + 1e-12


def test_identity_channel_is_source():
    sp = make_speakers(2, np.random.default_rng(0))[1]
    w, _ = generate_utterance(sp, identity_channel(), 1.0, np.random.default_rng(3))
    src = speaker_source(sp, 16000, 16000, np.random.default_rng(3))
    np.testing.assert_allclose(w.samples, PEAK * src, atol=1e-12)


def test_short_duration_rejected():
    sp = make_speakers(2, np.random.default_rng(0))[0]
    with pytest.raises(ContractViolation):
        generate_utterance(sp, identity_channel(), 0.4, np.random.default_rng(0))


def test_two_speakers_separable_on_identity_channel():
    sps = make_speakers(2, np.random.default_rng(4))
    ch = identity_channel()
    frames, labels, means = [], [], []
    for k, sp in enumerate(sps):
        m = []
        for u in range(4):
            f = extract_features(generate_utterance(sp, ch, 1.0, np.random.default_rng(100 * k + u))[0]).frames
            # silent frames are exactly zero on a noiseless channel and carry no identity
            f = f[f[:, 19] > np.log(1e-10) + 1.0]
            frames.append(f)
            labels.extend([k] * len(f))
            m.append(f.mean(axis=0))
        means.append(np.mean(m, axis=0))
    assert np.linalg.norm(means[0] - means[1]) > 0
    X = np.concatenate(frames)
    acc = probe_leakage(X, np.array(labels), np.random.default_rng(0), steps=200).accuracy
    assert acc >= 0.9


def test_oracle_separability_of_factors():
    spec = CorpusSpec(seed=0)
    speakers, channels = corpus_profiles(spec)
    # speaker factor on the identity channel
    X, y = [], []
    for s, sp in enumerate(speakers):
        for u in range(5):
            X.append(_mean_mfcc(generate_utterance(sp, identity_channel(), 1.0, np.random.default_rng([s, u]))[0]))
            y.append(s)
    assert probe_leakage(np.array(X), np.array(y), np.random.default_rng(0)).accuracy >= 0.9
    # channel factor with a fixed speaker
    X, y = [], []
    for c, ch in enumerate(channels):
        for u in range(20):
            X.append(_mean_mfcc(generate_utterance(speakers[0], ch, 1.0, np.random.default_rng([c, u, 7]))[0]))
            y.append(c)
    assert probe_leakage(np.array(X), np.array(y), np.random.default_rng(0)).accuracy >= 0.9


def test_corpus_counts_and_peak(small_corpus):
    spec, out, manifest = small_corpus
    assert len(manifest) == 4 * 3 * 3
    counts = {}
    for r in manifest:
        counts[r.speaker] = counts.get(r.speaker, 0) + 1
    assert set(counts.values()) == {9}
    for r in manifest.rows[:6]:
        w = read_wav(manifest.resolve(r))
        assert np.max(np.abs(w.samples)) <= PEAK + 1 / 32767
        assert abs(w.duration - r.duration) < 1e-9


def test_full_size_count():
    spec = CorpusSpec(n_speakers=20, n_channels=4, n_utterances=5)
    assert spec.n_speakers * spec.n_channels * spec.n_utterances == 400


def test_regeneration_is_identical(small_corpus, tmp_path):
    spec, out, manifest = small_corpus
    again = generate_corpus(spec, tmp_path)
    assert (tmp_path / "manifest.tsv").read_bytes() == (out / "manifest.tsv").read_bytes()
    for a, b in zip(manifest.rows[:5], again.rows[:5]):
        assert (out / a.path).read_bytes() == (tmp_path / b.path).read_bytes()


def test_synthesize_matches_file(small_corpus):
    spec, out, manifest = small_corpus
    w = synthesize(spec, 1, 2, 0)
    r = next(x for x in manifest if x.utt_id == "spk001_ch2_u00")
    np.testing.assert_allclose(read_wav(manifest.resolve(r)).samples, w.samples, atol=1 / 32767)


def test_manifest_roundtrip(small_corpus):
    _, out, manifest = small_corpus
    back = Manifest.read(out / "manifest.tsv")
    assert back.rows == manifest.rows
    (out / "broken.tsv").write_text("a\tb\n")
    with pytest.raises(ContractViolation):
        Manifest.read(out / "broken.tsv")


def test_split_contracts(small_corpus, tmp_path):
    _, _, manifest = small_corpus
    split = split_trials(manifest, np.random.default_rng(0), n_eval=2)
    enrolled = {u for ids in split.enroll.values() for u in ids}
    tests = set(split.test_ids)
    assert not enrolled & tests
    assert not (enrolled | tests) & set(split.train)
    for cond in (True, False):
        trials = [t for t in split.trials if t.matched == cond]
        n_t = sum(t.target for t in trials)
        n_n = len(trials) - n_t
        assert abs(n_t - n_n) <= 0.1 * n_t
        for spk in manifest.speakers:
            assert any(t.target and t.enroll_id == spk for t in trials)
    assert len(split.trials) == len({(t.enroll_id, t.test_id) for t in split.trials})
    write_trials(tmp_path / "t.tsv", split.trials)
    assert read_trials(tmp_path / "t.tsv") == split.trials
    write_enrollment(tmp_path / "e.tsv", split.enroll)
    assert read_enrollment(tmp_path / "e.tsv") == split.enroll


def test_split_needs_enough_utterances(small_corpus):
    _, _, manifest = small_corpus
    with pytest.raises(ConfigurationError):
        split_trials(manifest, np.random.default_rng(0), n_eval=4)
    with pytest.raises(ConfigurationError):
        split_trials(manifest, np.random.default_rng(0), enroll_channels=["ch9"])


def test_confounded_training_channels(small_corpus):
    _, _, manifest = small_corpus
    rows = manifest.by_id()
    split = split_trials(manifest, np.random.default_rng(0), n_eval=2, train_channels=2)
    seen = {}
    for u in split.train:
        seen.setdefault(rows[u].speaker, set()).add(rows[u].channel)
    chans = manifest.channels
    for i, spk in enumerate(manifest.speakers):
        assert seen[spk] == {chans[i % 3], chans[(i + 1) % 3]}
    # evaluation still spans every channel
    assert {rows[u].channel for u in split.test_ids} == set(chans)
    with pytest.raises(ConfigurationError):
        split_trials(manifest, np.random.default_rng(0), train_channels=0)
