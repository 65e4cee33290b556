import numpy as np
import pytest

from asmsel.errors import ContractError
from asmsel.features import FeatureConfig
from asmsel.pipeline import PipelineConfig, make_batches, train_and_evaluate
from asmsel.synth import SynthSpec, generate_corpus, waveform_corpus

SMALL = SynthSpec(n_classes=2, units_per_utterance=20, n_train=60, n_test=20, seed=3)


def test_same_seed_same_corpus():
    a, b = generate_corpus(SMALL), generate_corpus(SMALL)
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a.utterances, b.utterances))
    assert a.labels == b.labels
    c = generate_corpus(SynthSpec(**{**SMALL.to_dict(), "span_range": (15, 25), "seed": 4}))
    assert c.utterances[0].frames.tobytes() != a.utterances[0].frames.tobytes()


def test_truth_partitions_each_utterance():
    corpus = generate_corpus(SMALL)
    for fm, seq in zip(corpus.utterances, corpus.truth):
        assert seq.n_frames == fm.n_frames
        assert all(15 <= t.length <= 25 for t in seq.tokens)
        assert len(seq) == SMALL.units_per_utterance


def test_events_exclusive_and_fillers_shared():
    spec = SynthSpec(n_classes=2, filler_rate=0.5, n_train=200, n_test=0, seed=1)
    corpus = generate_corpus(spec)
    per_class = np.zeros((2, spec.n_units))
    for label, seq in zip(corpus.labels, corpus.truth):
        per_class[label] += np.bincount(seq.units, minlength=spec.n_units)
    for c in range(2):
        others = [k for k in range(2) if k != c]
        assert per_class[c, spec.event_ids(c)].min() > 0
        assert per_class[others][:, spec.event_ids(c)].sum() == 0
    share = per_class[:, spec.filler_ids] / per_class.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(share[0], share[1], atol=0.02)
    np.testing.assert_allclose(share.sum(axis=1), 0.5, atol=0.02)


def test_prototypes_well_separated():
    corpus = generate_corpus(SMALL)
    P = corpus.prototypes
    d = np.linalg.norm(P[:, None] - P[None], axis=2)
    assert d[np.triu_indices(len(P), 1)].min() >= 4 * SMALL.noise


def test_balanced_round_robin_labels():
    _, labels, _ = generate_corpus(SMALL).split("train")
    assert np.bincount(labels).tolist() == [30, 30]


def test_rare_fillers_make_baseline_easy():
    spec = SynthSpec(filler_rate=0.01, units_per_utterance=10, n_train=80, n_test=40, seed=0)
    corpus = generate_corpus(spec)
    tr, trl, _ = corpus.split("train")
    te, tel, _ = corpus.split("test")
    cfg = PipelineConfig(D=spec.n_units)
    _, rep = train_and_evaluate(make_batches(tr, None, None, trl, 20), make_batches(te, None, None, tel, 20),
                                spec.n_classes, cfg)
    assert rep.accuracy >= 0.95


@pytest.mark.parametrize("kw", [dict(filler_rate=0.0), dict(filler_rate=1.0), dict(n_classes=1),
                                dict(span_range=(5, 2)), dict(noise=0.0)])
def test_degenerate_specs(kw):
    with pytest.raises(ContractError):
        SynthSpec(**kw)


def test_unplaceable_prototypes():
    with pytest.raises(ContractError, match="separated"):
        generate_corpus(SynthSpec(dim=1, spread=0.1, n_train=2, n_test=0))


def test_waveform_mode_runs_front_end():
    spec = SynthSpec(n_classes=2, units_per_utterance=3, n_train=2, n_test=1, seed=0)
    cfg = FeatureConfig(n_fft=512, n_mels=20)
    corpus = waveform_corpus(spec, cfg, sample_rate=16000)
    assert len(corpus.utterances) == 3
    for fm, seq in zip(corpus.utterances, corpus.truth):
        assert fm.dim == 20 and fm.fingerprint == cfg.fingerprint()
        # analysis frames track the hop-counted unit spans to within the window overhang
        assert abs(fm.n_frames - seq.n_frames) <= 2
