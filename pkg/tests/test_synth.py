import numpy as np
import pytest

from trifuse.metrics import iou
from trifuse.synth import (
    ALL_SUBSETS,
    CapacityError,
    CorpusConfig,
    SyntheticCorpus,
    correlation_profile,
    generate_corpus,
    label_modalities,
    modality_label,
    oracle_gate,
    oracle_retrieve,
    split_videos,
)

SMALL = CorpusConfig(n_videos=6, events_per_video=2, frames=32, d=32, n_signatures=5)


def test_modality_labels():
    assert modality_label(("vision", "audio", "speech")) == "AVS"
    assert modality_label(("audio", "vision")) == "AV"
    assert modality_label(("speech", "vision")) == "VS"
    assert modality_label(("vision",)) == "V"
    assert label_modalities("AV") == ("vision", "audio")
    assert label_modalities("avs") == ("vision", "audio", "speech")


def test_same_seed_bit_identical():
    a = generate_corpus(7, config=CorpusConfig(**SMALL.__dict__))
    b = generate_corpus(7, config=CorpusConfig(**SMALL.__dict__))
    assert np.array_equal(a.signatures, b.signatures)
    for va, vb in zip(a.videos, b.videos):
        assert va.events == vb.events
        for m in va.tracks:
            assert np.array_equal(va.tracks[m], vb.tracks[m])
    assert a.queries == b.queries
    c = generate_corpus(8, config=CorpusConfig(**SMALL.__dict__))
    assert not np.array_equal(a.videos[0].tracks["vision"], c.videos[0].tracks["vision"])


def test_signatures_orthonormal():
    corpus = generate_corpus(1, config=CorpusConfig(**SMALL.__dict__))
    gram = corpus.signatures @ corpus.signatures.T
    assert np.allclose(gram, np.eye(len(corpus.signatures)), atol=1e-10)


def test_queries_cover_all_subsets_and_tasks():
    corpus = generate_corpus(2, config=CorpusConfig(n_videos=12, events_per_video=2, frames=32, d=32))
    labels = {q.modality_set for q in corpus.queries}
    assert labels == {modality_label(s) for s in ALL_SUBSETS}
    assert {q.task for q in corpus.queries} == {"MR", "SC"}
    for q in corpus.queries:
        assert q.event_modality in label_modalities(q.modality_set)


def test_capacity_error():
    with pytest.raises(CapacityError):
        generate_corpus(0, config=CorpusConfig(n_videos=1, events_per_video=9, frames=32, d=16))


def test_events_on_grid_and_disjoint():
    corpus = generate_corpus(3, config=CorpusConfig(**SMALL.__dict__))
    bin_w = corpus.config.duration / 16
    for v in corpus.videos:
        spans = sorted((e.span.start, e.span.end) for e in v.events)
        for s, e in spans:
            assert s / bin_w == pytest.approx(round(s / bin_w))
            assert e / bin_w == pytest.approx(round(e / bin_w))
            assert 0 <= s < e <= v.duration
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            assert e1 <= s2


def test_oracle_exact_on_clean_corpus():
    corpus = generate_corpus(4, config=CorpusConfig(**SMALL.__dict__))
    for q in corpus.queries:
        if q.task != "MR":
            continue
        got = oracle_retrieve(corpus.video(q.video_id), q, corpus.signatures)
        assert iou(got, q.gold_span) == pytest.approx(1.0), q.sample_id
    assert oracle_gate(corpus) == pytest.approx(1.0)


def test_oracle_degrades_gently_under_noise():
    corpus = generate_corpus(5, config=CorpusConfig(**SMALL.__dict__))
    rng = np.random.default_rng(5)
    for v in corpus.videos:
        for m in v.tracks:
            v.tracks[m] = v.tracks[m] + rng.standard_normal(v.tracks[m].shape) * 0.1
    assert oracle_gate(corpus) > 0.9


def test_oracle_fails_when_informative_modality_zeroed():
    corpus = generate_corpus(6, config=CorpusConfig(**SMALL.__dict__))
    q = next(q for q in corpus.queries if q.task == "MR")
    video = corpus.video(q.video_id)
    video.tracks[q.event_modality] = np.random.default_rng(0).standard_normal(
        video.tracks[q.event_modality].shape
    )
    got = oracle_retrieve(video, q, corpus.signatures)
    assert iou(got, q.gold_span) < 0.5


def test_oracle_wrong_modality_is_chance():
    corpus = generate_corpus(9, config=CorpusConfig(**SMALL.__dict__))
    scores = []
    for q in corpus.queries:
        if q.task != "MR":
            continue
        wrong = next(m for m in ("vision", "audio", "speech") if m != q.event_modality)
        video = corpus.video(q.video_id)
        # skip when the wrong track hosts another event with the same signature
        if any(e.modality == wrong and e.signature == q.signature for e in video.events):
            continue
        got = oracle_retrieve(video, q, corpus.signatures, modality=wrong)
        scores.append(iou(got, q.gold_span))
    assert np.mean(scores) < 0.35


def test_correlation_profile_shape():
    corpus = generate_corpus(10, config=CorpusConfig(**SMALL.__dict__))
    v = corpus.videos[0]
    c = correlation_profile(v, "vision", corpus.signatures[0])
    assert c.shape == (corpus.config.frames,)


def test_save_load_roundtrip(tmp_path):
    corpus = generate_corpus(11, config=CorpusConfig(**SMALL.__dict__))
    corpus.save(tmp_path / "corpus")
    loaded = SyntheticCorpus.load(tmp_path / "corpus")
    assert loaded.seed == corpus.seed
    assert loaded.config.to_dict() == corpus.config.to_dict()
    assert loaded.queries == corpus.queries
    for va, vb in zip(corpus.videos, loaded.videos):
        assert va.events == vb.events
        for m in va.tracks:
            assert np.array_equal(va.tracks[m], vb.tracks[m])


def test_split_videos_deterministic_and_disjoint():
    corpus = generate_corpus(12, config=CorpusConfig(**SMALL.__dict__))
    train, ev = split_videos(corpus, 0.25)
    assert set(train).isdisjoint(ev)
    assert len(train) + len(ev) == len(corpus.videos)
    train2, ev2 = split_videos(corpus, 0.25)
    assert train == train2 and ev == ev2
