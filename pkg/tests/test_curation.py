import dataclasses
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import grid_iou
from vtg_rl.core import DecodeError, GroundingSample, TimeInterval, decode_sample, encode_sample
from vtg_rl.curation import (
    STREAM_TASK,
    STREAM_VALIDATION,
    AnnotatedSample,
    CurationConfig,
    annotate_dataset,
    decode_annotated,
    encode_annotated,
    filter_split,
    generate_dataset,
    read_annotated,
    simulate_annotation,
    write_annotated,
)
from vtg_rl.structio import TagProfile, format_reward, parse_response

# measured mean ann_iou for fully random annotation of a mid-video 0.2*duration gt
RANDOM_ANNOTATION_MEAN = 0.2195


def _sample(gt=(25.6, 38.4), difficulty=0.5, dur=64.0):
    return GroundingSample("m", dur, (0.0,) * 8, TimeInterval(*gt), difficulty, {})


def _fake(ious):
    s = _sample()
    return [AnnotatedSample(dataclasses.replace(s, id=f"a{i}"), "", [], None, float(v)) for i, v in enumerate(ious)]


def test_noiseless_annotation_is_exact():
    cfg = CurationConfig(p_annot_error=0.0)
    for i in range(20):
        a = simulate_annotation(_sample(difficulty=0.0), cfg, np.random.default_rng(i))
        assert a.ann_interval == a.sample.gt
        assert a.ann_iou == 1.0


def test_zero_noise_scale_sends_everything_to_coldstart():
    cfg = CurationConfig(n_samples=200, p_annot_error=0.0, noise_scale=0.0)
    ann = annotate_dataset(generate_dataset(cfg), cfg)
    assert all(a.ann_iou == 1.0 for a in ann)
    cs, rl, dis = filter_split(ann, 0.999, 0.4)
    assert len(cs) == 200 and not rl and not dis


def test_random_annotation_monte_carlo():
    cfg = CurationConfig(p_annot_error=1.0)
    s = _sample()
    ious = np.array([simulate_annotation(s, cfg, np.random.default_rng([0, i])).ann_iou for i in range(10_000)])
    # oracle: independent uniform endpoints scored by grid counting
    rng = np.random.default_rng(99)
    ends = np.sort(rng.uniform(0, 64, size=(2_000, 2)), axis=1)
    oracle = np.mean([grid_iou(e, (25.6, 38.4), hi=64.0, res=1e-2) for e in ends])
    assert ious.mean() < 0.4
    assert ious.mean() == pytest.approx(RANDOM_ANNOTATION_MEAN, abs=0.01)
    # 2000 oracle draws: standard error about 0.006
    assert ious.mean() == pytest.approx(oracle, abs=0.025)


def test_annotation_renders_through_grammar():
    for profile in (TagProfile(), TagProfile.answer_tags()):
        cfg = CurationConfig(n_samples=50, seed=3)
        for a in annotate_dataset(generate_dataset(cfg), cfg, profile=profile):
            resp = parse_response(a.response_text, profile)
            assert format_reward(resp, profile) == 1
            assert resp.interval is not None
            lo, hi = cfg.cot_len_range
            assert lo + 7 <= len(a.response_tokens) <= hi + 7


def test_filter_split_examples():
    cs, rl, dis = filter_split(_fake([0.9, 0.5, 0.2]), 0.8, 0.4)
    assert [a.ann_iou for a in cs] == [0.9]
    assert [a.ann_iou for a in rl] == [0.5]
    assert [a.ann_iou for a in dis] == [0.2]
    cs, rl, dis = filter_split(_fake([0.8, 0.4]), 0.8, 0.4)
    assert not cs and not dis and len(rl) == 2
    cs, rl, dis = filter_split(_fake([1.0] * 5), 0.8, 0.4)
    assert len(cs) == 5 and not rl and not dis


iou_lists = st.lists(st.sampled_from([0.0, 0.2, 0.4, 0.5, 0.8, 0.9, 1.0]) | st.floats(0, 1), max_size=40)


@given(iou_lists, st.floats(0, 1), st.floats(0, 1))
def test_filter_split_is_an_ordered_partition(ious, e1, e2):
    e2, e1 = sorted((e1, e2))
    items = _fake(ious)
    cs, rl, dis = filter_split(items, e1, e2)
    assert Counter(a.sample.id for a in cs + rl + dis) == Counter(a.sample.id for a in items)
    order = {a.sample.id: i for i, a in enumerate(items)}
    for part in (cs, rl, dis):
        idx = [order[a.sample.id] for a in part]
        assert idx == sorted(idx)
    assert all(a.ann_iou > e1 for a in cs)
    assert all(a.ann_iou < e2 for a in dis)
    assert all(e2 <= a.ann_iou <= e1 for a in rl)


@given(iou_lists, st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_filter_split_monotone(ious, a, b, c):
    lo, mid, hi = sorted((a, b, c))
    items = _fake(ious)
    assert len(filter_split(items, hi, lo)[0]) <= len(filter_split(items, mid, lo)[0])
    assert len(filter_split(items, hi, mid)[2]) >= len(filter_split(items, hi, lo)[2])


def test_generation_is_reproducible_and_schema_valid():
    cfg = CurationConfig(n_samples=30, seed=5)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert [encode_sample(s) for s in a] == [encode_sample(s) for s in b]
    for s in a:
        assert decode_sample(encode_sample(s), cfg.d_feat) == s
        assert 0 <= s.gt.start_s <= s.gt.end_s <= s.duration_s
    other = generate_dataset(cfg, stream=STREAM_VALIDATION)
    assert {s.gt for s in other}.isdisjoint({s.gt for s in a})
    # a longer dataset extends a shorter one
    assert generate_dataset(dataclasses.replace(cfg, n_samples=40), stream=STREAM_TASK)[:30] == a


def test_bimodal_difficulty_avoids_the_middle():
    cfg = CurationConfig(n_samples=300, difficulty_dist="bimodal")
    d = np.array([s.difficulty for s in generate_dataset(cfg)])
    assert np.all((d <= 0.3) | (d >= 0.7))
    assert 0.3 < np.mean(d <= 0.3) < 0.7


def test_annotated_codec_round_trip(tmp_path):
    cfg = CurationConfig(n_samples=25, seed=2)
    ann = annotate_dataset(generate_dataset(cfg), cfg)
    for a in ann:
        assert decode_annotated(encode_annotated(a)) == a
    write_annotated(tmp_path / "a.jsonl", ann)
    assert read_annotated(tmp_path / "a.jsonl") == ann


def test_annotated_decode_names_bad_field():
    cfg = CurationConfig(n_samples=1)
    line = encode_annotated(annotate_dataset(generate_dataset(cfg), cfg)[0])
    with pytest.raises(DecodeError) as exc:
        decode_annotated(line.replace('"ann_iou":', '"ann_iou_x":'))
    assert exc.value.field == "ann_iou"
    with pytest.raises(DecodeError) as exc:
        decode_annotated(line.replace('"response_tokens":[', '"response_tokens":["x",'))
    assert exc.value.field == "response_tokens"


def test_config_validation():
    with pytest.raises(ValueError):
        CurationConfig(eps1=0.3, eps2=0.5)
    with pytest.raises(ValueError):
        CurationConfig(difficulty_dist="trimodal")
    with pytest.raises(ValueError):
        CurationConfig(p_annot_error=1.5)
