import asyncio
import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from cytoconsensus.endpoints import ChatClient, EndpointConfig
from cytoconsensus.exceptions import AllStreamsEmpty
from cytoconsensus.fusion import FusedDescription
from cytoconsensus.pipeline import DatasetRecord
from cytoconsensus.refine import FinalDescription, Origin
from cytoconsensus.schema import DimensionAssertion, MorphDimension, Verdict
from cytoconsensus.tiles import ImageTile
from cytoconsensus.transforms import (
    DialogueTemplate,
    InstructionSample,
    Modality,
    Role,
    SampleOrigin,
    default_templates,
    generate_replay,
    load_templates,
    mix_replay,
    parse_qa,
    reformat_instructions,
)

from mock_llm import MockLLM, data_uri

GOLDEN = Path(__file__).parent / "golden"
D = MorphDimension
P, N = Verdict.POSITIVE, Verdict.NEGATIVE
GEN = EndpointConfig("gen", "http://mock/v1", "base-4b")


def record(tile_id, verdicts=None, narrative="Enlarged nuclei with coarse chromatin."):
    verdicts = {D.NE: P, D.CT: P, D.NM: N} if verdicts is None else verdicts
    a = {d: DimensionAssertion(d, v, 1.0) for d, v in verdicts.items()}
    final = FinalDescription(a, narrative, {d: Origin.CONSENSUS for d in a})
    fused = FusedDescription(a, frozenset(set(D) - set(a)), (), narrative, ("x",))
    return DatasetRecord(tile_id, f"tiles/{tile_id}.png", final, (("x", narrative),), fused, "h", "t")


SINGLE = DialogueTemplate.from_dict({
    "template_id": "single", "multi_turn": False,
    "turns": [{"role": "system", "text": "S"}, {"role": "user", "text": "Describe."},
              {"role": "assistant", "text": "{narrative}"}],
})
NEEDS_CT = DialogueTemplate.from_dict({
    "template_id": "ct", "multi_turn": False,
    "turns": [{"role": "user", "text": "Chromatin?"}, {"role": "assistant", "text": "{dim:CT}"}],
})


def test_single_turn_template():
    res = reformat_instructions([record("t1")], [SINGLE], seed=0)
    [s] = res.samples
    assert [r for r, _ in s.turns] == [Role.SYSTEM, Role.USER, Role.ASSISTANT]
    assert s.turns[2][1] == "Enlarged nuclei with coarse chromatin."
    assert s.sample_id == "t1:single" and s.image_ref == "t1" and s.modality is Modality.VISION_TEXT
    assert s.origin is SampleOrigin.REFORMATTED


def test_unresolvable_template_skips_record():
    res = reformat_instructions([record("t1", {D.NE: P})], [NEEDS_CT], seed=0)
    assert res.samples == [] and len(res.warnings) == 1


def test_fallback_to_resolvable_template():
    res = reformat_instructions([record("t1", {D.NE: P})], [NEEDS_CT, SINGLE], seed=3)
    assert [s.template_id for s in res.samples] == ["single"]


def test_multi_turn_defaults_expand_to_two_exchanges():
    records = [record(f"t{i}") for i in range(40)]
    res = reformat_instructions(records, default_templates(), seed=5)
    assert [s.image_ref for s in res.samples] == [r.tile_id for r in records]
    multi = [s for s in res.samples if s.template_id in ("describe_then_focus", "findings_then_nuclear_size")]
    assert multi
    for s in multi:
        assert sum(r is Role.ASSISTANT for r, _ in s.turns) >= 2
        assert "{" not in "".join(t for _, t in s.turns)


def test_reformat_is_seed_deterministic():
    records = [record(f"t{i}") for i in range(30)]
    a = reformat_instructions(records, default_templates(), seed=11)
    b = reformat_instructions(records, default_templates(), seed=11)
    dump = lambda res: [json.dumps(s.to_dict(), sort_keys=True) for s in res.samples]  # noqa: E731
    assert dump(a) == dump(b)


def test_template_validation(tmp_path):
    bad = tmp_path / "t.jsonl"
    bad.write_text('{"template_id": "x", "multi_turn": false, "turns": [{"role": "user", "text": "{bogus}"},'
                   ' {"role": "assistant", "text": "a"}]}\n', encoding="utf-8")
    with pytest.raises(ValueError):
        load_templates(bad)
    with pytest.raises(ValueError):
        DialogueTemplate.from_dict({"template_id": "m", "multi_turn": True,
                                    "turns": [{"role": "user", "text": "q"}, {"role": "assistant", "text": "a"}]})


def test_sample_invariants():
    with pytest.raises(ValueError):
        InstructionSample("s", Modality.TEXT_ONLY, ((Role.USER, "q"),), "t", SampleOrigin.DOMAIN_REPLAY)
    with pytest.raises(ValueError):
        InstructionSample("s", Modality.VISION_TEXT, ((Role.USER, "q"), (Role.ASSISTANT, "a")), "t",
                          SampleOrigin.GENERAL_REPLAY, image_ref=None)
    with pytest.raises(ValueError):
        InstructionSample("s", Modality.TEXT_ONLY, ((Role.USER, "q"), (Role.USER, "a")), "t",
                          SampleOrigin.DOMAIN_REPLAY)


record_st = st.builds(
    lambda i, m, n: record(f"r{i}", m, n),
    st.integers(0, 10_000),
    st.dictionaries(st.sampled_from(list(D)), st.sampled_from([P, N]), max_size=9),
    st.sampled_from(["", "Some narrative."]),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(record_st, max_size=6, unique_by=lambda r: r.tile_id), st.integers(0, 99))
def test_every_emitted_sample_is_valid(records, seed):
    res = reformat_instructions(records, default_templates() + [NEEDS_CT], seed)
    assert len(res.samples) + len(res.warnings) == len(records)
    for s in res.samples:
        assert s.violations() == []
        back = InstructionSample.from_dict(s.to_dict())
        assert back == s


def test_parse_qa():
    assert parse_qa("Q: q? A: a.") == [("q?", "a.")]
    assert parse_qa("Q: one?\nA: yes.\nQ: two?\nA: no.") == [("one?", "yes."), ("two?", "no.")]
    assert parse_qa("Sure! Here you go.") is None
    assert parse_qa("Q: only a question") is None


def _replay(source, kind, responder):
    mock = MockLLM({"base-4b": responder})

    async def go():
        async with ChatClient(transport=mock.transport()) as c:
            return await generate_replay(source, GEN, kind, client=c)

    return asyncio.run(go()), mock


def test_domain_replay_text_only():
    (samples, summary), mock = _replay([record(f"d{i}") for i in range(3)], SampleOrigin.DOMAIN_REPLAY,
                                       lambda call: "Q: q? A: a.")
    assert len(samples) == 3 and summary.produced == 3
    for s in samples:
        assert s.modality is Modality.TEXT_ONLY and s.image_ref is None
        assert s.origin is SampleOrigin.DOMAIN_REPLAY and s.generator_model == "base-4b"
        assert s.turns == ((Role.USER, "q?"), (Role.ASSISTANT, "a."))
    assert all(not c.images for c in mock.log)
    assert "Enlarged nuclei" in mock.log[0].prompt


def test_general_replay_vision():
    tiles = [ImageTile(f"g{i}", data_uri(f"g{i}")) for i in range(2)]
    (samples, summary), mock = _replay(tiles, SampleOrigin.GENERAL_REPLAY, lambda call: "Q: What? A: A dog.")
    assert [s.image_ref for s in samples] == ["g0", "g1"]
    assert all(s.modality is Modality.VISION_TEXT and s.origin is SampleOrigin.GENERAL_REPLAY for s in samples)
    assert sorted(c.images[0] for c in mock.log) == [b"g0", b"g1"]


def test_replay_skips_unparseable_and_errors():
    replies = {"d0": "Q: ok? A: ok.", "d1": "I cannot help with that.", "d2": 503}

    def responder(call):
        return next(v for k, v in replies.items() if f"[{k}]" in call.prompt)

    records = [record(k, narrative=f"[{k}]") for k in replies]
    mock = MockLLM({"base-4b": responder})

    async def go():
        gen = EndpointConfig("gen", "http://mock/v1", "base-4b", max_retries=0)
        async with ChatClient(transport=mock.transport()) as c:
            return await generate_replay(records, gen, SampleOrigin.DOMAIN_REPLAY, client=c)

    samples, summary = asyncio.run(go())
    assert [s.sample_id for s in samples] == ["domain_replay:d0"]
    assert (summary.produced, summary.skipped_unparseable, summary.skipped_errors) == (1, 1, 1)


def test_mix_golden_and_balance():
    a = [f"A{i}" for i in range(100)]
    b = [f"B{i}" for i in range(100)]
    out = mix_replay([(a, 1), (b, 1)], seed=42)
    assert sorted(out) == sorted(a + b)
    head = out[:100]
    assert abs(sum(x[0] == "A" for x in head) - sum(x[0] == "B" for x in head)) <= 20
    assert out == (GOLDEN / "mix_a100_b100_seed42.txt").read_text(encoding="utf-8").split()


def test_mix_single_stream_and_zero_weight():
    a = list(range(10))
    assert mix_replay([(a, 3.5)], seed=1) == a
    b = list(range(100, 105))
    assert mix_replay([(a, 1), (b, 0)], seed=1) == a + b
    with pytest.raises(ValueError):
        mix_replay([(a, 0), (b, 0)], seed=1)
    with pytest.raises(AllStreamsEmpty):
        mix_replay([([], 1), ([], 1)], seed=1)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.sampled_from([0, 0.5, 1, 2, 7])), min_size=1, max_size=4),
       st.integers(0, 2**32))
def test_mix_conserves_multiset_and_stream_order(specs, seed):
    streams = [([(k, i) for i in range(n)], w) for k, (n, w) in enumerate(specs)]
    if sum(w for _, w in streams) == 0:
        with pytest.raises(ValueError):
            mix_replay(streams, seed)
        return
    if all(not s for s, _ in streams):
        with pytest.raises(AllStreamsEmpty):
            mix_replay(streams, seed)
        return
    out = mix_replay(streams, seed)
    assert Counter(out) == Counter(x for s, _ in streams for x in s)
    for k, (s, _) in enumerate(streams):
        assert [x for x in out if x[0] == k] == s
    assert out == mix_replay(streams, seed)
