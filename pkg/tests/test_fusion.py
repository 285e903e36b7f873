import asyncio
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from cytoconsensus.exceptions import ConfigInvalid, EmptyInput
from cytoconsensus.fusion import (
    FusedDescription,
    FusionPolicy,
    Resolution,
    fuse_consensus,
    summarize_narrative,
)
from cytoconsensus.endpoints import ChatClient, EndpointConfig
from cytoconsensus.schema import DimensionAssertion, MorphDimension, StructuredCaption, Verdict

from mock_llm import MockLLM
from oracles import all_patterns, count_votes

GOLDEN = Path(__file__).parent / "golden"
P, N = Verdict.POSITIVE, Verdict.NEGATIVE
V = {"P": P, "N": N}
DIMS = list(MorphDimension)


def cap(**verdicts):
    return StructuredCaption(
        {MorphDimension.from_code(k): DimensionAssertion(MorphDimension.from_code(k), v, 1.0, f"{k}-{v.value}")
         for k, v in verdicts.items()},
        "",
    )


def captions_for(dim, pattern):
    out = []
    for i, v in enumerate(pattern):
        a = {} if v is None else {dim: DimensionAssertion(dim, V[v], 1.0, f"e{i}")}
        out.append((f"ann{i}", StructuredCaption(a, "")))
    return out


def test_oracle_fixed_points():
    assert count_votes(("P", "P", "N")) == ("P", pytest.approx(2 / 3), True, "consensus")
    assert count_votes(("P", "N")) == (None, None, True, "dropped")
    assert count_votes(("P", None, None)) == (None, None, False, None)


def test_unanimity():
    fused = fuse_consensus([(e, cap(NE=P)) for e in "abc"])
    assert fused.consensus[MorphDimension.NE].verdict is P
    assert fused.consensus[MorphDimension.NE].confidence == 1.0
    assert MorphDimension.NE not in fused.missing_dimensions
    assert fused.consensus[MorphDimension.NE].evidence == "NE-positive; NE-positive; NE-positive"


def test_single_annotator_passthrough():
    c = cap(NE=P, CT=N, NM=P)
    fused = fuse_consensus([("solo", c)], FusionPolicy(min_votes=1, min_coverage=1))
    assert dict(fused.consensus) == dict(c.assertions)


def test_two_to_one_split():
    fused = fuse_consensus([("a", cap(CT=P)), ("b", cap(CT=P)), ("c", cap(CT=N))])
    a = fused.consensus[MorphDimension.CT]
    assert a.verdict is P and a.confidence == pytest.approx(0.667, abs=0.001)
    [entry] = fused.conflict_log
    assert entry.dimension is MorphDimension.CT and entry.resolution is Resolution.CONSENSUS
    assert entry.votes == (("a", P), ("b", P), ("c", N))


def test_tie_is_dropped():
    fused = fuse_consensus([("a", cap(NM=P)), ("b", cap(NM=N))], FusionPolicy(min_coverage=2))
    assert MorphDimension.NM in fused.missing_dimensions
    assert fused.conflict_log[0].resolution is Resolution.DROPPED


def test_empty_input_and_bad_policy():
    with pytest.raises(EmptyInput):
        fuse_consensus([])
    with pytest.raises(ConfigInvalid):
        FusionPolicy(min_votes=1, min_coverage=3)
    with pytest.raises(ConfigInvalid):
        FusionPolicy(min_coverage=0)


def test_confidence_weighting_sums_confidences():
    ne = MorphDimension.NE
    caps = [
        ("a", StructuredCaption({ne: DimensionAssertion(ne, P, 0.9)}, "")),
        ("b", StructuredCaption({ne: DimensionAssertion(ne, N, 0.6)}, "")),
        ("c", StructuredCaption({ne: DimensionAssertion(ne, N, 0.2)}, "")),
    ]
    counted = fuse_consensus(caps)
    weighted = fuse_consensus(caps, FusionPolicy(confidence_weighting=True))
    assert counted.consensus[ne].verdict is N
    assert weighted.consensus[ne].verdict is P
    assert weighted.consensus[ne].confidence == pytest.approx(0.9 / 1.7)


POLICIES = [
    FusionPolicy(),
    FusionPolicy(min_coverage=1),
    FusionPolicy(min_coverage=3),
    FusionPolicy(min_votes=2, min_coverage=2),
    FusionPolicy(min_votes=3, min_coverage=2),
    FusionPolicy(min_votes=1, min_coverage=1),
]


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: f"cov{p.min_coverage}-mv{p.min_votes}")
@pytest.mark.parametrize("with_abstain", [False, True])
def test_matches_exhaustive_vote_counter(policy, with_abstain):
    for k in range(1, 5):
        for dim in (MorphDimension.NE, MorphDimension.NM):
            for pattern in all_patterns(k, with_abstain):
                fused = fuse_consensus(captions_for(dim, pattern), policy)
                winner, conf, logged, resolution = count_votes(pattern, policy.min_coverage, policy.min_votes)
                got = fused.consensus.get(dim)
                assert (got.verdict if got else None) == (V[winner] if winner else None), pattern
                if winner:
                    assert got.confidence == pytest.approx(float(conf))
                entries = [c for c in fused.conflict_log if c.dimension is dim]
                assert bool(entries) == logged, pattern
                if logged:
                    assert entries[0].resolution.value == resolution


verdict_maps = st.dictionaries(st.sampled_from(DIMS), st.sampled_from([P, N]), max_size=9)


@settings(max_examples=200, deadline=None)
@given(st.lists(verdict_maps, min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_permutation_invariance_and_partition(maps, rnd):
    caps = [(f"e{i}", StructuredCaption({d: DimensionAssertion(d, v, 1.0, f"ev{i}") for d, v in m.items()}, ""))
            for i, m in enumerate(maps)]
    shuffled = list(caps)
    rnd.shuffle(shuffled)
    a, b = fuse_consensus(caps), fuse_consensus(shuffled)
    assert a == b
    keys = set(a.consensus)
    assert keys | a.missing_dimensions == set(DIMS)
    assert not keys & a.missing_dimensions
    for d in DIMS:
        cast = {m[d] for m in maps if d in m}
        if len(cast) == 1 and sum(d in m for m in maps) >= 2:
            assert a.consensus[d].verdict in cast and a.consensus[d].confidence == 1.0
        if len(cast) == 2:
            assert any(c.dimension is d for c in a.conflict_log)


def test_fused_round_trip():
    fused = fuse_consensus([("a", cap(CT=P, NE=N)), ("b", cap(CT=P)), ("c", cap(CT=N, NE=N))])
    assert FusedDescription.from_dict(fused.to_dict()) == fused


def test_template_narratives_match_golden():
    fused = fuse_consensus([("a", cap(NE=P)), ("b", cap(NE=P))])
    text = asyncio.run(summarize_narrative(fused, []))
    assert text + "\n" == (GOLDEN / "narrative_ne_positive.txt").read_text(encoding="utf-8")
    empty = fuse_consensus([("a", cap())])
    text = asyncio.run(summarize_narrative(empty, []))
    assert text + "\n" == (GOLDEN / "narrative_empty.txt").read_text(encoding="utf-8")


def test_integrator_prompt_carries_consensus():
    mock = MockLLM({"integ": lambda call: call.prompt})
    integ = EndpointConfig("integ", "http://mock/v1", "integ")
    fused = fuse_consensus([(e, cap(NE=P, CT=N, NM=P)) for e in "ab"])

    async def go():
        async with ChatClient(transport=mock.transport()) as c:
            return await summarize_narrative(fused, ["first {draft}", "second"], integ, client=c)

    text = asyncio.run(go())
    for d in (MorphDimension.NE, MorphDimension.CT, MorphDimension.NM):
        assert d.display_name in text
    assert "first {draft}" in text and "second" in text
