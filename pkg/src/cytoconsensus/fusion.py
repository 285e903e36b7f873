"""Consensus fusion of annotator captions.

Verdicts are fused by a deterministic vote per dimension. A dimension that too
few annotators addressed, or on which no verdict wins, becomes a *missing*
dimension and is left for the expert stage. Consensus confidence is the vote
fraction of the winning verdict, not a calibrated probability.

An optional integrator endpoint only rewrites the narrative paragraph; it never
changes the consensus table.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

from .endpoints import ChatClient, ChatRequest, EndpointConfig
from .exceptions import ConfigInvalid, EmptyInput
from .schema import (
    DimensionAssertion,
    MorphDimension,
    StructuredCaption,
    Verdict,
    assertions_from_list,
    assertions_to_list,
    freeze_assertions,
)


class Resolution(str, enum.Enum):
    CONSENSUS = "consensus"
    DROPPED = "dropped"


@dataclass(frozen=True)
class FusionPolicy:
    """Vote rule for :func:`fuse_consensus`.

    ``min_votes=None`` means strict majority of the annotators that addressed
    the dimension. Ties never produce consensus.
    """

    min_votes: float | None = None
    min_coverage: int = 2
    confidence_weighting: bool = False
    integrator: EndpointConfig | None = None

    def __post_init__(self):
        if self.min_coverage < 1:
            raise ConfigInvalid("min_coverage must be >= 1")
        if self.min_votes is not None:
            if self.min_votes <= 0:
                raise ConfigInvalid("min_votes must be positive")
            floor = math.ceil((self.min_coverage + 1) / 2)
            if self.min_votes < floor:
                raise ConfigInvalid(
                    f"min_votes={self.min_votes} is below ceil((min_coverage+1)/2)={floor}"
                )

    def to_dict(self) -> dict:
        return {
            "min_votes": self.min_votes,
            "min_coverage": self.min_coverage,
            "confidence_weighting": self.confidence_weighting,
            "integrator": self.integrator.model_name if self.integrator else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None, integrator: EndpointConfig | None = None) -> "FusionPolicy":
        data = dict(data or {})
        unknown = set(data) - {"min_votes", "min_coverage", "confidence_weighting"}
        if unknown:
            raise ConfigInvalid(f"fusion policy: unknown keys {sorted(unknown)}")
        mv = data.get("min_votes")
        return cls(
            min_votes=None if mv is None else float(mv),
            min_coverage=int(data.get("min_coverage", 2)),
            confidence_weighting=bool(data.get("confidence_weighting", False)),
            integrator=integrator,
        )


@dataclass(frozen=True)
class ConflictEntry:
    dimension: MorphDimension
    votes: tuple[tuple[str, Verdict], ...]
    resolution: Resolution

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension.code,
            "votes": [[eid, v.value] for eid, v in self.votes],
            "resolution": self.resolution.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConflictEntry":
        return cls(
            MorphDimension.from_code(data["dimension"]),
            tuple((str(e), Verdict.parse(v)) for e, v in data["votes"]),
            Resolution(data["resolution"]),
        )


@dataclass(frozen=True)
class FusedDescription:
    consensus: Mapping[MorphDimension, DimensionAssertion]
    missing_dimensions: frozenset[MorphDimension]
    conflict_log: tuple[ConflictEntry, ...] = ()
    narrative: str = ""
    source_annotators: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "consensus", freeze_assertions(self.consensus))
        object.__setattr__(self, "missing_dimensions", frozenset(self.missing_dimensions))

    def __eq__(self, other):
        if not isinstance(other, FusedDescription):
            return NotImplemented
        return (
            dict(self.consensus) == dict(other.consensus)
            and self.missing_dimensions == other.missing_dimensions
            and self.conflict_log == other.conflict_log
            and self.narrative == other.narrative
            and self.source_annotators == other.source_annotators
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def missing_in_order(self) -> list[MorphDimension]:
        return sorted(self.missing_dimensions, key=lambda d: d.order)

    def to_dict(self) -> dict:
        return {
            "consensus": assertions_to_list(self.consensus),
            "missing_dimensions": [d.code for d in self.missing_in_order],
            "conflict_log": [c.to_dict() for c in self.conflict_log],
            "narrative": self.narrative,
            "source_annotators": list(self.source_annotators),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FusedDescription":
        return cls(
            consensus=assertions_from_list(data.get("consensus", [])),
            missing_dimensions=frozenset(MorphDimension.from_code(c) for c in data.get("missing_dimensions", [])),
            conflict_log=tuple(ConflictEntry.from_dict(c) for c in data.get("conflict_log", [])),
            narrative=str(data.get("narrative", "")),
            source_annotators=tuple(data.get("source_annotators", [])),
        )


def _decide(pos: float, neg: float, n_addressing: int, policy: FusionPolicy) -> Verdict | None:
    if n_addressing < policy.min_coverage:
        return None
    if pos == neg:
        return None
    winner, mass = (Verdict.POSITIVE, pos) if pos > neg else (Verdict.NEGATIVE, neg)
    if policy.min_votes is None:
        # strict majority of cast mass; pos != neg already guarantees it for two options
        return winner if mass > (pos + neg) / 2 else None
    return winner if mass >= policy.min_votes else None


def fuse_consensus(captions: Sequence[tuple[str, StructuredCaption]], policy: FusionPolicy | None = None) -> FusedDescription:
    """Fuse per-annotator captions into a consensus table.

    The result does not depend on the order of ``captions``: votes, evidence and
    the annotator list are all ordered by endpoint id.
    """
    policy = policy or FusionPolicy()
    if not captions:
        raise EmptyInput("fuse_consensus needs at least one caption")
    ids = [eid for eid, _ in captions]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate endpoint ids among captions")
    ordered = sorted(captions, key=lambda pair: pair[0])

    consensus: dict[MorphDimension, DimensionAssertion] = {}
    missing: set[MorphDimension] = set()
    conflicts: list[ConflictEntry] = []
    for dim in MorphDimension:
        votes = [(eid, cap.assertions[dim]) for eid, cap in ordered if dim in cap.assertions]
        mass = {Verdict.POSITIVE: 0.0, Verdict.NEGATIVE: 0.0}
        for _, a in votes:
            mass[a.verdict] += a.confidence if policy.confidence_weighting else 1.0
        winner = _decide(mass[Verdict.POSITIVE], mass[Verdict.NEGATIVE], len(votes), policy)
        split = len({a.verdict for _, a in votes}) > 1
        if winner is None:
            missing.add(dim)
        else:
            cast = mass[Verdict.POSITIVE] + mass[Verdict.NEGATIVE]
            evidence = "; ".join(a.evidence for _, a in votes if a.verdict is winner and a.evidence)
            consensus[dim] = DimensionAssertion(dim, winner, mass[winner] / cast if cast else 0.0, evidence)
        if split:
            conflicts.append(
                ConflictEntry(
                    dim,
                    tuple((eid, a.verdict) for eid, a in votes),
                    Resolution.DROPPED if winner is None else Resolution.CONSENSUS,
                )
            )
    return FusedDescription(consensus, frozenset(missing), tuple(conflicts), "", tuple(sorted(ids)))


NO_CONSENSUS_SENTENCE = "No morphological feature reached consensus among the annotators."

DEFAULT_INTEGRATOR_PROMPT = """You are integrating several independent descriptions of the same cervical cytology image tile.

Agreed morphological findings (do not contradict or extend them):
{consensus_table}

Source descriptions:
{narratives}

Write one fluent, well-structured paragraph that states only the agreed findings above in clinical cytology language. Do not mention the annotators or any disagreement."""


def template_sentence(assertion: DimensionAssertion) -> str:
    dim = assertion.dimension
    return f"{dim.display_name}: {dim.label(assertion.verdict)}."


def template_narrative(fused: FusedDescription) -> str:
    if not fused.consensus:
        return NO_CONSENSUS_SENTENCE
    return " ".join(template_sentence(fused.consensus[d]) for d in sorted(fused.consensus, key=lambda d: d.order))


def consensus_table(fused: FusedDescription) -> str:
    rows = []
    for d in sorted(fused.consensus, key=lambda d: d.order):
        a = fused.consensus[d]
        rows.append(f"- {d.display_name} ({d.code}): {d.label(a.verdict)} [agreement {a.confidence:.2f}]")
    return "\n".join(rows) if rows else "- (none)"


def render_placeholders(template: str, values: Mapping[str, str]) -> str:
    # plain replacement: narratives may legitimately contain braces
    out = template
    for key, val in values.items():
        out = out.replace("{" + key + "}", val)
    return out


async def summarize_narrative(
    fused: FusedDescription,
    source_narratives: Sequence[str],
    integrator: EndpointConfig | None = None,
    *,
    client: ChatClient | None = None,
    prompt_template: str = DEFAULT_INTEGRATOR_PROMPT,
    request_options: Mapping[str, Any] | None = None,
) -> str:
    """Produce the Stage-2 paragraph.

    Without an integrator this is the fixed template rendering and never fails.
    With one, endpoint errors propagate to the caller.
    """
    if integrator is None:
        return template_narrative(fused)
    narratives = "\n\n".join(f"[{i + 1}] {t.strip()}" for i, t in enumerate(source_narratives)) or "(none)"
    prompt = render_placeholders(prompt_template, {"consensus_table": consensus_table(fused), "narratives": narratives})
    request = ChatRequest.simple("", prompt, **dict(request_options or {}))
    if client is None:
        async with ChatClient() as own:
            response = await own.send_chat(integrator, request)
    else:
        response = await client.send_chat(integrator, request)
    return response.text.strip()


def with_narrative(fused: FusedDescription, narrative: str) -> FusedDescription:
    return replace(fused, narrative=narrative)
