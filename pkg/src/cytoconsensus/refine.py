"""Expert supplementation of dimensions the annotator ensemble left open."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

from .endpoints import ChatClient, ChatRequest, EndpointConfig, ImagePart
from .exceptions import EmptyCaption
from .fusion import FusedDescription, render_placeholders
from .schema import (
    DimensionAssertion,
    Lexicon,
    MorphDimension,
    assertions_from_list,
    assertions_to_list,
    freeze_assertions,
    parse_structured_caption,
)

log = logging.getLogger(__name__)


class Origin(str, enum.Enum):
    CONSENSUS = "consensus"
    EXPERT = "expert"


DEFAULT_EXPERT_PROMPT = """You are a cervical cytopathology expert reviewing an image tile.

A preliminary description of this tile reads:
{fused_narrative}

The following observations could not be established reliably and need your assessment:
{missing_dimensions}

For each listed observation, state clearly whether it is present or absent (or normal or abnormal) in this image, in one short paragraph. Do not repeat the preliminary findings."""


@dataclass(frozen=True)
class FinalDescription:
    assertions: Mapping[MorphDimension, DimensionAssertion]
    narrative: str
    provenance: Mapping[MorphDimension, Origin]
    expert_endpoint_id: str | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "assertions", freeze_assertions(self.assertions))
        object.__setattr__(
            self, "provenance", dict(sorted(self.provenance.items(), key=lambda kv: kv[0].order))
        )

    def __eq__(self, other):
        if not isinstance(other, FinalDescription):
            return NotImplemented
        return (
            dict(self.assertions) == dict(other.assertions)
            and self.narrative == other.narrative
            and dict(self.provenance) == dict(other.provenance)
            and self.expert_endpoint_id == other.expert_endpoint_id
        )

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        return {
            "assertions": assertions_to_list(self.assertions),
            "narrative": self.narrative,
            "provenance": {d.code: o.value for d, o in self.provenance.items()},
            "expert_endpoint_id": self.expert_endpoint_id,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FinalDescription":
        return cls(
            assertions=assertions_from_list(data.get("assertions", [])),
            narrative=str(data.get("narrative", "")),
            provenance={MorphDimension.from_code(k): Origin(v) for k, v in data.get("provenance", {}).items()},
            expert_endpoint_id=data.get("expert_endpoint_id"),
            warnings=tuple(data.get("warnings", [])),
        )


def from_consensus(fused: FusedDescription, warnings: tuple[str, ...] = (), expert_id: str | None = None) -> FinalDescription:
    return FinalDescription(
        assertions=dict(fused.consensus),
        narrative=fused.narrative,
        provenance={d: Origin.CONSENSUS for d in fused.consensus},
        expert_endpoint_id=expert_id,
        warnings=warnings,
    )


def merge_expert(fused: FusedDescription, reply: str, lexicon: Lexicon, expert_id: str | None = None) -> FinalDescription:
    """Fold an expert reply into the fused description.

    Only dimensions listed as missing are adopted; consensus assertions are never
    overwritten. Disagreements with consensus are recorded as warnings only.
    """
    warnings: list[str] = []
    try:
        parsed = parse_structured_caption(reply, lexicon).assertions
    except EmptyCaption:
        parsed = {}
    for dim, a in parsed.items():
        held = fused.consensus.get(dim)
        if held is not None and held.verdict is not a.verdict:
            warnings.append(
                f"expert contradicts consensus on {dim.code} ({a.verdict.value} vs {held.verdict.value}); kept consensus"
            )
    adopted = {d: a for d, a in parsed.items() if d in fused.missing_dimensions}
    if not adopted:
        warnings.append("expert reply supplied no assertion for any missing dimension")
        final = from_consensus(fused, tuple(warnings), expert_id)
        return final
    unresolved = [d.code for d in fused.missing_in_order if d not in adopted]
    if unresolved:
        warnings.append("missing dimensions left unresolved by expert: " + ", ".join(unresolved))
    assertions = dict(fused.consensus)
    assertions.update(adopted)
    provenance = {d: Origin.CONSENSUS for d in fused.consensus}
    provenance.update({d: Origin.EXPERT for d in adopted})
    narrative = "\n\n".join(p for p in (fused.narrative.strip(), reply.strip()) if p)
    return FinalDescription(assertions, narrative, provenance, expert_id, tuple(warnings))


def expert_prompt(fused: FusedDescription, template: str = DEFAULT_EXPERT_PROMPT) -> str:
    missing = "\n".join(
        f"- {d.display_name} ({d.positive_label} or {d.negative_label})" for d in fused.missing_in_order
    )
    return render_placeholders(template, {"missing_dimensions": missing, "fused_narrative": fused.narrative or "(none)"})


async def refine_expert(
    tile_image: bytes,
    fused: FusedDescription,
    expert: EndpointConfig,
    lexicon: Lexicon,
    *,
    client: ChatClient | None = None,
    media_type: str = "image/png",
    prompt_template: str = DEFAULT_EXPERT_PROMPT,
    request_options: Mapping[str, Any] | None = None,
) -> FinalDescription:
    if not fused.missing_dimensions:
        return from_consensus(fused)
    request = ChatRequest.simple(
        "", expert_prompt(fused, prompt_template), [ImagePart(tile_image, media_type)], **dict(request_options or {})
    )
    if client is None:
        async with ChatClient() as own:
            response = await own.send_chat(expert, request)
    else:
        response = await client.send_chat(expert, request)
    final = merge_expert(fused, response.text, lexicon, expert.id)
    for w in final.warnings:
        log.warning("refine: %s", w)
    return final
