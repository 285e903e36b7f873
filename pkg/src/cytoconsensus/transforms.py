"""Instruction-dialogue reformatting and knowledge-replay streams.

Placeholders available to dialogue templates:

``{narrative}``
    the record's final description text
``{findings}``
    one ``Display name: label`` line per asserted dimension
``{tbs_categories}``
    the six Bethesda codes, comma separated
``{dim:CODE}`` / ``{name:CODE}``
    verdict label / display name of one dimension; a template using
    ``{dim:CODE}`` is only eligible for records that assert ``CODE``
``{focus_name}`` / ``{focus_label}``
    a dimension drawn from the record's assertions with the seeded draw

Seeded draws use :class:`random.Random` (Mersenne Twister) seeded with a
SHA-256 digest of ``(seed, key)``, so results do not depend on ``PYTHONHASHSEED``
or platform.
"""

from __future__ import annotations

import asyncio
import enum
import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .endpoints import ChatClient, ChatRequest, EndpointConfig, ImagePart
from .exceptions import AllStreamsEmpty, UnresolvablePlaceholder
from .pipeline import DatasetRecord
from .schema import MorphDimension, TbsCategory
from .tiles import ImageTile, load_image_bytes

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class Modality(str, enum.Enum):
    VISION_TEXT = "vision_text"
    TEXT_ONLY = "text_only"


class SampleOrigin(str, enum.Enum):
    REFORMATTED = "reformatted"
    DOMAIN_REPLAY = "domain_replay"
    GENERAL_REPLAY = "general_replay"


def seeded_rng(seed: int, key: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}\x1f{key}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class InstructionSample:
    sample_id: str
    modality: Modality
    turns: tuple[tuple[Role, str], ...]
    template_id: str
    origin: SampleOrigin
    image_ref: str | None = None
    generator_model: str | None = None

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError(f"invalid sample {self.sample_id}: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        roles = [r for r, _ in self.turns]
        body = roles[1:] if roles and roles[0] is Role.SYSTEM else roles
        expected = [Role.USER if i % 2 == 0 else Role.ASSISTANT for i in range(len(body))]
        if body != expected:
            out.append("turns must alternate user/assistant after an optional leading system turn")
        if Role.ASSISTANT not in roles:
            out.append("at least one assistant turn required")
        if self.modality is Modality.VISION_TEXT and not self.image_ref:
            out.append("vision samples need an image reference")
        if self.modality is Modality.TEXT_ONLY and self.image_ref:
            out.append("text-only samples carry no image reference")
        return out

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "modality": self.modality.value,
            "images": [self.image_ref] if self.image_ref else [],
            "messages": [{"role": r.value, "content": t} for r, t in self.turns],
            "template_id": self.template_id,
            "origin": self.origin.value,
            "generator_model": self.generator_model,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InstructionSample":
        images = data.get("images") or []
        return cls(
            sample_id=data["id"],
            modality=Modality(data["modality"]),
            turns=tuple((Role(m["role"]), m["content"]) for m in data["messages"]),
            template_id=data.get("template_id", ""),
            origin=SampleOrigin(data["origin"]),
            image_ref=images[0] if images else None,
            generator_model=data.get("generator_model"),
        )


_PLACEHOLDER = re.compile(r"\{([a-z_]+)(?::([A-Za-z-]+))?\}")
_SIMPLE = {"narrative", "findings", "tbs_categories", "focus_name", "focus_label"}
_PER_DIM = {"dim", "name"}


@dataclass(frozen=True)
class DialogueTemplate:
    template_id: str
    turns: tuple[tuple[Role, str], ...]
    multi_turn: bool = False

    def __post_init__(self):
        probe = InstructionSample(
            "probe", Modality.TEXT_ONLY, tuple((r, "x") for r, _ in self.turns), self.template_id,
            SampleOrigin.REFORMATTED,
        )
        exchanges = sum(1 for r, _ in probe.turns if r is Role.ASSISTANT)
        if self.multi_turn and exchanges < 2:
            raise ValueError(f"template {self.template_id}: multi-turn templates need >= 2 exchanges")
        if not self.multi_turn and exchanges != 1:
            raise ValueError(f"template {self.template_id}: single-turn templates need exactly 1 exchange")
        for _, text in self.turns:
            for m in _PLACEHOLDER.finditer(text):
                name, arg = m.group(1), m.group(2)
                if arg is None and name not in _SIMPLE:
                    raise ValueError(f"template {self.template_id}: unknown placeholder {m.group(0)}")
                if arg is not None:
                    if name not in _PER_DIM:
                        raise ValueError(f"template {self.template_id}: unknown placeholder {m.group(0)}")
                    MorphDimension.from_code(arg)

    def required_dimensions(self) -> set[MorphDimension]:
        dims = set()
        for _, text in self.turns:
            for m in _PLACEHOLDER.finditer(text):
                if m.group(1) == "dim" and m.group(2):
                    dims.add(MorphDimension.from_code(m.group(2)))
        return dims

    def uses_focus(self) -> bool:
        return any("{focus_" in text for _, text in self.turns)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DialogueTemplate":
        try:
            turns = tuple((Role(t["role"]), str(t["text"])) for t in data["turns"])
            return cls(str(data["template_id"]), turns, bool(data.get("multi_turn", False)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed template: missing {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "multi_turn": self.multi_turn,
            "turns": [{"role": r.value, "text": t} for r, t in self.turns],
        }


def load_templates(path: str | Path) -> list[DialogueTemplate]:
    templates = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            templates.append(DialogueTemplate.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not templates:
        raise ValueError(f"{path}: no templates")
    ids = [t.template_id for t in templates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate template ids")
    return templates


def default_templates() -> list[DialogueTemplate]:
    from importlib import resources

    text = resources.files("cytoconsensus").joinpath("data/default_templates.jsonl").read_text(encoding="utf-8")
    return [DialogueTemplate.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def _fill(text: str, record: DatasetRecord, focus: MorphDimension | None) -> str:
    assertions = record.final.assertions

    def sub(m: re.Match) -> str:
        name, arg = m.group(1), m.group(2)
        if arg is not None:
            dim = MorphDimension.from_code(arg)
            if name == "name":
                return dim.display_name
            if dim not in assertions:
                raise UnresolvablePlaceholder(f"record {record.tile_id} has no {dim.code} assertion")
            return dim.label(assertions[dim].verdict)
        if name == "narrative":
            if not record.final.narrative.strip():
                raise UnresolvablePlaceholder(f"record {record.tile_id} has no narrative")
            return record.final.narrative
        if name == "findings":
            if not assertions:
                raise UnresolvablePlaceholder(f"record {record.tile_id} has no assertions")
            return "\n".join(f"{d.display_name}: {d.label(a.verdict)}" for d, a in assertions.items())
        if name == "tbs_categories":
            return ", ".join(c.code for c in TbsCategory)
        if focus is None:
            raise UnresolvablePlaceholder(f"record {record.tile_id} has no assertion to focus on")
        if name == "focus_name":
            return focus.display_name.lower()
        return focus.label(assertions[focus].verdict)

    return _PLACEHOLDER.sub(sub, text)


@dataclass
class ReformatResult:
    samples: list[InstructionSample]
    warnings: list[str] = field(default_factory=list)


def reformat_instructions(records: Sequence[DatasetRecord], templates: Sequence[DialogueTemplate],
                          seed: int) -> ReformatResult:
    """Turn each record into one dialogue using a seeded template draw.

    Templates whose placeholders the record cannot fill are excluded from that
    record's draw; a record with no eligible template is skipped with a warning.
    """
    if not templates:
        raise ValueError("reformat_instructions needs at least one template")
    result = ReformatResult([])
    for rec in records:
        rng = seeded_rng(seed, rec.tile_id)
        assertions = rec.final.assertions
        focus_dims = list(assertions)
        candidates = []
        for tpl in templates:
            if not tpl.required_dimensions() <= set(assertions):
                continue
            if tpl.uses_focus() and not focus_dims:
                continue
            candidates.append(tpl)
        while candidates:
            tpl = candidates[rng.randrange(len(candidates))]
            focus = focus_dims[rng.randrange(len(focus_dims))] if focus_dims else None
            try:
                turns = tuple((role, _fill(text, rec, focus)) for role, text in tpl.turns)
            except UnresolvablePlaceholder:
                candidates.remove(tpl)
                continue
            result.samples.append(
                InstructionSample(
                    sample_id=f"{rec.tile_id}:{tpl.template_id}",
                    modality=Modality.VISION_TEXT,
                    turns=turns,
                    template_id=tpl.template_id,
                    origin=SampleOrigin.REFORMATTED,
                    image_ref=rec.tile_id,
                )
            )
            break
        else:
            msg = f"record {rec.tile_id}: no template resolvable; skipped"
            log.warning(msg)
            result.warnings.append(msg)
    return result


_QA = re.compile(r"Q:\s*(.*?)\s*(?<!\S)A:\s*(.*?)\s*(?=(?<!\S)Q:|\Z)", re.S)


def parse_qa(reply: str) -> list[tuple[str, str]] | None:
    """Parse ``Q: ... A: ...`` pairs; None when the reply does not follow the convention."""
    text = reply.strip()
    if not text.startswith("Q:"):
        return None
    pairs = []
    pos = 0
    for m in _QA.finditer(text):
        if text[pos:m.start()].strip():
            return None
        q, a = m.group(1).strip(), m.group(2).strip()
        if not q or not a:
            return None
        pairs.append((q, a))
        pos = m.end()
    if not pairs or text[pos:].strip():
        return None
    return pairs


DOMAIN_REPLAY_PROMPT = """Here is a description of a cervical cytology image:
{narrative}

Write two question-and-answer pairs about cervical cytology that can be answered from this description alone, without seeing the image. Use exactly this format, one item per line:
Q: <question>
A: <answer>"""

GENERAL_REPLAY_PROMPT = """Look at this image and write two question-and-answer pairs about its content. Use exactly this format, one item per line:
Q: <question>
A: <answer>"""


@dataclass
class ReplaySummary:
    produced: int = 0
    skipped_unparseable: int = 0
    skipped_errors: int = 0
    skipped_ids: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return self.skipped_unparseable + self.skipped_errors

    def to_dict(self) -> dict:
        return {
            "produced": self.produced,
            "skipped_unparseable": self.skipped_unparseable,
            "skipped_errors": self.skipped_errors,
            "skipped_ids": self.skipped_ids,
        }


def _qa_turns(pairs: Iterable[tuple[str, str]]) -> tuple[tuple[Role, str], ...]:
    turns = []
    for q, a in pairs:
        turns += [(Role.USER, q), (Role.ASSISTANT, a)]
    return tuple(turns)


async def generate_replay(
    source: Sequence[DatasetRecord] | Sequence[ImageTile],
    generator: EndpointConfig,
    kind: SampleOrigin,
    *,
    client: ChatClient | None = None,
    prompt_template: str | None = None,
    base_dir: str | Path | None = None,
    request_options: Mapping[str, Any] | None = None,
) -> tuple[list[InstructionSample], ReplaySummary]:
    """Ask the generator for QA pairs per item; failures are skipped and counted.

    Domain replay takes dataset records and yields text-only samples. General
    replay takes image tiles and yields vision samples.
    """
    if kind is SampleOrigin.REFORMATTED:
        raise ValueError("replay kind must be DOMAIN_REPLAY or GENERAL_REPLAY")
    opts = dict(request_options or {})
    own = client is None
    client = client or ChatClient()

    async def one(item) -> InstructionSample | str | Exception:
        try:
            if kind is SampleOrigin.DOMAIN_REPLAY:
                prompt = (prompt_template or DOMAIN_REPLAY_PROMPT).replace("{narrative}", item.final.narrative)
                request = ChatRequest.simple("", prompt, **opts)
                item_id = item.tile_id
            else:
                image = await asyncio.to_thread(load_image_bytes, item.uri, base_dir)
                request = ChatRequest.simple("", prompt_template or GENERAL_REPLAY_PROMPT,
                                             [ImagePart(image, item.media_type)], **opts)
                item_id = item.tile_id
            reply = await client.send_chat(generator, request)
        except Exception as exc:
            return exc
        pairs = parse_qa(reply.text)
        if pairs is None:
            return "unparseable"
        vision = kind is SampleOrigin.GENERAL_REPLAY
        return InstructionSample(
            sample_id=f"{kind.value}:{item_id}",
            modality=Modality.VISION_TEXT if vision else Modality.TEXT_ONLY,
            turns=_qa_turns(pairs),
            template_id="qa",
            origin=kind,
            image_ref=item_id if vision else None,
            generator_model=generator.model_name,
        )

    try:
        results = await asyncio.gather(*(one(item) for item in source))
    finally:
        if own:
            await client.aclose()
    summary = ReplaySummary()
    samples = []
    for item, res in zip(source, results):
        if isinstance(res, InstructionSample):
            samples.append(res)
            summary.produced += 1
            continue
        summary.skipped_ids.append(item.tile_id)
        if isinstance(res, Exception):
            log.warning("replay item %s failed: %s", item.tile_id, res)
            summary.skipped_errors += 1
        else:
            summary.skipped_unparseable += 1
    return samples, summary


def mix_replay(streams: Sequence[tuple[Sequence[Any], float]], seed: int) -> list[Any]:
    """Interleave streams by seeded weighted draws, preserving order within each stream.

    At every step a non-exhausted stream with positive weight is picked with
    probability proportional to its weight, and its next item is emitted.
    Zero-weight streams are appended afterwards in listed order.
    """
    if any(w < 0 for _, w in streams):
        raise ValueError("stream weights must be non-negative")
    if not streams or sum(w for _, w in streams) <= 0:
        raise ValueError("stream weights must sum to a positive value")
    if all(len(s) == 0 for s, _ in streams):
        raise AllStreamsEmpty("every replay stream is empty")
    rng = seeded_rng(seed, "mix")
    cursors = [0] * len(streams)
    out: list[Any] = []
    live = [i for i, (s, w) in enumerate(streams) if w > 0 and len(s) > 0]
    while live:
        weights = [streams[i][1] for i in live]
        pick = rng.choices(live, weights=weights)[0]
        items = streams[pick][0]
        out.append(items[cursors[pick]])
        cursors[pick] += 1
        if cursors[pick] >= len(items):
            live.remove(pick)
    for (items, w), c in zip(streams, cursors):
        if w == 0:
            out.extend(items[c:])
    return out
