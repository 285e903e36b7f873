"""Morphological vocabulary, structured captions and the phrase lexicon.

Nine binary morphological observations and six Bethesda (TBS) categories form
closed enumerations. A :class:`StructuredCaption` holds at most one
:class:`DimensionAssertion` per observation plus the free text it was read from.
Free text is mapped onto assertions by a :class:`Lexicon` of literal phrases.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .exceptions import EmptyCaption, LexiconError


class Verdict(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def sign(self) -> str:
        return "+" if self is Verdict.POSITIVE else "-"

    def flipped(self) -> "Verdict":
        return Verdict.NEGATIVE if self is Verdict.POSITIVE else Verdict.POSITIVE

    @classmethod
    def parse(cls, value: Any) -> "Verdict":
        if isinstance(value, Verdict):
            return value
        if isinstance(value, bool):
            return cls.POSITIVE if value else cls.NEGATIVE
        key = str(value).strip().lower()
        if key in ("+", "positive", "pos", "p", "1", "true", "yes"):
            return cls.POSITIVE
        if key in ("-", "negative", "neg", "n", "0", "false", "no"):
            return cls.NEGATIVE
        raise ValueError(f"not a verdict: {value!r}")


class MorphDimension(enum.Enum):
    """The nine expert-defined binary cell observations.

    Each member carries ``(code, display_name, positive_label, negative_label)``.
    Declaration order is the canonical order used for tables and templates.
    """

    NE = ("NE", "Nuclear Enlargement", "enlarged", "normal-sized")
    NA = ("NA", "Nuclear Atypia", "atypical", "typical")
    NH = ("NH", "Nuclear Hyperchromasia", "hyperchromatic", "normochromatic")
    KOILOCYTE = ("Koilocyte", "Koilocyte", "present", "absent")
    CT = ("CT", "Chromatin Texture", "coarse", "fine")
    NUCLEOLUS = ("Nucleolus", "Nucleolus", "present", "absent")
    NC = ("NC", "Nuclear Count", "multiple", "single")
    NCR = ("NCR", "Nuclear-to-Cytoplasmic Ratio", "increased", "normal")
    NM = ("NM", "Nuclear Membrane", "irregular", "smooth")

    def __init__(self, code: str, display_name: str, positive_label: str, negative_label: str):
        self.code = code
        self.display_name = display_name
        self.positive_label = positive_label
        self.negative_label = negative_label

    # members are singletons; identity hashing avoids Enum's Python-level __hash__
    __hash__ = object.__hash__

    def label(self, verdict: Verdict) -> str:
        return self.positive_label if verdict is Verdict.POSITIVE else self.negative_label

    @classmethod
    def from_code(cls, code: str) -> "MorphDimension":
        key = str(code).strip().lower()
        for dim in cls:
            if key in (dim.code.lower(), dim.name.lower(), dim.display_name.lower()):
                return dim
        raise ValueError(f"unknown morphological dimension: {code!r}")

    @property
    def order(self) -> int:
        return _DIM_ORDER[self]


_DIM_ORDER = {d: i for i, d in enumerate(MorphDimension)}


class TbsCategory(enum.Enum):
    NILM = ("NILM", "Negative for intraepithelial lesion or malignancy")
    ASC_US = ("ASC-US", "Atypical squamous cells of undetermined significance")
    LSIL = ("LSIL", "Low-grade squamous intraepithelial lesion")
    ASC_H = ("ASC-H", "Atypical squamous cells, cannot exclude HSIL")
    HSIL = ("HSIL", "High-grade squamous intraepithelial lesion")
    AGC = ("AGC", "Atypical glandular cells")

    def __init__(self, code: str, display_name: str):
        self.code = code
        self.display_name = display_name

    @classmethod
    def from_code(cls, code: str) -> "TbsCategory":
        key = str(code).strip().upper().replace("_", "-")
        for cat in cls:
            if key == cat.code:
                return cat
        raise ValueError(f"unknown TBS category: {code!r}")


@dataclass(frozen=True)
class DimensionAssertion:
    dimension: MorphDimension
    verdict: Verdict
    confidence: float = 1.0
    evidence: str = ""

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension.code,
            "verdict": self.verdict.value,
            "confidence": self.confidence,
            "evidence": self.evidence,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DimensionAssertion":
        return cls(
            dimension=MorphDimension.from_code(data["dimension"]),
            verdict=Verdict.parse(data["verdict"]),
            confidence=float(data.get("confidence", 1.0)),
            evidence=str(data.get("evidence", "")),
        )


def freeze_assertions(
    assertions: Mapping[MorphDimension, DimensionAssertion] | Iterable[DimensionAssertion] | None,
) -> Mapping[MorphDimension, DimensionAssertion]:
    """Return a read-only mapping sorted in canonical dimension order."""
    if assertions is None:
        return MappingProxyType({})
    if isinstance(assertions, Mapping):
        items = list(assertions.items())
    else:
        items = [(a.dimension, a) for a in assertions]
    items.sort(key=lambda kv: kv[0].order)
    return MappingProxyType(dict(items))


def assertions_to_list(assertions: Mapping[MorphDimension, DimensionAssertion]) -> list[dict]:
    return [assertions[d].to_dict() for d in sorted(assertions, key=lambda d: d.order)]


def assertions_from_list(items: Iterable[Mapping[str, Any]]) -> Mapping[MorphDimension, DimensionAssertion]:
    out: dict[MorphDimension, DimensionAssertion] = {}
    for item in items:
        a = DimensionAssertion.from_dict(item)
        if a.dimension in out:
            raise ValueError(f"duplicate assertion for {a.dimension.code}")
        out[a.dimension] = a
    return freeze_assertions(out)


@dataclass(frozen=True)
class StructuredCaption:
    """Per-dimension assertions (partial) plus narrative text."""

    assertions: Mapping[MorphDimension, DimensionAssertion] = field(default_factory=dict)
    narrative: str = ""

    def __post_init__(self):
        object.__setattr__(self, "assertions", freeze_assertions(self.assertions))

    def __eq__(self, other):
        if not isinstance(other, StructuredCaption):
            return NotImplemented
        return dict(self.assertions) == dict(other.assertions) and self.narrative == other.narrative

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        return {"assertions": assertions_to_list(self.assertions), "narrative": self.narrative}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StructuredCaption":
        return cls(assertions_from_list(data.get("assertions", [])), str(data.get("narrative", "")))

    @classmethod
    def from_json(cls, text: str) -> "StructuredCaption":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LexiconEntry:
    dimension: MorphDimension
    phrase: str
    verdict: Verdict
    base_confidence: float

    @property
    def key(self) -> str:
        return _normalize_phrase(self.phrase)


def _normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


class Lexicon:
    """Case-insensitive literal phrase table mapping text to dimension verdicts.

    Matching is leftmost-longest over word boundaries, so a negated phrase such as
    ``"no nuclear atypia"`` consumes its span before the shorter ``"nuclear atypia"``
    can match inside it. Whitespace inside a phrase matches any whitespace run.
    """

    def __init__(self, entries: Iterable[LexiconEntry]):
        self.entries: tuple[LexiconEntry, ...] = tuple(entries)
        by_key: dict[str, list[LexiconEntry]] = {}
        for e in self.entries:
            if not e.phrase.strip():
                raise LexiconError("empty phrase in lexicon")
            if not 0.0 <= e.base_confidence <= 1.0:
                raise LexiconError(f"base confidence out of [0,1] for phrase {e.phrase!r}")
            bucket = by_key.setdefault(e.key, [])
            for other in bucket:
                if other.verdict is not e.verdict:
                    raise LexiconError(f"phrase {e.phrase!r} is listed with conflicting verdicts")
                if other.dimension is e.dimension:
                    raise LexiconError(f"duplicate lexicon entry for phrase {e.phrase!r}")
            bucket.append(e)
        self._by_key = by_key
        self._phrases: dict[tuple[MorphDimension, Verdict], list[str]] = {}
        for e in self.entries:
            self._phrases.setdefault((e.dimension, e.verdict), []).append(e.phrase)
        keys = sorted(by_key, key=lambda k: (-len(k), k))
        if keys:
            alternation = "|".join(r"\s+".join(re.escape(tok) for tok in k.split()) for k in keys)
            self._pattern: re.Pattern | None = re.compile(
                rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE
            )
        else:
            self._pattern = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def find(self, text: str) -> list[LexiconEntry]:
        """Entries matched in ``text``, in order of first occurrence, each once."""
        if self._pattern is None:
            return []
        seen: dict[LexiconEntry, None] = {}
        by_key = self._by_key
        for m in self._pattern.finditer(text):
            hit = m.group(0).lower()
            entries = by_key.get(hit) or by_key[_normalize_phrase(hit)]
            for e in entries:
                seen.setdefault(e, None)
        return list(seen)

    def phrases(self, dimension: MorphDimension, verdict: Verdict) -> list[str]:
        return list(self._phrases.get((dimension, verdict), ()))

    def restricted(self, dimension: MorphDimension) -> "Lexicon":
        """Sub-lexicon with only the entries for one dimension."""
        return Lexicon(e for e in self.entries if e.dimension is dimension)

    def coverage_violations(self) -> list[str]:
        problems = []
        for dim in MorphDimension:
            for verdict in Verdict:
                if not self.phrases(dim, verdict):
                    problems.append(f"{dim.code}: no {verdict.value} phrase")
        return problems

    def dumps(self) -> str:
        lines = [f"{e.dimension.code}\t{e.verdict.sign}\t{e.base_confidence:g}\t{e.phrase}" for e in self.entries]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str, *, require_full_coverage: bool = False, source: str = "<string>") -> "Lexicon":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise LexiconError(f"{source}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            code, sign, conf, phrase = parts
            try:
                entries.append(
                    LexiconEntry(
                        dimension=MorphDimension.from_code(code),
                        verdict=Verdict.parse(sign),
                        base_confidence=float(conf),
                        phrase=phrase.strip(),
                    )
                )
            except ValueError as exc:
                raise LexiconError(f"{source}:{lineno}: {exc}") from exc
        lex = cls(entries)
        if require_full_coverage:
            problems = lex.coverage_violations()
            if problems:
                raise LexiconError(f"{source}: incomplete lexicon: " + "; ".join(problems))
        return lex

    @classmethod
    def load(cls, path: str | Path, *, require_full_coverage: bool = True) -> "Lexicon":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), require_full_coverage=require_full_coverage, source=str(path))


_DEFAULT_LEXICON: Lexicon | None = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        text = resources.files("cytoconsensus").joinpath("data/default_lexicon.tsv").read_text(encoding="utf-8")
        _DEFAULT_LEXICON = Lexicon.loads(text, require_full_coverage=True, source="default_lexicon.tsv")
    return _DEFAULT_LEXICON


def parse_structured_caption(raw: str, lexicon: Lexicon) -> StructuredCaption:
    """Read dimension verdicts out of free text.

    For each dimension with at least one matched phrase, the verdict with the larger
    summed base confidence wins and the assertion confidence is its share of the
    total. Equal sums go to whichever verdict was matched first in the text.
    """
    if raw is None or not raw.strip():
        raise EmptyCaption("caption text is empty")
    matched = lexicon.find(raw)
    per_dim: dict[MorphDimension, list[LexiconEntry]] = {}
    for e in matched:
        per_dim.setdefault(e.dimension, []).append(e)

    assertions = {}
    for dim, entries in per_dim.items():
        mass = {Verdict.POSITIVE: 0.0, Verdict.NEGATIVE: 0.0}
        for e in entries:
            mass[e.verdict] += e.base_confidence
        first = entries[0].verdict
        other = first.flipped()
        winner = other if mass[other] > mass[first] else first
        total = mass[first] + mass[other]
        confidence = mass[winner] / total if total > 0 else 0.0
        evidence = "; ".join(e.phrase for e in entries if e.verdict is winner)
        assertions[dim] = DimensionAssertion(dim, winner, confidence, evidence)
    return StructuredCaption(assertions, raw)


def validate_schema(caption: StructuredCaption | Mapping[str, Any]) -> list[str]:
    """Return every invariant violation; an empty list means the caption is valid.

    Accepts a caption object or its serialized dict form (the latter can carry
    duplicate dimensions, which a caption object cannot).
    """
    violations: list[str] = []
    if isinstance(caption, StructuredCaption):
        pairs = list(caption.assertions.items())
    else:
        pairs = []
        seen: set[MorphDimension] = set()
        for item in caption.get("assertions", []):
            try:
                a = DimensionAssertion.from_dict(item)
            except (KeyError, ValueError) as exc:
                violations.append(f"malformed assertion: {exc}")
                continue
            if a.dimension in seen:
                violations.append(f"{a.dimension.code}: duplicate assertion")
            seen.add(a.dimension)
            pairs.append((a.dimension, a))
    for key, a in pairs:
        if a.dimension is not key:
            violations.append(f"{key.code}: assertion keyed under wrong dimension {a.dimension.code}")
        if not isinstance(a.verdict, Verdict):
            violations.append(f"{key.code}: verdict is not binary")
        if not (0.0 <= a.confidence <= 1.0):
            violations.append(f"{key.code}: confidence {a.confidence} outside [0, 1]")
    return violations
