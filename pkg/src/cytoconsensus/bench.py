"""Benchmark scoring for morphological-perception and TBS classification sets.

Per-group accuracy is recall over the items whose ground truth falls in the
group (a dimension, or a true TBS class). The macro average is the unweighted
mean over groups that have at least one item. Replies that cannot be read as an
answer are kept as ``UNPARSEABLE`` and score as wrong.
"""

from __future__ import annotations

import asyncio
import json
import re
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Any, Mapping, Sequence

from .endpoints import ChatClient, ChatRequest, EndpointConfig, ImagePart
from .exceptions import InsufficientRaters
from .fusion import render_placeholders
from .schema import Lexicon, MorphDimension, TbsCategory, Verdict, default_lexicon
from .tiles import ImageTile, canonical_hash, check_unique, load_image_bytes, read_jsonl

UNPARSEABLE = "Unparseable"
PLACEHOLDER = "–"

DEFAULT_MORPHO_PROMPT = (
    "Look at the cell in this cervical cytology image. Regarding {dimension_name}: "
    "is it {positive_label} or {negative_label}? "
    'Answer "yes" if it is {positive_label} or "no" if it is {negative_label}, then give a one-sentence reason.'
)
DEFAULT_TBS_PROMPT = (
    "Classify the cell in this cervical cytology image according to The Bethesda System. "
    "Choose exactly one of: {categories}. Reply with the category code only."
)


@dataclass(frozen=True)
class MorphoBenchItem:
    item_id: str
    tile: ImageTile
    dimension: MorphDimension
    ground_truth: Verdict

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MorphoBenchItem":
        return cls(
            str(data["item_id"]),
            _tile_of(data),
            MorphDimension.from_code(data["dimension"]),
            Verdict.parse(data["ground_truth"]),
        )

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "tile": self.tile.to_dict(),
            "dimension": self.dimension.code,
            "ground_truth": self.ground_truth.value,
        }


@dataclass(frozen=True)
class CytoBenchItem:
    item_id: str
    tile: ImageTile
    ground_truth: TbsCategory

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CytoBenchItem":
        return cls(str(data["item_id"]), _tile_of(data), TbsCategory.from_code(data["ground_truth"]))

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "tile": self.tile.to_dict(), "ground_truth": self.ground_truth.code}


def _tile_of(data: Mapping[str, Any]) -> ImageTile:
    if "tile" in data:
        return ImageTile.from_dict(data["tile"])
    return ImageTile(tile_id=str(data["item_id"]), uri=str(data["uri"]))


def load_morpho_items(path: str | Path) -> list[MorphoBenchItem]:
    items = [MorphoBenchItem.from_dict(row) for row in read_jsonl(path)]
    check_unique([i.item_id for i in items], "item_id")
    return items


def load_cyto_items(path: str | Path) -> list[CytoBenchItem]:
    items = [CytoBenchItem.from_dict(row) for row in read_jsonl(path)]
    check_unique([i.item_id for i in items], "item_id")
    return items


# --- answer extraction -----------------------------------------------------

_LEADING_YES_NO = re.compile(r"^\W*(yes|no)\b", re.I)
_ANSWER_YES_NO = re.compile(r"\banswer\s*(?:is)?\s*[:\-]?\s*\W?(yes|no)\b", re.I)
_LEADING_OPTION = re.compile(r"^\W*\(?([AB])\)?(?:[.):]|\s*$)")
_ANSWER_OPTION = re.compile(r"\b(?:answer|option)\s*(?:is)?\s*[:\-]?\s*\(?([AB])\)?(?![A-Za-z])", re.I)


def _word(label: str) -> re.Pattern:
    return re.compile(rf"(?<![\w-]){re.escape(label)}(?![\w-])", re.I)


def _polarity_verdict(text: str, dim: MorphDimension) -> Verdict | None:
    negated = re.compile(rf"\bnot\s+{re.escape(dim.positive_label)}(?![\w-])", re.I)
    has_neg = bool(negated.search(text))
    rest = negated.sub(" ", text)
    has_neg = has_neg or bool(_word(dim.negative_label).search(rest))
    has_pos = bool(_word(dim.positive_label).search(rest))
    if has_pos != has_neg:
        return Verdict.POSITIVE if has_pos else Verdict.NEGATIVE
    return None


def extract_binary_answer(raw: str, dimension: MorphDimension, lexicon: Lexicon | None = None) -> Verdict | str:
    """Read a yes/no style verdict for ``dimension`` out of a model reply.

    Tries, in order: a leading or declared yes/no, a leading or declared option
    letter (A positive, B negative), the dimension's polarity labels, then the
    lexicon restricted to the dimension. Returns ``UNPARSEABLE`` otherwise.
    """
    if not raw or not raw.strip():
        return UNPARSEABLE
    text = raw.strip()
    for pattern in (_LEADING_YES_NO, _ANSWER_YES_NO):
        m = pattern.search(text)
        if m:
            return Verdict.POSITIVE if m.group(1).lower() == "yes" else Verdict.NEGATIVE
    for pattern in (_LEADING_OPTION, _ANSWER_OPTION):
        m = pattern.search(text)
        if m:
            return Verdict.POSITIVE if m.group(1).upper() == "A" else Verdict.NEGATIVE
    verdict = _polarity_verdict(text, dimension)
    if verdict is not None:
        return verdict
    lexicon = lexicon or default_lexicon()
    matched = lexicon.restricted(dimension).find(text)
    verdicts = {e.verdict for e in matched}
    if len(verdicts) == 1:
        return verdicts.pop()
    if len(verdicts) == 2:
        pos = sum(e.base_confidence for e in matched if e.verdict is Verdict.POSITIVE)
        neg = sum(e.base_confidence for e in matched if e.verdict is Verdict.NEGATIVE)
        if pos != neg:
            return Verdict.POSITIVE if pos > neg else Verdict.NEGATIVE
    return UNPARSEABLE


_TBS_PATTERNS: dict[TbsCategory, tuple[str, ...]] = {
    TbsCategory.NILM: (r"nilm", r"negative\s+for\s+intraepithelial\s+lesions?\s+or\s+malignancy"),
    TbsCategory.ASC_US: (r"asc[-\s]?us", r"atypical\s+squamous\s+cells?\s+of\s+undetermined\s+significance"),
    TbsCategory.LSIL: (r"lsil", r"low[-\s]?grade\s+squamous\s+intraepithelial\s+lesions?"),
    TbsCategory.ASC_H: (
        r"asc[-\s]?h",
        r"atypical\s+squamous\s+cells?,?\s+(?:that\s+)?cannot\s+exclude\s+"
        r"(?:hsil|high[-\s]?grade\s+squamous\s+intraepithelial\s+lesions?)",
    ),
    TbsCategory.HSIL: (r"hsil", r"high[-\s]?grade\s+squamous\s+intraepithelial\s+lesions?"),
    TbsCategory.AGC: (r"agc", r"atypical\s+glandular\s+cells?"),
}
_TBS_COMPILED = [
    (cat, re.compile(rf"(?<![A-Za-z0-9]){p}(?![A-Za-z0-9])", re.I))
    for cat, pats in _TBS_PATTERNS.items()
    for p in pats
]


def extract_tbs_answer(raw: str) -> TbsCategory | str:
    """Map a reply to one TBS category, or ``UNPARSEABLE``.

    Longer matches claim their span first, so the full ASC-H name is not also
    read as HSIL. More than one distinct category is ambiguous.
    """
    if not raw or not raw.strip():
        return UNPARSEABLE
    spans = []
    for cat, pattern in _TBS_COMPILED:
        spans.extend((m.start(), m.end(), cat) for m in pattern.finditer(raw))
    spans.sort(key=lambda s: (-(s[1] - s[0]), s[0]))
    taken: list[tuple[int, int]] = []
    found = set()
    for start, end, cat in spans:
        if any(start < e and s < end for s, e in taken):
            continue
        taken.append((start, end))
        found.add(cat)
    if len(found) == 1:
        return found.pop()
    return UNPARSEABLE


# --- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    bench: str
    groups: list[str]
    per_group_accuracy: dict[str, float]
    group_counts: dict[str, int]
    macro_average: float | None
    confusion_matrix: dict[str, dict[str, int]]
    confusion_columns: list[str]
    n_items: int
    n_unparseable: int
    model_name: str = ""
    run_config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "bench": self.bench,
            "model_name": self.model_name,
            "run_config_hash": self.run_config_hash,
            "n_items": self.n_items,
            "n_unparseable": self.n_unparseable,
            "groups": self.groups,
            "group_counts": self.group_counts,
            "per_group_accuracy": self.per_group_accuracy,
            "macro_average": self.macro_average,
            "confusion_columns": self.confusion_columns,
            "confusion_matrix": self.confusion_matrix,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalReport":
        return cls(
            bench=data["bench"],
            groups=list(data["groups"]),
            per_group_accuracy=dict(data["per_group_accuracy"]),
            group_counts=dict(data["group_counts"]),
            macro_average=data["macro_average"],
            confusion_matrix={k: dict(v) for k, v in data["confusion_matrix"].items()},
            confusion_columns=list(data["confusion_columns"]),
            n_items=int(data["n_items"]),
            n_unparseable=int(data["n_unparseable"]),
            model_name=data.get("model_name", ""),
            run_config_hash=data.get("run_config_hash", ""),
        )


def _finish(bench, groups, correct, total, confusion, columns, n_unparseable, model_name, config_hash) -> EvalReport:
    per_group = {g: correct[g] / total[g] * 100.0 for g in groups if total[g]}
    macro = sum(per_group.values()) / len(per_group) if per_group else None
    return EvalReport(
        bench=bench,
        groups=list(groups),
        per_group_accuracy=per_group,
        group_counts={g: total[g] for g in groups if total[g]},
        macro_average=macro,
        confusion_matrix=confusion,
        confusion_columns=columns,
        n_items=sum(total.values()),
        n_unparseable=n_unparseable,
        model_name=model_name,
        run_config_hash=config_hash,
    )


def score_morpho(items: Sequence[MorphoBenchItem], predictions: Mapping[str, Verdict | str],
                 model_name: str = "", run_config_hash: str = "") -> EvalReport:
    """Score binary predictions keyed by item id; missing predictions count as unparseable."""
    groups = [d.code for d in MorphDimension]
    correct = dict.fromkeys(groups, 0)
    total = dict.fromkeys(groups, 0)
    columns = [Verdict.POSITIVE.value, Verdict.NEGATIVE.value, UNPARSEABLE]
    confusion: dict[str, dict[str, int]] = {}
    n_unparseable = 0
    for item in items:
        pred = predictions.get(item.item_id, UNPARSEABLE)
        code = item.dimension.code
        total[code] += 1
        row = confusion.setdefault(f"{code}:{item.ground_truth.value}", dict.fromkeys(columns, 0))
        if isinstance(pred, Verdict):
            row[pred.value] += 1
            correct[code] += pred is item.ground_truth
        else:
            row[UNPARSEABLE] += 1
            n_unparseable += 1
    ordered = {}
    for code in groups:
        for v in Verdict:
            key = f"{code}:{v.value}"
            if key in confusion:
                ordered[key] = confusion[key]
    return _finish("morpho", groups, correct, total, ordered, columns, n_unparseable, model_name, run_config_hash)


def score_tbs(items: Sequence[CytoBenchItem], predictions: Mapping[str, TbsCategory | str],
              model_name: str = "", run_config_hash: str = "") -> EvalReport:
    groups = [c.code for c in TbsCategory]
    correct = dict.fromkeys(groups, 0)
    total = dict.fromkeys(groups, 0)
    columns = groups + [UNPARSEABLE]
    confusion = {g: dict.fromkeys(columns, 0) for g in groups}
    n_unparseable = 0
    for item in items:
        pred = predictions.get(item.item_id, UNPARSEABLE)
        truth = item.ground_truth.code
        total[truth] += 1
        if isinstance(pred, TbsCategory):
            confusion[truth][pred.code] += 1
            correct[truth] += pred is item.ground_truth
        else:
            confusion[truth][UNPARSEABLE] += 1
            n_unparseable += 1
    return _finish("tbs", groups, correct, total, confusion, columns, n_unparseable, model_name, run_config_hash)


async def _query_all(items, model: EndpointConfig, build, client: ChatClient | None, base_dir) -> dict[str, str | None]:
    own = client is None
    client = client or ChatClient()

    async def one(item):
        try:
            image = await asyncio.to_thread(load_image_bytes, item.tile.uri, base_dir)
            reply = await client.send_chat(model, build(item, image))
            return reply.text
        except Exception:
            return None

    try:
        replies = await asyncio.gather(*(one(item) for item in items))
    finally:
        if own:
            await client.aclose()
    return {item.item_id: reply for item, reply in zip(items, replies)}


def morpho_prompt(template: str, dim: MorphDimension) -> str:
    return render_placeholders(template, {
        "dimension_name": dim.display_name.lower(),
        "positive_label": dim.positive_label,
        "negative_label": dim.negative_label,
    })


async def evaluate_morpho(items: Sequence[MorphoBenchItem], model: EndpointConfig,
                          prompt_template: str = DEFAULT_MORPHO_PROMPT, lexicon: Lexicon | None = None, *,
                          client: ChatClient | None = None, base_dir: str | Path | None = None,
                          request_options: Mapping[str, Any] | None = None) -> EvalReport:
    if not items:
        raise ValueError("evaluate_morpho needs at least one item")
    lexicon = lexicon or default_lexicon()
    opts = dict(request_options or {})

    def build(item: MorphoBenchItem, image: bytes) -> ChatRequest:
        return ChatRequest.simple("", morpho_prompt(prompt_template, item.dimension),
                                  [ImagePart(image, item.tile.media_type)], **opts)

    replies = await _query_all(items, model, build, client, base_dir)
    preds = {
        item.item_id: extract_binary_answer(replies[item.item_id] or "", item.dimension, lexicon)
        for item in items
    }
    run_hash = canonical_hash({"bench": "morpho", "model": model.model_name, "prompt": prompt_template,
                               "lexicon": lexicon.dumps(), "request": opts})
    return score_morpho(items, preds, model.model_name, run_hash)


async def evaluate_tbs(items: Sequence[CytoBenchItem], model: EndpointConfig,
                       prompt_template: str = DEFAULT_TBS_PROMPT, *,
                       client: ChatClient | None = None, base_dir: str | Path | None = None,
                       request_options: Mapping[str, Any] | None = None) -> EvalReport:
    if not items:
        raise ValueError("evaluate_tbs needs at least one item")
    opts = dict(request_options or {})
    prompt = render_placeholders(prompt_template, {"categories": ", ".join(c.code for c in TbsCategory)})

    def build(item: CytoBenchItem, image: bytes) -> ChatRequest:
        return ChatRequest.simple("", prompt, [ImagePart(image, item.tile.media_type)], **opts)

    replies = await _query_all(items, model, build, client, base_dir)
    preds = {item.item_id: extract_tbs_answer(replies[item.item_id] or "") for item in items}
    run_hash = canonical_hash({"bench": "tbs", "model": model.model_name, "prompt": prompt_template, "request": opts})
    return score_tbs(items, preds, model.model_name, run_hash)


# --- inter-rater agreement --------------------------------------------------

@dataclass(frozen=True)
class RaterAnnotations:
    rater_id: str
    verdicts: Mapping[str, Verdict]

    @classmethod
    def load(cls, path: str | Path) -> "RaterAnnotations":
        path = Path(path)
        verdicts: dict[str, Verdict] = {}
        rater_id = path.stem
        for row in read_jsonl(path):
            rater_id = str(row.get("rater_id", rater_id))
            if row["item_id"] in verdicts:
                raise ValueError(f"{path}: item {row['item_id']} rated twice")
            verdicts[str(row["item_id"])] = Verdict.parse(row["verdict"])
        return cls(rater_id, verdicts)


@dataclass
class AgreementReport:
    per_dimension: dict[str, float]
    pair_counts: dict[str, int]
    average: float | None
    n_raters: int

    def to_dict(self) -> dict:
        return {
            "per_dimension": self.per_dimension,
            "pair_counts": self.pair_counts,
            "average": self.average,
            "n_raters": self.n_raters,
        }


def item_agreement(verdicts: Sequence[Verdict]) -> float | None:
    """Fraction of rater pairs that agree on one item; None with fewer than two verdicts."""
    pairs = list(combinations(verdicts, 2))
    if not pairs:
        return None
    return sum(a is b for a, b in pairs) / len(pairs)


def inter_rater_agreement(raters: Sequence[RaterAnnotations], items: Sequence[MorphoBenchItem]) -> AgreementReport:
    """Pairwise percent agreement per dimension, pooled over all (item, rater-pair) comparisons."""
    if len(raters) < 2:
        raise InsufficientRaters(f"need at least 2 raters, got {len(raters)}")
    dims = {item.item_id: item.dimension for item in items}
    for r in raters:
        unknown = set(r.verdicts) - set(dims)
        if unknown:
            raise ValueError(f"rater {r.rater_id} rated unknown items: {sorted(unknown)[:5]}")
    agree = {d.code: 0 for d in MorphDimension}
    pairs = {d.code: 0 for d in MorphDimension}
    for item in items:
        votes = [r.verdicts[item.item_id] for r in raters if item.item_id in r.verdicts]
        for a, b in combinations(votes, 2):
            pairs[item.dimension.code] += 1
            agree[item.dimension.code] += a is b
    per_dim = {code: agree[code] / pairs[code] * 100.0 for code in pairs if pairs[code]}
    average = sum(per_dim.values()) / len(per_dim) if per_dim else None
    return AgreementReport(per_dim, {c: n for c, n in pairs.items() if n}, average, len(raters))


# --- rendering ---------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return PLACEHOLDER if value is None else f"{value:.1f}"


def render_table(method: str, groups: Sequence[str], values: Mapping[str, float], average: float | None) -> str:
    headers = ["Method", *groups, "Avg"]
    row = [method or "model", *(_fmt(values.get(g)) for g in groups), _fmt(average)]
    widths = [max(len(h), len(c)) for h, c in zip(headers, row)]
    line = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    )
    return line(headers) + "\n" + line(row)


def render_report(report: EvalReport, fmt: str = "table") -> str:
    if fmt in ("json", "machine", "machine-readable"):
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    title = "Classification accuracy (%)"
    out = [f"{title} [{report.bench}] n={report.n_items} unparseable={report.n_unparseable}",
           render_table(report.model_name, report.groups, report.per_group_accuracy, report.macro_average),
           "", "Confusion matrix (rows: truth, columns: prediction)"]
    cols = report.confusion_columns
    rows = list(report.confusion_matrix)
    w0 = max([len("truth")] + [len(r) for r in rows])
    widths = [max(len(c), 5) for c in cols]
    out.append("  ".join(["truth".ljust(w0), *(c.rjust(w) for c, w in zip(cols, widths))]))
    for r in rows:
        cells = [str(report.confusion_matrix[r].get(c, 0)).rjust(w) for c, w in zip(cols, widths)]
        out.append("  ".join([r.ljust(w0), *cells]))
    return "\n".join(out) + "\n"


def render_agreement(report: AgreementReport, fmt: str = "table") -> str:
    if fmt in ("json", "machine", "machine-readable"):
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    groups = [d.code for d in MorphDimension]
    return render_table("Inter-rater agreement", groups, report.per_dimension, report.average) + "\n"
