"""Synthetic weak annotators for exercising the parse and fusion path offline.

Randomness comes from NumPy's PCG64 bit generator (``numpy.random.default_rng``)
seeded with integer lists, which is stable across platforms. Each simulated
caption is seeded by ``(profile seed, SHA-256 of case id)``, so any case range
can be simulated independently and the totals merged by summation.

Annotator errors are independent across annotators and dimensions. Real model
errors correlate, so trial results are contract checks, not predictions of real
fusion gains.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .bench import UNPARSEABLE, EvalReport
from .exceptions import ConfigInvalid
from .fusion import FusionPolicy, fuse_consensus
from .schema import Lexicon, MorphDimension, StructuredCaption, TbsCategory, Verdict, default_lexicon, parse_structured_caption

_DIMS = tuple(MorphDimension)
DEFAULT_VERBOSITY = ("Finding: {phrase}.", "The tile shows {phrase}.", "Noted: {phrase}.")
EMPTY_TEXT = "No specific findings are described for this tile."


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _per_dim(value: float | Mapping[Any, float], what: str) -> dict[MorphDimension, float]:
    if isinstance(value, Mapping):
        out = {MorphDimension.from_code(k) if not isinstance(k, MorphDimension) else k: float(v)
               for k, v in value.items()}
        missing = set(MorphDimension) - set(out)
        if missing:
            raise ConfigInvalid(f"{what}: missing dimensions {sorted(d.code for d in missing)}")
    else:
        out = dict.fromkeys(MorphDimension, float(value))
    for d, v in out.items():
        if not 0.0 <= v <= 1.0:
            raise ConfigInvalid(f"{what} for {d.code} must be in [0, 1], got {v}")
    return out


@dataclass(frozen=True)
class AnnotatorProfile:
    profile_id: str
    accuracy: Mapping[MorphDimension, float]
    coverage: Mapping[MorphDimension, float]
    verbosity: tuple[str, ...] = DEFAULT_VERBOSITY
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "accuracy", _per_dim(self.accuracy, "accuracy"))
        object.__setattr__(self, "coverage", _per_dim(self.coverage, "coverage"))
        if not self.verbosity or any("{phrase}" not in t for t in self.verbosity):
            raise ConfigInvalid("verbosity templates must each contain {phrase}")

    @classmethod
    def uniform(cls, profile_id: str, accuracy: float, coverage: float = 1.0, seed: int = 0) -> "AnnotatorProfile":
        return cls(profile_id, accuracy, coverage, seed=seed)  # type: ignore[arg-type]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnnotatorProfile":
        try:
            return cls(
                profile_id=str(data["profile_id"]),
                accuracy=data["accuracy"],
                coverage=data.get("coverage", 1.0),
                verbosity=tuple(data.get("verbosity", DEFAULT_VERBOSITY)),
                seed=int(data.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigInvalid(f"annotator profile missing key {exc}") from None


@dataclass(frozen=True)
class SyntheticCase:
    case_id: str
    truth: Mapping[MorphDimension, Verdict]
    tbs: TbsCategory

    def __post_init__(self):
        if set(self.truth) != set(MorphDimension):
            raise ValueError("synthetic case needs a verdict for all nine dimensions")


def make_cases(n_cases: int, seed: int) -> list[SyntheticCase]:
    rng = np.random.default_rng([seed, 0x5EED])
    bits = rng.integers(0, 2, size=(n_cases, len(MorphDimension)))
    cats = rng.integers(0, len(TbsCategory), size=n_cases)
    dims = list(MorphDimension)
    tbs = list(TbsCategory)
    return [
        SyntheticCase(
            f"s{seed}-c{i}",
            {d: Verdict.POSITIVE if bits[i, j] else Verdict.NEGATIVE for j, d in enumerate(dims)},
            tbs[cats[i]],
        )
        for i in range(n_cases)
    ]


def render_annotator_text(case: SyntheticCase, profile: AnnotatorProfile, lexicon: Lexicon) -> str:
    rng = np.random.default_rng([profile.seed, _stable_int(case.case_id)])
    draws = rng.random((len(_DIMS), 4)).tolist()
    sentences = []
    for dim, (u_cover, u_correct, u_phrase, u_template) in zip(_DIMS, draws):
        if u_cover >= profile.coverage[dim]:
            continue
        truth = case.truth[dim]
        verdict = truth if u_correct < profile.accuracy[dim] else truth.flipped()
        phrases = lexicon._phrases.get((dim, verdict))
        if not phrases:
            raise ConfigInvalid(f"lexicon has no {verdict.value} phrase for {dim.code}")
        phrase = phrases[int(u_phrase * len(phrases))]
        template = profile.verbosity[int(u_template * len(profile.verbosity))]
        sentences.append(template.replace("{phrase}", phrase))
    return " ".join(sentences) if sentences else EMPTY_TEXT


def simulate_annotator(case: SyntheticCase, profile: AnnotatorProfile, lexicon: Lexicon | None = None) -> StructuredCaption:
    """Render a caption as text and read it back through the lexicon parser."""
    lexicon = lexicon or default_lexicon()
    return parse_structured_caption(render_annotator_text(case, profile, lexicon), lexicon)


def fused_accuracy_oracle(n_annotators: int, accuracy: float | Sequence[float], policy: FusionPolicy | None = None) -> float:
    """Exact probability that fusion returns the true verdict on one dimension.

    Enumerates all ``2**n`` right/wrong patterns of fully-covering annotators.
    A tie or a below-threshold winner yields no consensus, which counts as wrong.
    """
    policy = policy or FusionPolicy()
    if not 1 <= n_annotators <= 5:
        raise ValueError("oracle supports 1 to 5 annotators")
    ps = [float(accuracy)] * n_annotators if not isinstance(accuracy, Sequence) else [float(p) for p in accuracy]
    if len(ps) != n_annotators:
        raise ValueError("one accuracy per annotator required")
    if n_annotators < policy.min_coverage:
        return 0.0
    total = 0.0
    for pattern in itertools.product((True, False), repeat=n_annotators):
        prob = math.prod(p if ok else 1.0 - p for ok, p in zip(pattern, ps))
        right = sum(pattern)
        wrong = n_annotators - right
        if right <= wrong:
            continue
        if policy.min_votes is not None and right < policy.min_votes:
            continue
        total += prob
    return total


@dataclass
class TrialResult:
    n_cases: int
    seed: int
    fused_accuracy: dict[str, float]
    annotator_accuracy: dict[str, float]
    missing_rate: dict[str, float]
    confusion: dict[str, dict[str, int]] = field(repr=False, default_factory=dict)

    @property
    def mean_fused_accuracy(self) -> float:
        return sum(self.fused_accuracy.values()) / len(self.fused_accuracy)

    def to_report(self) -> EvalReport:
        groups = [d.code for d in MorphDimension]
        n_missing = sum(row[UNPARSEABLE] for row in self.confusion.values())
        return EvalReport(
            bench="fusion-trial",
            groups=groups,
            per_group_accuracy={g: self.fused_accuracy[g] * 100.0 for g in groups},
            group_counts=dict.fromkeys(groups, self.n_cases),
            macro_average=self.mean_fused_accuracy * 100.0,
            confusion_matrix=self.confusion,
            confusion_columns=[Verdict.POSITIVE.value, Verdict.NEGATIVE.value, UNPARSEABLE],
            n_items=self.n_cases * len(groups),
            n_unparseable=n_missing,
            model_name="fused",
            run_config_hash="",
        )

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "seed": self.seed,
            "fused_accuracy": self.fused_accuracy,
            "mean_fused_accuracy": self.mean_fused_accuracy,
            "annotator_accuracy": self.annotator_accuracy,
            "missing_rate": self.missing_rate,
            "report": self.to_report().to_dict(),
        }


def run_fusion_trial(n_cases: int, profiles: Sequence[AnnotatorProfile], policy: FusionPolicy | None = None,
                     seed: int = 0, lexicon: Lexicon | None = None) -> TrialResult:
    """Simulate annotators over synthetic cases and score the real parse-and-fuse output."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if not profiles:
        raise ValueError("at least one annotator profile required")
    ids = [p.profile_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate profile ids")
    policy = policy or FusionPolicy()
    lexicon = lexicon or default_lexicon()
    dims = list(MorphDimension)
    fused_ok = dict.fromkeys(dims, 0)
    missing = dict.fromkeys(dims, 0)
    annot_ok = dict.fromkeys(ids, 0)
    columns = [Verdict.POSITIVE.value, Verdict.NEGATIVE.value, UNPARSEABLE]
    confusion = {f"{d.code}:{v.value}": dict.fromkeys(columns, 0) for d in dims for v in Verdict}
    for case in make_cases(n_cases, seed):
        captions = [(p.profile_id, simulate_annotator(case, p, lexicon)) for p in profiles]
        for pid, cap in captions:
            annot_ok[pid] += sum(1 for d, a in cap.assertions.items() if a.verdict is case.truth[d])
        fused = fuse_consensus(captions, policy)
        for d in dims:
            row = confusion[f"{d.code}:{case.truth[d].value}"]
            a = fused.consensus.get(d)
            if a is None:
                missing[d] += 1
                row[UNPARSEABLE] += 1
                continue
            row[a.verdict.value] += 1
            fused_ok[d] += a.verdict is case.truth[d]
    n_judgements = n_cases * len(dims)
    return TrialResult(
        n_cases=n_cases,
        seed=seed,
        fused_accuracy={d.code: fused_ok[d] / n_cases for d in dims},
        annotator_accuracy={pid: annot_ok[pid] / n_judgements for pid in ids},
        missing_rate={d.code: missing[d] / n_cases for d in dims},
        confusion={k: v for k, v in confusion.items()},
    )
