"""Benchmark fixtures whose scripted replies hit published per-group accuracies exactly."""

from __future__ import annotations

from pathlib import Path

from cytoconsensus.schema import MorphDimension, TbsCategory
from cytoconsensus.tiles import write_jsonl

from mock_llm import Call, data_uri

# Published per-group accuracies (percent) and their macro averages.
MORPHO_STRONG = {"NE": 91.2, "NA": 95.7, "NH": 90.8, "Koilocyte": 96.1, "CT": 75.2,
                   "Nucleolus": 94.1, "NC": 98.0, "NCR": 78.7, "NM": 80.8}
MORPHO_STRONG_AVG = 89.0
MORPHO_BASELINE = {"NE": 44.5, "NA": 66.7, "NH": 37.9, "Koilocyte": 65.2, "CT": 19.9,
               "Nucleolus": 73.9, "NC": 60.6, "NCR": 53.6, "NM": 55.8}
MORPHO_BASELINE_AVG = 53.1
TBS_STRONG = {"NILM": 100.0, "ASC-US": 75.1, "LSIL": 71.8, "ASC-H": 77.2, "HSIL": 73.5, "AGC": 83.8}
TBS_STRONG_AVG = 80.2
# Skewed class distribution, counts at one tenth of the reference set.
TBS_COUNTS_DESK = {"NILM": 1041, "ASC-US": 416, "LSIL": 234, "ASC-H": 599, "HSIL": 479, "AGC": 142}

N_PER_GROUP = 1000  # one decimal of percent is then an integer count


def morpho_fixture(row: dict[str, float], n: int = N_PER_GROUP) -> tuple[list[dict], dict[str, str]]:
    """Items plus the reply each item's image should get, hitting ``row`` exactly."""
    items, replies = [], {}
    for dim in MorphDimension:
        n_right = round(row[dim.code] * n / 100)
        for i in range(n):
            item_id = f"{dim.code}-{i:04d}"
            positive = i % 2 == 0
            items.append({"item_id": item_id, "uri": data_uri(item_id), "dimension": dim.code,
                          "ground_truth": "positive" if positive else "negative"})
            says_yes = positive if i < n_right else not positive
            label = dim.positive_label if says_yes else dim.negative_label
            replies[item_id] = f"{'Yes' if says_yes else 'No'}. The finding looks {label}."
    return items, replies


def tbs_fixture(row: dict[str, float] | None = None, counts: dict[str, int] | None = None,
                always: str | None = None) -> tuple[list[dict], dict[str, str]]:
    codes = [c.code for c in TbsCategory]
    items, replies = [], {}
    for k, code in enumerate(codes):
        n = counts[code] if counts else N_PER_GROUP
        n_right = round(row[code] * n / 100) if row else 0
        for i in range(n):
            item_id = f"{code}-{i:05d}"
            items.append({"item_id": item_id, "uri": data_uri(item_id), "ground_truth": code})
            if always is not None:
                replies[item_id] = always
            else:
                replies[item_id] = code if i < n_right else codes[(k + 1) % len(codes)]
    return items, replies


def by_image(replies: dict[str, str]):
    """Responder that answers according to the item id carried in the image bytes."""

    def responder(call: Call) -> str:
        return replies[call.images[0].decode("utf-8")]

    return responder


def write_config(path: Path, endpoints: list[dict], **extra) -> Path:
    import yaml

    data = {"endpoints": endpoints, **extra}
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return path


def write_items(path: Path, items: list[dict]) -> Path:
    write_jsonl(path, items)
    return path


# --- pipeline fixtures --------------------------------------------------------

ANNOTATORS = ("ann-a", "ann-b", "ann-c")


def annotator_text(model: str, tile_id: str) -> str:
    """Deterministic free-text caption; each annotator skips or flips some dimensions."""
    import hashlib

    from cytoconsensus.schema import Verdict, default_lexicon

    lex = default_lexicon()
    sentences = []
    for dim in MorphDimension:
        h = hashlib.sha256(f"{model}|{tile_id}|{dim.code}".encode()).digest()
        truth = hashlib.sha256(f"{tile_id}|{dim.code}".encode()).digest()[0] % 2
        if h[0] % 5 == 0:
            continue  # not addressed
        positive = truth if h[1] % 4 else 1 - truth
        phrases = lex.phrases(dim, Verdict.POSITIVE if positive else Verdict.NEGATIVE)
        sentences.append(f"The tile shows {phrases[h[2] % len(phrases)]}.")
    return " ".join(sentences)


def pipeline_mock(fail_tiles=(), expert_reply: str | None = None):
    """Mock annotators keyed on the tile id carried in the image bytes."""
    from mock_llm import MockLLM

    fail = set(fail_tiles)

    def annotator(model):
        def responder(call: Call):
            tile_id = call.images[0].decode("utf-8")
            return 500 if tile_id in fail else annotator_text(model, tile_id)
        return responder

    mock = MockLLM({m: annotator(m) for m in ANNOTATORS})
    if expert_reply is not None:
        mock.on("expert", lambda call: expert_reply)
    return mock


def pipeline_config(tmp: Path, *, shard_size=10, concurrency=4, expert=False, **extra) -> dict:
    eps = [{"id": m, "base_url": "http://mock/v1", "model_name": m, "max_retries": 0} for m in ANNOTATORS]
    data = {"endpoints": eps, "annotators": list(ANNOTATORS), "shard_size": shard_size,
            "concurrency": concurrency, "output_dir": str(tmp / "out"), **extra}
    if expert:
        eps.append({"id": "expert", "base_url": "http://mock/v1", "model_name": "expert", "max_retries": 0})
        data["expert"] = "expert"
    return data


def tile_rows(n: int) -> list[dict]:
    return [{"tile_id": f"t{i:03d}", "uri": data_uri(f"t{i:03d}"), "source_slide_id": "slide-1"} for i in range(n)]


FIXED_NOW = "2026-01-01T00:00:00+00:00"
