"""Command-line entry point: ``cytoconsensus <subcommand> ...``.

Exit codes: 0 success, 1 fatal runtime error, 2 usage or configuration error.
Every subcommand ends its output with a run summary; ``--format json`` prints a
single JSON document ``{"result": ..., "summary": ...}`` instead of text.
"""

from __future__ import annotations

import argparse
import asyncio
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import httpx
import yaml

from . import bench, pipeline, transforms
from .config import PipelineConfig, load_config
from .endpoints import ChatClient
from .exceptions import (
    AllStreamsEmpty,
    ConfigInvalid,
    InsufficientRaters,
    LexiconError,
    ManifestHashMismatch,
)
from .fusion import FusionPolicy
from .simulate import AnnotatorProfile, fused_accuracy_oracle, run_fusion_trial
from .tiles import read_jsonl, read_manifest, write_jsonl

log = logging.getLogger("cytoconsensus")

EXIT_OK, EXIT_FATAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunSummary:
    command: str
    started: str = field(default_factory=_now)
    finished: str = ""
    counts: dict[str, int] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    config_hash: str = ""
    exit_code: int = 0
    error: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "command": self.command,
            "started": self.started,
            "finished": self.finished,
            "counts": self.counts,
            "outputs": self.outputs,
            "config_hash": self.config_hash,
            "exit_code": self.exit_code,
        }
        if self.error:
            d["error"] = self.error
        d.update(self.extra)
        return d

    def render(self) -> str:
        lines = ["== run summary ==", f"command: {self.command}", f"started: {self.started}",
                 f"finished: {self.finished}"]
        for k, v in self.counts.items():
            lines.append(f"{k}: {v}")
        for k, v in self.extra.items():
            lines.append(f"{k}: {v if not isinstance(v, (list, dict)) else json.dumps(v)}")
        for p in self.outputs:
            lines.append(f"output: {p}")
        if self.config_hash:
            lines.append(f"config_hash: {self.config_hash}")
        if self.error:
            lines.append(f"error: {self.error}")
        lines.append(f"exit_code: {self.exit_code}")
        return "\n".join(lines)


# --- helpers ----------------------------------------------------------------

def _config(args) -> PipelineConfig:
    if not args.config:
        return PipelineConfig()
    return load_config(args.config)


def _client(args) -> ChatClient:
    return ChatClient(transport=getattr(args, "_transport", None))


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _endpoint(cfg: PipelineConfig, explicit: str | None, fallback, what: str):
    if explicit:
        return cfg.endpoint(explicit)
    if fallback is None:
        raise UsageError(f"no {what} endpoint: pass --{what} or set it in the config")
    return fallback


# --- subcommands ------------------------------------------------------------

def cmd_annotate(args, summary: RunSummary):
    if not args.config:
        raise UsageError("annotate requires --config")
    cfg = _config(args)
    tiles = read_manifest(_require_file(args.manifest, "manifest"))
    out = args.output_dir or cfg.output_dir
    if out is None:
        raise UsageError("no output directory: pass --output-dir or set output_dir in the config")

    async def go():
        async with _client(args) as client:
            return await pipeline.run_pipeline(tiles, cfg, resume=args.resume, output_dir=out, client=client)

    result = asyncio.run(go())
    summary.counts = {"succeeded": result.succeeded, "failed": result.failed, "skipped": result.skipped}
    summary.outputs = result.shard_paths + [result.manifest_path]
    summary.config_hash = result.config_hash
    if result.failed_tile_ids:
        summary.extra["failed_tile_ids"] = result.failed_tile_ids
    return result.to_dict(), None


def cmd_fuse(args, summary: RunSummary):
    cfg = _config(args)
    records = pipeline.read_dataset(_require_file(args.dataset, "dataset directory"))

    async def go():
        async with _client(args) as client:
            return await pipeline.refuse_dataset(records, cfg, client)

    fused = asyncio.run(go())
    n = write_jsonl(args.out, ({"tile_id": tid, "fused": f.to_dict()} for tid, f in fused))
    summary.counts = {"fused": n, "skipped": len(records) - n}
    summary.outputs = [str(args.out)]
    summary.config_hash = cfg.config_hash()
    return {"fused": n}, f"re-fused {n} records -> {args.out}"


def cmd_refine(args, summary: RunSummary):
    cfg = _config(args)
    expert = _endpoint(cfg, args.expert, cfg.expert, "expert")
    tiles = {t.tile_id: t for t in read_manifest(_require_file(args.manifest, "manifest"))}
    from .fusion import FusedDescription

    pairs = []
    for row in read_jsonl(_require_file(args.fused, "fused file")):
        if row["tile_id"] not in tiles:
            raise UsageError(f"tile {row['tile_id']} from fused file is not in the manifest")
        pairs.append((tiles[row["tile_id"]], FusedDescription.from_dict(row["fused"])))

    async def go():
        async with _client(args) as client:
            return await pipeline.refine_fused(pairs, expert, cfg, client)

    results = asyncio.run(go())
    ok = [(tid, r) for tid, r in results if not isinstance(r, Exception)]
    failed = [tid for tid, r in results if isinstance(r, Exception)]
    write_jsonl(args.out, ({"tile_id": tid, "final": r.to_dict()} for tid, r in ok))
    summary.counts = {"succeeded": len(ok), "failed": len(failed)}
    summary.outputs = [str(args.out)]
    if failed:
        summary.extra["failed_tile_ids"] = failed
    return {"succeeded": len(ok), "failed": failed}, f"refined {len(ok)} tiles -> {args.out}"


def cmd_reformat(args, summary: RunSummary):
    records = pipeline.read_dataset(_require_file(args.dataset, "dataset directory"))
    if args.templates:
        try:
            templates = transforms.load_templates(_require_file(args.templates, "template file"))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        templates = transforms.default_templates()
    result = transforms.reformat_instructions(records, templates, args.seed)
    write_jsonl(args.out, (s.to_dict() for s in result.samples))
    summary.counts = {"records": len(records), "samples": len(result.samples), "warnings": len(result.warnings)}
    summary.outputs = [str(args.out)]
    return {"samples": len(result.samples), "warnings": result.warnings}, None


def _parse_weights(text: str) -> tuple[float, float]:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--weights must be two numbers like 1,1 (got {text!r})") from None
    if len(parts) != 2 or any(w < 0 for w in parts):
        raise UsageError("--weights takes two non-negative numbers: domain,general")
    if sum(parts) <= 0:
        raise UsageError("--weights must not all be zero")
    return parts[0], parts[1]


def cmd_replay(args, summary: RunSummary):
    w_domain, w_general = _parse_weights(args.weights)
    if not args.domain and not args.general:
        raise UsageError("replay needs --domain and/or --general")
    cfg = _config(args)
    generator = _endpoint(cfg, args.generator, cfg.generator, "generator")
    records = pipeline.read_dataset(_require_file(args.domain, "domain dataset")) if args.domain else []
    general = read_manifest(_require_file(args.general, "general manifest")) if args.general else []

    async def go():
        async with _client(args) as client:
            dom = await transforms.generate_replay(records, generator, transforms.SampleOrigin.DOMAIN_REPLAY,
                                                   client=client, request_options=cfg.request_options)
            gen = await transforms.generate_replay(general, generator, transforms.SampleOrigin.GENERAL_REPLAY,
                                                   client=client, base_dir=cfg.base_dir,
                                                   request_options=cfg.request_options)
            return dom, gen

    (dom_samples, dom_sum), (gen_samples, gen_sum) = asyncio.run(go())
    try:
        mixed = transforms.mix_replay([(dom_samples, w_domain), (gen_samples, w_general)], args.seed)
    except AllStreamsEmpty:
        log.warning("no replay samples were produced")
        mixed = []
    write_jsonl(args.out, (s.to_dict() for s in mixed))
    summary.counts = {
        "domain_produced": dom_sum.produced,
        "general_produced": gen_sum.produced,
        "skipped": dom_sum.skipped + gen_sum.skipped,
        "mixed": len(mixed),
    }
    summary.outputs = [str(args.out)]
    summary.extra["generator_model"] = generator.model_name
    return {"domain": dom_sum.to_dict(), "general": gen_sum.to_dict(), "mixed": len(mixed)}, None


def cmd_eval(args, summary: RunSummary):
    cfg = _config(args)
    model = _endpoint(cfg, args.model, cfg.eval_model, "model")
    manifest = _require_file(args.manifest, "benchmark manifest")
    prompt = Path(args.prompt).read_text(encoding="utf-8") if args.prompt else None

    async def go():
        async with _client(args) as client:
            if args.bench == "morpho":
                items = bench.load_morpho_items(manifest)
                return await bench.evaluate_morpho(
                    items, model, prompt or bench.DEFAULT_MORPHO_PROMPT, cfg.lexicon, client=client,
                    base_dir=manifest.parent, request_options=cfg.request_options,
                )
            items = bench.load_cyto_items(manifest)
            return await bench.evaluate_tbs(
                items, model, prompt or bench.DEFAULT_TBS_PROMPT, client=client,
                base_dir=manifest.parent, request_options=cfg.request_options,
            )

    report = asyncio.run(go())
    summary.counts = {"items": report.n_items, "unparseable": report.n_unparseable}
    summary.config_hash = report.run_config_hash
    summary.extra["macro_average"] = None if report.macro_average is None else round(report.macro_average, 4)
    if args.out:
        Path(args.out).write_text(bench.render_report(report, "json") + "\n", encoding="utf-8")
        summary.outputs = [str(args.out)]
    return report.to_dict(), bench.render_report(report, "table")


def cmd_agreement(args, summary: RunSummary):
    if len(args.raters) < 2:
        raise UsageError(f"agreement needs at least 2 rater files, got {len(args.raters)}")
    items = bench.load_morpho_items(_require_file(args.manifest, "benchmark manifest"))
    raters = [bench.RaterAnnotations.load(_require_file(p, "rater file")) for p in args.raters]
    report = bench.inter_rater_agreement(raters, items)
    summary.counts = {"raters": len(raters), "pairs": sum(report.pair_counts.values())}
    summary.extra["average"] = None if report.average is None else round(report.average, 4)
    return report.to_dict(), bench.render_agreement(report, "table")


def _load_trial(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict) or "profiles" not in data:
        raise UsageError(f"{path}: trial config needs a 'profiles' list")
    return data


def cmd_simulate(args, summary: RunSummary):
    path = _require_file(args.trial, "trial config")
    data = _load_trial(path)
    try:
        profiles = [AnnotatorProfile.from_dict(p) for p in data["profiles"]]
        policy = FusionPolicy.from_dict(data.get("fusion"))
        n_cases = int(data.get("n_cases", 10000))
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if n_cases < 1 or not profiles:
        raise UsageError(f"{path}: need n_cases >= 1 and at least one profile")
    cfg = _config(args)
    result = run_fusion_trial(n_cases, profiles, policy, seed, cfg.lexicon)

    oracle = None
    accs = {tuple(sorted(p.accuracy.values())) for p in profiles}
    covs = {v for p in profiles for v in p.coverage.values()}
    if len(profiles) <= 5 and covs == {1.0} and all(len(set(a)) == 1 for a in accs):
        oracle = fused_accuracy_oracle(len(profiles), [next(iter(p.accuracy.values())) for p in profiles], policy)
    out = result.to_dict()
    out["oracle_fused_accuracy"] = oracle
    summary.counts = {"cases": n_cases, "annotators": len(profiles)}
    summary.extra["fused_accuracy"] = round(result.mean_fused_accuracy, 4)
    if oracle is not None:
        summary.extra["oracle_fused_accuracy"] = round(oracle, 4)
    lines = [bench.render_table("Fused", list(result.fused_accuracy),
                                {k: v * 100 for k, v in result.fused_accuracy.items()},
                                result.mean_fused_accuracy * 100)]
    for pid, acc in result.annotator_accuracy.items():
        lines.append(f"annotator {pid}: accuracy {acc:.4f}")
    lines.append(f"fused accuracy: {result.mean_fused_accuracy:.4f}")
    if oracle is not None:
        lines.append(f"oracle fused accuracy: {oracle:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        summary.outputs = [str(args.out)]
    return out, "\n".join(lines)


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (YAML or JSON)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity (default WARNING)")
    common.add_argument("--format", default="text", choices=["text", "json", "table"],
                        help="output format; json prints one machine-readable document")

    parser = argparse.ArgumentParser(prog="cytoconsensus", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", parents=[common], help="run the three-stage captioning pipeline")
    p.add_argument("--manifest", required=True, help="tile manifest (JSONL of ImageTile)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p.add_argument("--output-dir", help="dataset directory (overrides config output_dir)")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("fuse", parents=[common], help="re-run consensus fusion from saved Stage-1 replies")
    p.add_argument("--dataset", required=True, help="dataset directory written by annotate")
    p.add_argument("--out", required=True, help="output JSONL of fused descriptions")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", parents=[common], help="run expert refinement over fused descriptions")
    p.add_argument("--fused", required=True, help="JSONL from the fuse subcommand")
    p.add_argument("--manifest", required=True, help="tile manifest for image lookup")
    p.add_argument("--expert", help="expert endpoint id (default: config expert)")
    p.add_argument("--out", required=True, help="output JSONL of final descriptions")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("reformat", parents=[common], help="turn dataset records into instruction dialogues")
    p.add_argument("--dataset", required=True, help="dataset directory written by annotate")
    p.add_argument("--templates", help="template JSONL (default: shipped templates)")
    p.add_argument("--seed", type=int, default=0, help="seed for template draws")
    p.add_argument("--out", required=True, help="output JSONL of instruction samples")
    p.set_defaults(func=cmd_reformat)

    p = sub.add_parser("replay", parents=[common], help="generate and mix knowledge-replay samples")
    p.add_argument("--domain", help="dataset directory supplying domain narratives")
    p.add_argument("--general", help="tile manifest of general-domain images")
    p.add_argument("--weights", default="1,1", help="mixing weights domain,general (default 1,1)")
    p.add_argument("--seed", type=int, default=0, help="mixing seed")
    p.add_argument("--generator", help="generator endpoint id (default: config generator)")
    p.add_argument("--out", required=True, help="output JSONL of mixed samples")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("eval", parents=[common], help="score a model on a benchmark manifest")
    p.add_argument("--bench", required=True, choices=["morpho", "tbs"], help="benchmark kind")
    p.add_argument("--manifest", required=True, help="benchmark manifest JSONL")
    p.add_argument("--model", help="endpoint id to evaluate (default: config eval_model)")
    p.add_argument("--prompt", help="prompt template file")
    p.add_argument("--out", help="also write the machine-readable report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agreement", parents=[common], help="pairwise inter-rater agreement per dimension")
    p.add_argument("raters", nargs="+", help="rater files (JSONL of item_id, verdict)")
    p.add_argument("--manifest", required=True, help="morphology benchmark manifest")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("simulate", parents=[common], help="run a synthetic fusion trial")
    p.add_argument("trial", help="trial config (YAML): n_cases, seed, profiles, fusion")
    p.add_argument("--out", help="write the trial result JSON here")
    p.set_defaults(func=cmd_simulate)
    return parser


_USAGE_ERRORS = (UsageError, ConfigInvalid, ManifestHashMismatch, InsufficientRaters, LexiconError,
                 FileNotFoundError, KeyError, ValueError)


def main(argv: list[str] | None = None, *, transport: httpx.AsyncBaseTransport | None = None,
         stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args._transport = transport
    summary = RunSummary(args.command)
    result: Any = None
    text: str | None = None
    func: Callable = args.func
    try:
        result, text = func(args, summary)
    except KeyboardInterrupt:
        summary.exit_code, summary.error = EXIT_FATAL, "interrupted"
    except _USAGE_ERRORS as exc:
        summary.exit_code, summary.error = EXIT_USAGE, f"{type(exc).__name__}: {exc}"
    except Exception as exc:
        log.debug("fatal error", exc_info=True)
        summary.exit_code, summary.error = EXIT_FATAL, f"{type(exc).__name__}: {exc}"
    summary.finished = _now()
    if summary.error:
        print(f"cytoconsensus {args.command}: {summary.error}", file=sys.stderr)
    if args.format == "json":
        print(json.dumps({"result": result, "summary": summary.to_dict()}, indent=2, sort_keys=True), file=stdout)
    else:
        if text:
            print(text.rstrip("\n"), file=stdout)
            print(file=stdout)
        print(summary.render(), file=stdout)
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
