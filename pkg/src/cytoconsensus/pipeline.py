"""End-to-end dataset generation: fan-out, parse, fuse, refine, persist.

Records are written as line-delimited JSON shards (``shard-000000.jsonl`` ...)
next to ``dataset_manifest.json`` and ``checkpoint.json``. Shard files are
written atomically and the checkpoint is rewritten only after a shard flush, so
a crash loses at most the current unflushed shard.
"""

from __future__ import annotations

import asyncio
import collections
import datetime as _dt
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .config import PipelineConfig, dimension_list
from .endpoints import ChatClient, ChatRequest, EndpointConfig, ImagePart
from .exceptions import ConfigInvalid, EmptyCaption, ManifestHashMismatch, ShardWriteFailure
from .fusion import FusedDescription, fuse_consensus, render_placeholders, summarize_narrative, with_narrative
from .refine import FinalDescription, from_consensus, refine_expert
from .schema import StructuredCaption, parse_structured_caption
from .tiles import ImageTile, check_unique, dumps_line, load_image_bytes, manifest_hash

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.json"
DATASET_MANIFEST_NAME = "dataset_manifest.json"


def shard_name(index: int) -> str:
    return f"shard-{index:06d}.jsonl"


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class DatasetRecord:
    tile_id: str
    uri: str
    final: FinalDescription
    stage1_raw: tuple[tuple[str, str], ...]
    fused: FusedDescription
    pipeline_config_hash: str
    created_at: str
    stage1_errors: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "uri": self.uri,
            "final": self.final.to_dict(),
            "stage1_raw": [{"endpoint_id": e, "text": t} for e, t in self.stage1_raw],
            "stage1_errors": [{"endpoint_id": e, "error": m} for e, m in self.stage1_errors],
            "fused": self.fused.to_dict(),
            "pipeline_config_hash": self.pipeline_config_hash,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetRecord":
        return cls(
            tile_id=data["tile_id"],
            uri=data.get("uri", ""),
            final=FinalDescription.from_dict(data["final"]),
            stage1_raw=tuple((r["endpoint_id"], r["text"]) for r in data.get("stage1_raw", [])),
            fused=FusedDescription.from_dict(data["fused"]),
            pipeline_config_hash=data.get("pipeline_config_hash", ""),
            created_at=data.get("created_at", ""),
            stage1_errors=tuple((r["endpoint_id"], r["error"]) for r in data.get("stage1_errors", [])),
        )


@dataclass
class Checkpoint:
    manifest_hash: str
    completed_tile_ids: set[str] = field(default_factory=set)
    failed_tile_ids: set[str] = field(default_factory=set)
    shard_index: int = 0
    records_in_current_shard: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "manifest_hash": self.manifest_hash,
            "config_hash": self.config_hash,
            "shard_index": self.shard_index,
            "records_in_current_shard": self.records_in_current_shard,
            "completed_tile_ids": sorted(self.completed_tile_ids),
            "failed_tile_ids": sorted(self.failed_tile_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Checkpoint":
        return cls(
            manifest_hash=data["manifest_hash"],
            completed_tile_ids=set(data.get("completed_tile_ids", [])),
            failed_tile_ids=set(data.get("failed_tile_ids", [])),
            shard_index=int(data.get("shard_index", 0)),
            records_in_current_shard=int(data.get("records_in_current_shard", 0)),
            config_hash=data.get("config_hash", ""),
        )

    @classmethod
    def load(cls, path: Path) -> "Checkpoint | None":
        if not path.exists():
            return None
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def save(self, path: Path) -> None:
        atomic_write(path, (json.dumps(self.to_dict(), indent=1) + "\n").encode("utf-8"))


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ShardWriter:
    """Single-writer sink that splits lines into fixed-size shards.

    ``flush()`` writes the current shard (full or partial) atomically and rewrites
    the dataset manifest; a full shard advances the shard index.
    """

    def __init__(self, output_dir: str | Path, shard_size: int, *, shard_index: int = 0,
                 buffer: Sequence[str] = ()):
        if shard_size < 1:
            raise ValueError("shard_size must be >= 1")
        self.output_dir = Path(output_dir)
        self.shard_size = shard_size
        self.shard_index = shard_index
        self.buffer: list[str] = list(buffer)
        self.shards: dict[int, dict] = {}
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def resume(cls, output_dir: str | Path, shard_size: int, shard_index: int, records_in_current: int) -> "ShardWriter":
        output_dir = Path(output_dir)
        buffer: list[str] = []
        if records_in_current:
            path = output_dir / shard_name(shard_index)
            lines = path.read_text(encoding="utf-8").splitlines()
            if len(lines) < records_in_current:
                raise ManifestHashMismatch(f"{path} holds fewer records than the checkpoint claims")
            buffer = lines[:records_in_current]
        writer = cls(output_dir, shard_size, shard_index=shard_index, buffer=buffer)
        for i in range(shard_index):
            path = output_dir / shard_name(i)
            if not path.exists():
                raise ManifestHashMismatch(f"checkpoint references missing shard {path}")
            writer.shards[i] = _shard_info(path, path.read_bytes())
        return writer

    @property
    def is_full(self) -> bool:
        return len(self.buffer) >= self.shard_size

    def add(self, line: str) -> bool:
        """Buffer one line; returns True when this filled the shard and it was flushed."""
        self.buffer.append(line)
        if self.is_full:
            self.flush()
            return True
        return False

    def flush(self) -> Path | None:
        if not self.buffer:
            return None
        path = self.output_dir / shard_name(self.shard_index)
        data = ("\n".join(self.buffer) + "\n").encode("utf-8")
        try:
            atomic_write(path, data)
            self.shards[self.shard_index] = _shard_info(path, data)
            self._write_manifest()
        except OSError as exc:
            raise ShardWriteFailure(path, exc) from exc
        if self.is_full:
            self.shard_index += 1
            self.buffer = []
        return path

    def _write_manifest(self) -> None:
        shards = [self.shards[i] for i in sorted(self.shards)]
        doc = {
            "shards": shards,
            "record_counts": [s["records"] for s in shards],
            "total_records": sum(s["records"] for s in shards),
        }
        atomic_write(self.output_dir / DATASET_MANIFEST_NAME, (json.dumps(doc, indent=1) + "\n").encode("utf-8"))

    def manifest(self) -> dict:
        if not self.shards:
            self._write_manifest()
        return json.loads((self.output_dir / DATASET_MANIFEST_NAME).read_text(encoding="utf-8"))

    @property
    def records_in_current_shard(self) -> int:
        return len(self.buffer)

    def shard_paths(self) -> list[Path]:
        return [self.output_dir / self.shards[i]["file"] for i in sorted(self.shards)]


def _shard_info(path: Path, data: bytes) -> dict:
    return {
        "file": path.name,
        "records": data.count(b"\n"),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def shard_writer(records: Iterable[Any], shard_size: int, output_dir: str | Path) -> dict:
    """Write ``records`` (dicts or objects with ``to_dict``) into shards; return the dataset manifest."""
    writer = ShardWriter(output_dir, shard_size)
    for rec in records:
        writer.add(dumps_line(rec.to_dict() if hasattr(rec, "to_dict") else rec))
    writer.flush()
    return writer.manifest()


def read_dataset(dataset_dir: str | Path) -> list[DatasetRecord]:
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / DATASET_MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {dataset_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    records = []
    for shard in manifest["shards"]:
        with open(dataset_dir / shard["file"], encoding="utf-8") as fh:
            records.extend(DatasetRecord.from_dict(json.loads(line)) for line in fh if line.strip())
    return records


@dataclass
class PipelineSummary:
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    failed_tile_ids: list[str] = field(default_factory=list)
    shard_paths: list[str] = field(default_factory=list)
    manifest_path: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "succeeded": self.succeeded,
            "failed": self.failed,
            "skipped": self.skipped,
            "failed_tile_ids": self.failed_tile_ids,
            "shard_paths": self.shard_paths,
            "manifest_path": self.manifest_path,
            "config_hash": self.config_hash,
        }


@dataclass
class _TileFailure:
    tile_id: str
    reason: str


def annotator_request(config: PipelineConfig, image: bytes, media_type: str) -> ChatRequest:
    text = render_placeholders(config.prompts["annotator_user"], {"dimension_list": dimension_list()})
    return ChatRequest.simple(
        config.prompts["annotator_system"], text, [ImagePart(image, media_type)], **config.request_options
    )


def parse_or_empty(text: str, config: PipelineConfig) -> StructuredCaption:
    try:
        return parse_structured_caption(text, config.lexicon)
    except EmptyCaption:
        return StructuredCaption({}, text)


async def fuse_texts(raw: Sequence[tuple[str, str]], config: PipelineConfig, client: ChatClient) -> FusedDescription:
    captions = [(eid, parse_or_empty(text, config)) for eid, text in raw]
    fused = fuse_consensus(captions, config.policy)
    narrative = await summarize_narrative(
        fused, [t for _, t in sorted(raw)], config.policy.integrator, client=client,
        prompt_template=config.prompts["integrator"], request_options=config.request_options,
    )
    return with_narrative(fused, narrative)


async def process_tile(tile: ImageTile, config: PipelineConfig, client: ChatClient,
                       now: Callable[[], str]) -> DatasetRecord | _TileFailure:
    try:
        image = await asyncio.to_thread(load_image_bytes, tile.uri, config.base_dir)
    except Exception as exc:
        return _TileFailure(tile.tile_id, f"cannot load image: {exc}")
    request = annotator_request(config, image, tile.media_type)
    slots = await client.fan_out(config.annotators, lambda ep: request)
    raw = tuple((eid, res.text) for eid, res in slots if not isinstance(res, Exception))
    errors = tuple((eid, str(res)) for eid, res in slots if isinstance(res, Exception))
    if not raw:
        return _TileFailure(tile.tile_id, "all annotators failed: " + "; ".join(m for _, m in errors))
    try:
        fused = await fuse_texts(raw, config, client)
        if config.expert is not None:
            final = await refine_expert(
                image, fused, config.expert, config.lexicon, client=client, media_type=tile.media_type,
                prompt_template=config.prompts["expert"], request_options=config.request_options,
            )
        else:
            final = from_consensus(fused)
    except Exception as exc:
        return _TileFailure(tile.tile_id, f"stage 2/3 failed: {exc}")
    return DatasetRecord(tile.tile_id, tile.uri, final, raw, fused, config.config_hash(), now(), errors)


async def run_pipeline(
    manifest: Sequence[ImageTile],
    config: PipelineConfig,
    resume: bool = False,
    *,
    output_dir: str | Path | None = None,
    client: ChatClient | None = None,
    now: Callable[[], str] = _utc_now,
    on_flush: Callable[[Checkpoint], None] | None = None,
) -> PipelineSummary:
    """Run all three stages over ``manifest`` and persist shards.

    Tiles are handled up to ``config.concurrency`` at a time but committed in
    manifest order. A tile whose annotators all fail is recorded as failed and
    skipped. ``on_flush`` is called after every durable checkpoint update.
    """
    if not manifest:
        raise ConfigInvalid("manifest is empty")
    if not config.annotators:
        raise ConfigInvalid("no Stage-1 annotator endpoints configured")
    check_unique([t.tile_id for t in manifest], "tile_id")
    out = Path(output_dir or config.output_dir or "")
    if not str(out):
        raise ConfigInvalid("no output directory configured")
    out.mkdir(parents=True, exist_ok=True)

    m_hash = manifest_hash(manifest)
    c_hash = config.config_hash()
    ckpt_path = out / CHECKPOINT_NAME
    existing = Checkpoint.load(ckpt_path)
    if resume:
        if existing is None:
            raise ManifestHashMismatch(f"--resume given but no checkpoint found at {ckpt_path}")
        if existing.manifest_hash != m_hash:
            raise ManifestHashMismatch(
                f"checkpoint manifest hash {existing.manifest_hash[:12]} does not match manifest {m_hash[:12]}"
            )
        if existing.config_hash and existing.config_hash != c_hash:
            log.warning("pipeline config changed since checkpoint; resumed records carry the new config hash")
        ckpt = existing
        writer = ShardWriter.resume(out, config.shard_size, ckpt.shard_index, ckpt.records_in_current_shard)
    else:
        if existing is not None:
            raise ConfigInvalid(f"{ckpt_path} already exists; pass resume=True or use a fresh output directory")
        ckpt = Checkpoint(m_hash, config_hash=c_hash)
        writer = ShardWriter(out, config.shard_size)

    done = ckpt.completed_tile_ids | ckpt.failed_tile_ids
    pending = [t for t in manifest if t.tile_id not in done]
    summary = PipelineSummary(skipped=len(manifest) - len(pending), config_hash=c_hash)
    uncommitted_ok: list[str] = []
    uncommitted_failed: list[str] = []

    def commit() -> None:
        ckpt.completed_tile_ids.update(uncommitted_ok)
        ckpt.failed_tile_ids.update(uncommitted_failed)
        ckpt.completed_tile_ids.update(uncommitted_failed)
        uncommitted_ok.clear()
        uncommitted_failed.clear()
        ckpt.shard_index = writer.shard_index
        ckpt.records_in_current_shard = writer.records_in_current_shard
        ckpt.config_hash = c_hash
        ckpt.save(ckpt_path)
        if on_flush is not None:
            on_flush(ckpt)

    own_client = client is None
    client = client or ChatClient()
    window: collections.deque[asyncio.Task] = collections.deque()
    queue = iter(pending)
    try:
        for tile in queue:
            window.append(asyncio.create_task(process_tile(tile, config, client, now)))
            if len(window) >= config.concurrency:
                break
        while window:
            result = await window.popleft()
            nxt = next(queue, None)
            if nxt is not None:
                window.append(asyncio.create_task(process_tile(nxt, config, client, now)))
            if isinstance(result, _TileFailure):
                log.warning("tile %s failed: %s", result.tile_id, result.reason)
                summary.failed += 1
                summary.failed_tile_ids.append(result.tile_id)
                uncommitted_failed.append(result.tile_id)
                continue
            summary.succeeded += 1
            uncommitted_ok.append(result.tile_id)
            if writer.add(dumps_line(result.to_dict())):
                commit()
        writer.flush()
        commit()
    except (asyncio.CancelledError, KeyboardInterrupt):
        log.warning("interrupted; flushing partial shard and checkpoint")
        for task in window:
            task.cancel()
        writer.flush()
        commit()
        raise
    finally:
        for task in window:
            task.cancel()
        if own_client:
            await client.aclose()

    summary.shard_paths = [str(p) for p in writer.shard_paths()]
    summary.manifest_path = str(writer.output_dir / DATASET_MANIFEST_NAME)
    writer.manifest()
    return summary


async def refuse_dataset(records: Iterable[DatasetRecord], config: PipelineConfig,
                         client: ChatClient | None = None) -> list[tuple[str, FusedDescription]]:
    """Re-run Stage 2 from the saved Stage-1 replies of existing records."""
    own = client is None
    client = client or ChatClient()
    try:
        out = []
        for rec in records:
            if not rec.stage1_raw:
                continue
            out.append((rec.tile_id, await fuse_texts(rec.stage1_raw, config, client)))
        return out
    finally:
        if own:
            await client.aclose()


async def refine_fused(items: Iterable[tuple[ImageTile, FusedDescription]], expert: EndpointConfig,
                       config: PipelineConfig, client: ChatClient | None = None) -> list[tuple[str, FinalDescription | Exception]]:
    own = client is None
    client = client or ChatClient()
    try:
        async def one(tile: ImageTile, fused: FusedDescription):
            try:
                image = await asyncio.to_thread(load_image_bytes, tile.uri, config.base_dir)
                return await refine_expert(
                    image, fused, expert, config.lexicon, client=client, media_type=tile.media_type,
                    prompt_template=config.prompts["expert"], request_options=config.request_options,
                )
            except Exception as exc:
                return exc

        pairs = list(items)
        results = await asyncio.gather(*(one(t, f) for t, f in pairs))
        return [(t.tile_id, r) for (t, _), r in zip(pairs, results)]
    finally:
        if own:
            await client.aclose()
