"""Image tiles, line-delimited JSON helpers and content hashing."""

from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import httpx


@dataclass(frozen=True)
class ImageTile:
    tile_id: str
    uri: str
    source_slide_id: str = ""
    region: tuple[int, int, int, int] | None = None
    media_type: str = ""

    def __post_init__(self):
        if not self.tile_id:
            raise ValueError("tile_id must be non-empty")
        if self.region is not None:
            region = tuple(int(v) for v in self.region)
            if len(region) != 4:
                raise ValueError(f"tile {self.tile_id}: region must be (x, y, width, height)")
            if region[2] <= 0 or region[3] <= 0:
                raise ValueError(f"tile {self.tile_id}: region width and height must be > 0")
            object.__setattr__(self, "region", region)
        if not self.media_type:
            object.__setattr__(self, "media_type", guess_media_type(self.uri))

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "uri": self.uri,
            "source_slide_id": self.source_slide_id,
            "region": list(self.region) if self.region else None,
            "media_type": self.media_type,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ImageTile":
        region = data.get("region")
        return cls(
            tile_id=str(data["tile_id"]),
            uri=str(data["uri"]),
            source_slide_id=str(data.get("source_slide_id", "")),
            region=tuple(region) if region else None,
            media_type=str(data.get("media_type") or ""),
        )


def guess_media_type(uri: str) -> str:
    if uri.startswith("data:"):
        return uri[5:].split(";", 1)[0].split(",", 1)[0] or "application/octet-stream"
    guessed, _ = mimetypes.guess_type(urllib.parse.urlparse(uri).path or uri)
    return guessed or "image/png"


def load_image_bytes(uri: str, base_dir: str | Path | None = None) -> bytes:
    """Read image bytes from a file path, ``file://``, ``data:`` or http(s) URI."""
    if uri.startswith("data:"):
        header, _, payload = uri.partition(",")
        if header.endswith(";base64"):
            return base64.b64decode(payload)
        return urllib.parse.unquote_to_bytes(payload)
    parsed = urllib.parse.urlparse(uri)
    if parsed.scheme in ("http", "https"):
        resp = httpx.get(uri, timeout=60.0, follow_redirects=True)
        resp.raise_for_status()
        return resp.content
    if parsed.scheme == "file":
        path = Path(urllib.parse.unquote(parsed.path))
    else:
        path = Path(uri)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
    return path.read_bytes()


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, rows: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_line(row) + "\n")
            n += 1
    return n


def read_manifest(path: str | Path) -> list[ImageTile]:
    tiles = [ImageTile.from_dict(row) for row in read_jsonl(path)]
    check_unique([t.tile_id for t in tiles], "tile_id")
    return tiles


def check_unique(ids: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate {what}: {i}")
        seen.add(i)


def canonical_hash(obj: Any) -> str:
    """sha256 over canonical JSON (sorted keys, no whitespace)."""
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def manifest_hash(tiles: Iterable[ImageTile]) -> str:
    return canonical_hash([t.to_dict() for t in tiles])
