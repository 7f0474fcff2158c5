"""Line-delimited JSON run logs: append-only, replayable, byte-stable.

Every record is one compact JSON object per line.  The first line is a
header naming the log version and the configuration digest; resume refuses
logs whose header disagrees with the active configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

LOG_VERSION = "1"


class CorruptLogError(ValueError):
    """The log file is truncated or contains an undecodable line."""


class IncompatibleLogError(ValueError):
    """The log was written under a different version or configuration."""


def dump_record(record: dict) -> str:
    """One log line; key order follows construction order for byte stability."""
    return json.dumps(record, separators=(", ", ": ")) + "\n"


class RunLogWriter:
    """Append-only writer that flushes every record."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(dump_record(record))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RunLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str | Path) -> list[dict]:
    """Load every record, refusing partial lines and malformed JSON."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorruptLogError(f"cannot read log {path}: {exc}") from exc
    if not text:
        raise CorruptLogError(f"log {path} is empty")
    if not text.endswith("\n"):
        raise CorruptLogError(f"log {path} ends mid-record")
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptLogError(
                f"log {path} line {lineno} is not valid JSON: {exc}") from exc
    return records


def check_header(records: list[dict], expected_hash: str) -> dict:
    """Validate the header record against the active configuration."""
    if not records or records[0].get("type") != "header":
        raise CorruptLogError("log has no header record")
    header = records[0]
    if header.get("version") != LOG_VERSION:
        raise IncompatibleLogError(
            f"log version {header.get('version')!r} != {LOG_VERSION!r}")
    if header.get("config_hash") != expected_hash:
        raise IncompatibleLogError(
            "log was written under a different configuration")
    return header
