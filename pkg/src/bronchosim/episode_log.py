"""Episode logging: one JSON record per 50 Hz tick, schema-versioned.

Logs are the ground truth for every metric: a replayed log file reproduces
the trial outcome bit-for-bit because floats round-trip exactly through
JSON repr and outcomes are pure functions of the records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

LOG_SCHEMA_VERSION = 2


@dataclass
class EpisodeLog:
    header: dict
    records: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, scenario: str, mode: str, seed: int, config_digest: str, dt: float) -> "EpisodeLog":
        return cls(
            header={
                "schema_version": LOG_SCHEMA_VERSION,
                "scenario": scenario,
                "mode": mode,
                "seed": seed,
                "config_digest": config_digest,
                "dt": dt,
            }
        )

    def append(self, record: dict) -> None:
        self.records.append(record)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path: str) -> "EpisodeLog":
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
            if not first.strip():
                raise ValueError(f"{path}: empty log file")
            try:
                header = json.loads(first)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: corrupt header at line 1: {e}") from e
            version = header.get("schema_version")
            if version != LOG_SCHEMA_VERSION:
                raise ValueError(
                    f"{path}: log schema version {version!r} not supported "
                    f"(expected {LOG_SCHEMA_VERSION})"
                )
            log = cls(header=header)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValueError(f"{path}: corrupt record at line {lineno}: {e}") from e
                if "tick" not in rec or "phase" not in rec:
                    raise ValueError(f"{path}: truncated record at line {lineno}")
                log.records.append(rec)
        return log
