"""Run an experiment and persist its report."""
from __future__ import annotations

import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__, formats
from .config import ExperimentConfig
from .runners import RUNNERS

logger = logging.getLogger(__name__)

OK, VALIDATION_FAILED, ASSERTION_FAILED = 0, 1, 2


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    kind: str
    payload: dict
    metrics: dict
    version: str = __version__
    status: str = "ok"
    error: str | None = None
    paths: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return OK if self.status == "ok" else ASSERTION_FAILED

    def payload_bytes(self) -> bytes:
        """The deterministic part of the report: everything except timing and paths."""
        return formats.dumps({
            "version": self.version,
            "kind": self.kind,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "status": self.status,
            "error": self.error,
            "payload": self.payload,
        }).encode()

    def as_dict(self) -> dict:
        return {"version": self.version, "kind": self.kind, "seed": self.seed, "config_hash": self.config_hash,
                "status": self.status, "error": self.error, "metrics": self.metrics, "paths": self.paths}


def run(config: ExperimentConfig, seed: int, out_dir=None, threads: int = 1, write: bool = True) -> RunReport:
    """Execute the configured runner and (optionally) write its files.

    Files go to ``<out_dir>/<kind>-<hash12>-s<seed>/``: ``payload.json`` (byte
    identical for identical config, seed and version), ``report.json``
    (adds wall clock and event counts) and any runner artifacts. Runner
    exceptions are caught and recorded; the report then has a non-zero
    :attr:`RunReport.exit_code`.
    """
    kind = config.experiment.kind
    t0 = time.perf_counter()
    status, error, payload, events, artifacts = "ok", None, {}, 0, {}
    try:
        payload, events, artifacts = RUNNERS[kind](config, seed, threads)
        if not payload.get("passed", True):
            status = "assertion-failed"
    except AssertionError as exc:
        status, error = "assertion-failed", f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # recorded in the report, never swallowed silently
        status, error = "error", f"{type(exc).__name__}: {exc}"
        logger.debug("runner failure\n%s", traceback.format_exc())
    payload = dict(payload)
    payload["tolerances"] = config.run.tolerance_dict()
    report = RunReport(
        config=config.echo(),
        config_hash=config.content_hash(),
        seed=seed,
        kind=kind,
        payload=payload,
        metrics={"wall_clock_s": time.perf_counter() - t0, "events": events, "threads": threads},
        status=status,
        error=error,
    )
    if write:
        base = Path(out_dir if out_dir is not None else config.output.dir)
        target = base / f"{kind}-{report.config_hash[:12]}-s{seed}"
        for name, data in sorted(artifacts.items()):
            formats.atomic_write(target / name, data)
            report.paths[name] = str(target / name)
        report.paths["payload"] = str(target / "payload.json")
        report.paths["report"] = str(target / "report.json")
        formats.atomic_write(target / "payload.json", report.payload_bytes())
        formats.atomic_write(target / "report.json", formats.dumps(report.as_dict()))
    return report
