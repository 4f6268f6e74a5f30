"""Training telemetry: step counts, stage times, memory and a JSON-lines metrics log."""

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import psutil

logger = logging.getLogger(__name__)


@dataclass
class TrainingMetrics:
    start_time: float = field(default_factory=time.time)
    end_time: Optional[float] = None
    steps: int = 0
    images_seen: int = 0
    peak_memory_mb: float = 0.0
    stages: Dict[str, float] = field(default_factory=dict)
    error_count: int = 0
    last_losses: Dict[str, float] = field(default_factory=dict)

    @property
    def duration_seconds(self) -> float:
        return (self.end_time or time.time()) - self.start_time

    @property
    def steps_per_second(self) -> float:
        duration = self.duration_seconds
        return self.steps / duration if duration > 0 else 0.0


class TrainingMonitor:
    """Counts steps and appends one JSON record per loss report or held-out evaluation."""

    def __init__(self, metrics_log: Optional[Union[str, Path]] = None):
        self.metrics_log = Path(metrics_log) if metrics_log else None
        self.metrics = TrainingMetrics()
        self._process = psutil.Process()
        self._lock = threading.Lock()
        if self.metrics_log is not None:
            self.metrics_log.parent.mkdir(parents=True, exist_ok=True)

    def start_run(self):
        self.metrics.start_time = time.time()
        self.metrics.end_time = None
        self.update_memory_usage()

    def end_run(self):
        self.metrics.end_time = time.time()
        self.update_memory_usage()

    def add_stage_time(self, stage: str, seconds: float):
        with self._lock:
            self.metrics.stages[stage] = self.metrics.stages.get(stage, 0.0) + seconds

    def record_step(self, step: int, epoch: int, batch_size: int, losses: Dict[str, float]):
        with self._lock:
            self.metrics.steps += 1
            self.metrics.images_seen += batch_size
            self.metrics.last_losses = dict(losses)
        self._append({"kind": "loss", "step": step, "epoch": epoch, **losses})

    def record_metrics(self, step: int, epoch: int, report: Dict[str, Any]):
        self._append({"kind": "metrics", "step": step, "epoch": epoch, "report": report})

    def record_error(self, message: str):
        self.metrics.error_count += 1
        logger.error(message)

    def update_memory_usage(self) -> float:
        rss_mb = self._process.memory_info().rss / 2**20
        self.metrics.peak_memory_mb = max(self.metrics.peak_memory_mb, rss_mb)
        return rss_mb

    def get_summary(self) -> Dict[str, Any]:
        summary = asdict(self.metrics)
        summary.update(
            duration_seconds=self.metrics.duration_seconds,
            steps_per_second=self.metrics.steps_per_second,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        return summary

    def log_summary(self):
        s = self.get_summary()
        logger.info("TRAINING SUMMARY")
        logger.info("=" * 50)
        logger.info(
            f"   {s['steps']:,} steps, {s['images_seen']:,} images in {s['duration_seconds']:.2f}s "
            f"({s['steps_per_second']:.2f} steps/s), peak {s['peak_memory_mb']:.1f} MB"
        )
        for stage, seconds in s["stages"].items():
            logger.info(f"   {stage}: {seconds:.2f}s")
        for name, value in s["last_losses"].items():
            logger.info(f"   Final {name}: {value:.4f}")
        if s["error_count"]:
            logger.info(f"   Errors: {s['error_count']}")
        logger.info("=" * 50)

    def _append(self, record: Dict[str, Any]):
        if self.metrics_log is None:
            return
        line = json.dumps({"time": datetime.now(timezone.utc).isoformat(), **record})
        with self._lock, open(self.metrics_log, "a") as f:
            f.write(line + "\n")


class MonitorContext:
    """Adds the block's wall time to a named stage; failures count as errors."""

    def __init__(self, monitor: TrainingMonitor, stage_name: str):
        self.monitor = monitor
        self.stage_name = stage_name
        self._start = 0.0

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.monitor.add_stage_time(self.stage_name, time.perf_counter() - self._start)
        if exc_type:
            self.monitor.record_error(f"Stage '{self.stage_name}' failed: {exc_val}")
