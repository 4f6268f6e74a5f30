"""Writer for metric reports, experiment tables and generated image sets."""

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Union

import numpy as np

from image_io import write_mask_png, write_rgb_png

logger = logging.getLogger(__name__)


class ReportWriter:
    """Write reports as JSON plus CSV and PNG batches concurrently into one directory."""

    def __init__(self, out_dir: Union[str, Path], output_format: str = "json", max_retries: int = 3):
        self.out_dir = Path(out_dir)
        self.output_format = output_format.lower()
        if self.output_format not in ("json", "csv"):
            raise ValueError(f"output format must be json or csv, got {output_format!r}")
        self.max_retries = max_retries
        self.write_stats = {
            "successful_writes": 0,
            "failed_writes": 0,
            "total_size_bytes": 0,
        }

    def write_report(self, name: str, document: Dict[str, Any], rows: Sequence[Dict[str, Any]] = ()) -> Path:
        """Write the JSON tree and the flat CSV rows side by side.

        Returns the path of the file in the configured output format.
        """
        contents = {
            "json": self._convert_to_json(document),
            "csv": self._convert_to_csv(list(rows)),
        }
        for suffix, content in contents.items():
            path = self.out_dir / f"{name}.{suffix}"
            self._write_with_retry(path, lambda p, c=content: p.write_text(c))
            size = len(content.encode("utf-8"))
            self.write_stats["successful_writes"] += 1
            self.write_stats["total_size_bytes"] += size
            logger.info(f"Wrote report {path} ({size} bytes)")
        return self.out_dir / f"{name}.{self.output_format}"

    def write_images(
        self,
        images: Dict[str, np.ndarray],
        subdir: str = "images",
        kind: str = "rgb",
        max_concurrent: int = 4,
    ) -> Dict[str, bool]:
        """Write {name: array} as PNGs; returns per-name success."""
        if kind not in ("rgb", "mask"):
            raise ValueError(f"image kind must be rgb or mask, got {kind!r}")
        target = self.out_dir / subdir
        target.mkdir(parents=True, exist_ok=True)
        writer: Callable = write_rgb_png if kind == "rgb" else write_mask_png

        results: Dict[str, bool] = {}
        logger.info(f"Writing {len(images)} {kind} images to {target}")

        with ThreadPoolExecutor(max_workers=max(1, max_concurrent)) as executor:
            futures = {}
            for name, array in images.items():
                path = target / f"{name}.png"
                future = executor.submit(
                    self._write_with_retry, path, lambda p, a=array: writer(p, a)
                )
                futures[future] = (name, path)

            for future in as_completed(futures):
                name, path = futures[future]
                try:
                    future.result()
                    results[name] = True
                    self.write_stats["successful_writes"] += 1
                    self.write_stats["total_size_bytes"] += path.stat().st_size
                except (OSError, ValueError) as e:
                    logger.error(f"Failed to write {path}: {e}")
                    results[name] = False
                    self.write_stats["failed_writes"] += 1

        self._log_write_statistics()
        return results

    def _write_with_retry(self, path: Path, write: Callable[[Path], Any]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        for attempt in range(self.max_retries + 1):
            try:
                write(path)
                return
            except OSError as e:
                if attempt >= self.max_retries:
                    raise
                wait_time = 0.1 * 2**attempt
                logger.warning(
                    f"Write to {path} failed ({e}), retrying in {wait_time:.1f}s "
                    f"(attempt {attempt + 1}/{self.max_retries})"
                )
                time.sleep(wait_time)

    def _convert_to_json(self, document: Dict[str, Any]) -> str:
        return json.dumps(document, indent=2, default=str)

    def _convert_to_csv(self, rows: List[Dict[str, Any]]) -> str:
        if not rows:
            return ""

        output = io.StringIO()
        fieldnames: List[str] = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)

        writer = csv.DictWriter(output, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return output.getvalue()

    def _log_write_statistics(self):
        total = self.write_stats["successful_writes"] + self.write_stats["failed_writes"]
        success_rate = (self.write_stats["successful_writes"] / total * 100) if total > 0 else 0

        logger.info("Write statistics:")
        logger.info(f"  Successful writes: {self.write_stats['successful_writes']}")
        logger.info(f"  Failed writes: {self.write_stats['failed_writes']}")
        logger.info(f"  Success rate: {success_rate:.1f}%")
        logger.info(f"  Total data written: {self.write_stats['total_size_bytes'] / 1024 / 1024:.2f} MB")

    def get_write_statistics(self) -> Dict[str, Any]:
        return self.write_stats.copy()
