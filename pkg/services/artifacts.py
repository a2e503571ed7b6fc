"""
Run-directory writer.
Handles the on-disk layout of a run: manifest.json at the top and one
directory per experiment holding report.json, table.csv and any extra
artifacts the experiment produced.
"""

import logging
import os
from datetime import datetime, timezone
from typing import Any, Optional

from services.models import RunManifest
from services.serialization import report_to_json

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
REPORT_NAME = "report.json"
TABLE_NAME = "table.csv"


class ArtifactError(Exception):
    """Raised when the run directory cannot be written."""
    pass


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class ArtifactStore:
    """
    Writes the artifacts of a single run.
    Every path handed back is relative to the run directory.
    """

    def __init__(self, root: str, run_name: Optional[str] = None):
        self.root = root
        self.run_name = run_name or datetime.now(timezone.utc).strftime("run-%Y%m%dT%H%M%SZ")
        self.run_dir = os.path.join(root, self.run_name)
        self._initialized = False

    def init_run(self) -> str:
        """
        Create the run directory.

        Returns:
            str: absolute path of the run directory

        Raises:
            ArtifactError: If the directory is not writable
        """
        try:
            os.makedirs(self.run_dir, exist_ok=True)
            marker = os.path.join(self.run_dir, ".write-test")
            with open(marker, "w", encoding="utf-8") as fh:
                fh.write("")
            os.remove(marker)
        except OSError as e:
            raise ArtifactError(f"output directory {self.run_dir} is not writable: {e}") from e
        self._initialized = True
        logger.info(f"Writing run artifacts to {self.run_dir}")
        return os.path.abspath(self.run_dir)

    def _write(self, relative: str, text: str) -> str:
        if not self._initialized:
            self.init_run()
        path = os.path.join(self.run_dir, relative)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return relative

    def save_report(self, experiment: str, report: Any) -> str:
        return self._write(os.path.join(experiment, REPORT_NAME), report_to_json(report))

    def save_table(self, experiment: str, csv_text: str) -> str:
        return self._write(os.path.join(experiment, TABLE_NAME), csv_text)

    def save_text(self, relative: str, text: str) -> str:
        return self._write(relative, text)

    def save_artifact(self, experiment: str, name: str, text: str) -> str:
        """Extra experiment output such as a UTable or an ensemble CSV, under the experiment directory."""
        return self._write(os.path.join(experiment, name), text)

    def save_manifest(self, manifest: RunManifest) -> str:
        return self._write(MANIFEST_NAME, report_to_json(manifest.to_dict()))
