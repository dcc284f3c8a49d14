"""
Report and artifact output.

Workflow:
1. Create the run's output directory
2. Write structured reports (JSON), delimited tables (CSV) and text tables
3. Write run metadata (resolved config, timing, timestamp) separately so that
   the reports themselves are identical across runs with the same seed
4. Read fit reports back, raising ArtifactError on missing or malformed files
"""
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict

import pandas as pd
from prometheus_client import Counter

from src.errors import ArtifactError
from src.pipeline import FitReport
from src.utils import format_timestamp, read_json, save_json

logger = logging.getLogger(__name__)

# Prometheus metrics
ARTIFACTS_WRITTEN = Counter('stein_encoder_artifacts_written', 'Number of report files written')
ARTIFACT_FAILURES = Counter('stein_encoder_artifact_failures', 'Number of report files that failed to write')


class ReportWriter:
    """Writes every output of one command into a single directory."""

    def __init__(self, output_dir: str):
        """
        Initialize the writer.

        Args:
            output_dir: Directory for reports; created if missing.
        """
        self.output_dir = output_dir
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise ArtifactError(f"Cannot create output directory {output_dir}: {e}") from e

    def path(self, filename: str) -> str:
        return os.path.join(self.output_dir, filename)

    def write_json(self, filename: str, data: Dict[str, Any]) -> str:
        filepath = self.path(filename)
        if not save_json(data, filepath):
            ARTIFACT_FAILURES.inc()
            raise ArtifactError(f"Failed to write {filepath}")
        ARTIFACTS_WRITTEN.inc()
        logger.info(f"Wrote {filepath}")
        return filepath

    def write_table(self, filename: str, frame: pd.DataFrame, delimiter: str = ',') -> str:
        filepath = self.path(filename)
        try:
            frame.to_csv(filepath, sep=delimiter, index=False)
        except OSError as e:
            ARTIFACT_FAILURES.inc()
            raise ArtifactError(f"Failed to write {filepath}: {e}") from e
        ARTIFACTS_WRITTEN.inc()
        logger.info(f"Wrote {len(frame)} rows to {filepath}")
        return filepath

    def write_text(self, filename: str, text: str) -> str:
        filepath = self.path(filename)
        try:
            with open(filepath, 'w') as file:
                file.write(text if text.endswith('\n') else text + '\n')
        except OSError as e:
            ARTIFACT_FAILURES.inc()
            raise ArtifactError(f"Failed to write {filepath}: {e}") from e
        ARTIFACTS_WRITTEN.inc()
        return filepath

    def write_fit_report(self, report: FitReport, filename: str = 'fit_report.json') -> str:
        """FitReport without its timing, which goes to run_info.json instead."""
        payload = report.to_dict()
        payload['timing'] = {}
        return self.write_json(filename, payload)

    def write_run_info(self, command: str, config: Dict[str, Any], timing: Dict[str, float]) -> str:
        return self.write_json('run_info.json', {
            'command': command,
            'finished_at': format_timestamp(datetime.now()),
            'timing': timing,
            'config': config,
        })


def read_fit_report(filepath: str) -> FitReport:
    """Load a FitReport written by ReportWriter.write_fit_report."""
    if not os.path.exists(filepath):
        raise ArtifactError(f"Encoder artifact not found: {filepath}")
    try:
        return FitReport.from_dict(read_json(filepath))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"{filepath} is not a valid fit report: {e}") from e
