"""
Run records written to the manifest of every run directory.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional


@dataclass
class ExperimentRecord:
    """One experiment of a run."""
    kind: str
    passed: bool
    success: bool
    seconds: float
    report_path: str
    table_path: str
    error: Optional[str] = None
    artifact_paths: List[str] = field(default_factory=list)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run."""
    tool_version: str
    config_path: str
    config_hash: str
    model_hash: str
    master_seed: int
    environment_seeds: List[int]
    workers: int
    workers_source: str  # 'cli', 'environment', 'config' or 'settings'
    chunk_size: int
    experiments: List[ExperimentRecord] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""
    total_seconds: float = 0.0
    exit_status: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
