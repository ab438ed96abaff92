import json
import logging
import math
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config import OUTPUT_DIR
from models import PontryaginTriple
from pmp import triple_to_tables

logger = logging.getLogger(__name__)


def _plain(value: Any) -> Any:
    """Make a record JSON-safe: numpy scalars/arrays to Python, non-finite floats to strings"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def to_json(record: Dict[str, Any]) -> str:
    """Deterministic JSON: sorted keys, fixed indentation, no timestamps"""
    return json.dumps(_plain(record), sort_keys=True, indent=2) + '\n'


class ArtifactStore:
    """Output directory with a single serialized writer"""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root or OUTPUT_DIR)
        if not str(self.root):
            raise ValueError("output directory is required")
        self._lock = threading.Lock()
        self.written: List[str] = []

    def open(self):
        """Create the output directory"""
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            logger.info(f"Artifact directory ready: {self.root}")
        except OSError as e:
            logger.error(f"Failed to create artifact directory {self.root}: {e}")
            raise

    def __enter__(self) -> 'ArtifactStore':
        self.open()
        return self

    def __exit__(self, exc_type, exc, tb):
        logger.info(f"Wrote {len(self.written)} artifacts to {self.root}")
        return False

    def write_text(self, relative: str, text: str) -> Path:
        path = self.root / relative
        with self._lock:
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(text)
            except OSError as e:
                logger.error(f"Failed to write {path}: {e}")
                raise
            self.written.append(relative)
        logger.debug(f"Artifact written: {relative}")
        return path

    def write_json(self, relative: str, record: Dict[str, Any]) -> Path:
        return self.write_text(relative, to_json(record))

    def write_triple(self, relative: str, triple: PontryaginTriple) -> Path:
        """Trajectory directory with states/costates/controls tables"""
        for name, text in triple_to_tables(triple).items():
            self.write_text(f"{relative}/{name}.txt", text)
        return self.root / relative
