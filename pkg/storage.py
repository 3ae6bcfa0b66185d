import csv
import json
import logging
import os
import platform
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from errors import ParseError

logger = logging.getLogger(__name__)


class StorageHandler:
    """Handle run directories and the files every command writes into them."""

    def __init__(self, data_dir="runs"):
        """Initialize the storage handler.

        Args:
            data_dir: Directory that holds one sub-directory per command
        """
        self.data_dir = data_dir

        # Create the output directory if it doesn't exist
        if not os.path.exists(data_dir):
            os.makedirs(data_dir)

    def run_dir(self, command: str) -> str:
        """Directory for a command's outputs, created on demand."""
        path = os.path.join(self.data_dir, command)
        if not os.path.exists(path):
            os.makedirs(path)
        return path

    def path(self, command: str, *parts: str) -> str:
        path = os.path.join(self.run_dir(command), *parts)
        parent = os.path.dirname(path)
        if not os.path.exists(parent):
            os.makedirs(parent)
        return path

    def save_json(self, command: str, name: str, data: Any) -> str:
        path = self.path(command, name)
        try:
            with open(path, 'w') as f:
                json.dump(data, f, indent=2, sort_keys=True)
        except OSError as e:
            logger.error(f"Failed to write {path}: {str(e)}")
            raise
        return path

    def load_json(self, command: str, name: str) -> Optional[Dict[str, Any]]:
        """Load a JSON file from a run directory.

        Returns:
            dict or None: Contents if the file exists, None otherwise
        """
        path = os.path.join(self.data_dir, command, name)
        if not os.path.exists(path):
            return None
        with open(path, 'r') as f:
            return json.load(f)

    def write_manifest(self, command: str, config, extra: Optional[Dict[str, Any]] = None) -> str:
        """Write manifest.json: the config, its hash, the seed and library versions."""
        manifest = {
            "command": command,
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "versions": {"python": platform.python_version(), "numpy": np.__version__},
        }
        if extra:
            manifest.update(extra)
        path = self.save_json(command, "manifest.json", manifest)
        logger.info(f"Wrote manifest for '{command}' to {path}")
        return path

    def write_csv(self, command: str, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        """Write a CSV file; floats are written with repr precision, None as an empty cell."""
        path = self.path(command, name)
        count = 0
        try:
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(header)
                for row in rows:
                    writer.writerow(["" if v is None else v for v in row])
                    count += 1
        except OSError as e:
            logger.error(f"Failed to write {path}: {str(e)}")
            raise
        logger.debug(f"Wrote {count} rows to {path}")
        return path

    def write_trajectory(self, command: str, label: str, angles: np.ndarray, dof_names: Sequence[str],
                         dt: float) -> str:
        """Joint trajectory as CSV: a time column followed by one column per actuated joint."""
        angles = np.asarray(angles, dtype=float).reshape(len(angles), len(dof_names))
        rows = ([round(k * dt, 9)] + [float(a) for a in frame] for k, frame in enumerate(angles))
        return self.write_csv(command, os.path.join("trajectories", f"{label}.csv"), ["t"] + list(dof_names), rows)


def read_trajectory(path: str, dof_names: Sequence[str]) -> np.ndarray:
    """Angles (T, n_dof) from a trajectory CSV, columns picked by joint name."""
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return np.zeros((0, len(dof_names)))
        missing = [name for name in dof_names if name not in header]
        if missing:
            raise ParseError(path, f"trajectory lacks joint columns {missing}", line=1)
        columns = [header.index(name) for name in dof_names]
        rows: List[List[float]] = [[float(row[c]) for c in columns] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, len(dof_names))
