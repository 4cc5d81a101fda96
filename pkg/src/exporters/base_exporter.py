"""
Base exporter abstract class for atomic file outputs.
"""

import os
import tempfile
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

from ..utils.exceptions import SIU3RException
from ..utils.logger import logger


class BaseExporter(ABC):
    """
    Abstract base class for all file exporters.

    Content is written to a temporary file next to the destination and moved
    into place on a clean exit, so readers never observe a partial file.
    """

    def __init__(self, path: str, config: Optional[Dict[str, Any]] = None):
        """
        Initialize the exporter.

        Args:
            path: Destination file path
            config: Format-specific options
        """
        self.path = path
        self.config = config or {}
        self.temp_path = None

    def open(self) -> None:
        """Create the temporary file beside the destination."""
        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        fd, self.temp_path = tempfile.mkstemp(
            dir=directory, prefix=f".{os.path.basename(self.path)}.", suffix=".tmp"
        )
        os.close(fd)

    def close(self, commit: bool = True) -> None:
        """Move the temporary file into place, or discard it."""
        if self.temp_path is None:
            return
        try:
            if commit:
                os.replace(self.temp_path, self.path)
                logger.info(f"Wrote {self.get_format()} file: {self.path}")
            elif os.path.exists(self.temp_path):
                os.remove(self.temp_path)
        finally:
            self.temp_path = None

    @abstractmethod
    def write(self, payload: Any) -> None:
        """
        Write the payload to the temporary file.

        Args:
            payload: Format-specific content
        """
        pass

    @abstractmethod
    def get_format(self) -> str:
        """
        Get the format name for this exporter.

        Returns:
            Format name (e.g., 'ply', 'png', 'csv')
        """
        pass

    def export(self, payload: Any) -> str:
        """Write the payload atomically and return the destination path."""
        with self:
            try:
                self.write(payload)
            except OSError as e:
                raise SIU3RException(f"Failed to write {self.path}: {str(e)}")
        return self.path

    def __enter__(self):
        """Context manager entry."""
        self.open()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        """Context manager exit."""
        self.close(commit=exc_type is None)
