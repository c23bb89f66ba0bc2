import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Union

import pandas as pd

from components import dependencies

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.export_utils')

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    """
    Write text through a temporary file in the target directory, then rename it into place.

    Args:
        path (PathLike): Destination file.
        text (str): Content to write.

    Returns:
        Path: The destination path.

    Raises:
        OSError: If the directory cannot be created or the file cannot be written.
    """
    target = Path(path)
    tmp_name = None
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile("w", encoding="utf-8", newline="", dir=target.parent,
                                         prefix=f".{target.name}.", suffix=".tmp", delete=False) as handle:
            tmp_name = handle.name
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
        logger.debug(f"Wrote {target}")
        return target
    except OSError as e:
        logger.error(f"Failed to write {target} - {e}")
        if tmp_name and os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def atomic_write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def atomic_write_csv(path: PathLike, frame: pd.DataFrame, na_rep: str = "") -> Path:
    """Write a DataFrame as CSV (no index) atomically."""
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n", na_rep=na_rep))


def atomic_write_lines(path: PathLike, lines: Iterable[str]) -> Path:
    body = "".join(f"{line}\n" for line in lines)
    return atomic_write_text(path, body)
