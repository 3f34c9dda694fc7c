"""Utils for tensortrack"""

import datetime
import enum
import hashlib
import json
import pathlib
from typing import Any, Union

import numpy as np


def pluralize(count, singular, plural):
    """Return singular or plural based on count"""
    return singular if count == 1 else plural


def bold(msg: str) -> str:
    """Return bold string in rich markup"""
    return f"[bold]{msg}[/bold]"


def _json_default(o: Any) -> Any:
    if isinstance(o, datetime.datetime):
        return o.isoformat()
    if isinstance(o, enum.Enum):
        return o.value
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, pathlib.PurePath):
        return str(o)
    raise TypeError(f"Object of type {type(o).__name__} is not JSON serializable")


def convert_to_json(data: Any, indent: int = 4) -> str:
    """Convert data to JSON with sorted keys, converting datetimes, enums and numpy values"""
    return json.dumps(data, indent=indent, sort_keys=True, default=_json_default) + "\n"


def sha256_file(path: Union[str, pathlib.Path]) -> str:
    """Hex SHA-256 digest of a file's contents"""
    digest = hashlib.sha256()
    with open(path, "rb") as fd:
        for chunk in iter(lambda: fd.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
