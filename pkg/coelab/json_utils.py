import json
from fractions import Fraction
from pathlib import Path
from typing import Any, TextIO

import numpy as np


def json_str_to_dict(json_str: str) -> dict:
    """
    Converts a JSON string to a dictionary.

    Args:
        json_str (str): The JSON string to be converted.

    Returns:
        dict: The dictionary representation of the JSON string.

    Raises:
        ValueError: If the JSON string is invalid or not an object.
    """
    try:
        document = json.loads(json_str)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON string: {e}") from None

    if not isinstance(document, dict):
        raise ValueError("JSON document must be an object")
    return document


def read_json_file(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"File '{path}' does not exist.")
    try:
        return json_str_to_dict(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


def _default(value: Any) -> Any:
    if isinstance(value, Fraction):
        return {"numerator": value.numerator, "denominator": value.denominator}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_pretty_json(document: Any) -> str:
    return json.dumps(document, indent=2, default=_default)


def write_json_file(document: Any, path: Path) -> Path:
    path.write_text(to_pretty_json(document) + "\n", encoding="utf-8")
    return path


def append_json_line(handle: TextIO, record: dict) -> None:
    """Appends one compact JSON object per line; callers open ``handle`` line-buffered."""
    handle.write(json.dumps(record, default=_default) + "\n")


def read_json_lines(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
