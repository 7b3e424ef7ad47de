import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

import numpy as np


def _default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "to_dict"):
        return value.to_dict()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(obj: Any) -> str:
    """Serialize with insertion-ordered keys and compact separators.

    Every surface (library, CLI, HTTP) goes through this so outputs compare
    byte for byte.
    """
    return json.dumps(obj, default=_default, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: Union[str, Path], records: Iterable[Any]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(dumps(record))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: Union[str, Path]) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)
