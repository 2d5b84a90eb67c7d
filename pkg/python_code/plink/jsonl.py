"""
JSON Lines helpers shared by the KB, corpus, triage and evaluation loaders.
"""

import json
from pathlib import Path
from typing import Iterable, Iterator, Tuple, Type

from pydantic import BaseModel

from .errors import InputValidationError


def iter_jsonl(
    path: Path, error_cls: Type[InputValidationError] = InputValidationError
) -> Iterator[Tuple[int, dict]]:
    """Yield (1-based line number, object) pairs, skipping blank lines."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise error_cls(f"{path}:{line_no}: malformed JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise error_cls(f"{path}:{line_no}: expected a JSON object")
            yield line_no, obj


def write_jsonl(path: Path, records: Iterable) -> int:
    """Write dicts or pydantic models one per line; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            if isinstance(record, BaseModel):
                record = record.model_dump(mode="json", exclude_none=True)
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            f.write("\n")
            count += 1
    return count
