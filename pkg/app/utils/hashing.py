"""
Digests and JSON-lines helpers for records and graph snapshots
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Union

import numpy as np

logger = logging.getLogger(__name__)


def canonical_json(data: Any) -> str:
    """Key-sorted, whitespace-free JSON used for every digest"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(payload: Union[str, bytes]) -> str:
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def digest_arrays(*arrays: np.ndarray) -> str:
    """Digest of raw array contents, shapes and dtypes"""
    h = hashlib.sha256()
    for array in arrays:
        contiguous = np.ascontiguousarray(array)
        h.update(f"{contiguous.dtype.str}{contiguous.shape}".encode("ascii"))
        h.update(contiguous.tobytes())
    return h.hexdigest()


def write_jsonl(path: Union[str, Path], lines: Iterable[str]) -> Path:
    """
    Write pre-rendered JSON lines to a file, creating parent directories

    Args:
        path: Destination file
        lines: One JSON document per entry

    Returns:
        The written path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    return target


def iter_jsonl(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                logger.error(f"Invalid JSON on line {number} of {path}: {e}")
                raise


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    return list(iter_jsonl(path))
