"""Utility modules"""
from app.utils.hashing import canonical_json, sha256_hex, digest_arrays, write_jsonl, read_jsonl
from app.utils.http_client import get_planner_client

__all__ = [
    "canonical_json",
    "sha256_hex",
    "digest_arrays",
    "write_jsonl",
    "read_jsonl",
    "get_planner_client",
]
