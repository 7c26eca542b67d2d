"""Collects one verdict per acceptance criterion for the end-of-run summary."""
from __future__ import annotations

RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (bool(passed), detail)
    print(line(number))


def line(number: int) -> str:
    passed, detail = RESULTS[number]
    return f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
