"""Plain ``key = value`` text files used for every config and manifest."""
from __future__ import annotations


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(pairs) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def int_tuple(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.replace("x", ",").split(",") if v.strip())


def float_tuple(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())
