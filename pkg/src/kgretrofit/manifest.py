"""key=value run manifests and config files."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

from .errors import ParseError

# manifest keys under these prefixes are informational and ignored when the
# manifest is fed back in as a config file
INFO_PREFIXES = ("digest.", "result.", "coverage.")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, float):
        # shortest string that round-trips; integral values drop the ".0"
        return f"{v:g}" if v.is_integer() and abs(v) < 1e16 else repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def write_manifest(path: str | Path, items: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(items):
            fh.write(f"{k}={format_value(items[k])}\n")


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` comments and manifest info keys are skipped."""
    path = Path(path)
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, lineno, "expected key=value")
            k, v = line.split("=", 1)
            k = k.strip()
            if k.startswith(INFO_PREFIXES):
                continue
            out[k] = v.strip()
    return out
