"""Reference configurations and expected results shipped with the package."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

REFERENCE_CONFIGS = ("spirals", "blobs_easy", "blobs_hard", "cnn")


def reference_config(name: str) -> Path:
    if name not in REFERENCE_CONFIGS:
        raise KeyError(f"no reference config {name!r}; choose from {', '.join(REFERENCE_CONFIGS)}")
    return Path(str(resources.files("lwdistill") / "configs" / f"{name}.ini"))


def expected_results() -> dict:
    path = resources.files("lwdistill") / "configs" / "expected_results.json"
    return json.loads(path.read_text())
