"""Location of the bundled reference checkpoint.

It was produced by ``steerpaint train`` with the default config (seed 0).
"""
from __future__ import annotations

from pathlib import Path

__all__ = ["reference_checkpoint_path"]


def reference_checkpoint_path() -> Path:
    return Path(__file__).with_name("data") / "reference.npz"
