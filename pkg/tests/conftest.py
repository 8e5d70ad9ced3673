import os
from pathlib import Path

import pytest


def desk_dir() -> Path | None:
    """Locate the desk-profile run directory (env override, then default)."""
    candidates = [os.environ.get("ATTRGAN_DESK_DIR"), "/root/runs/desk"]
    for c in candidates:
        if c and Path(c).is_dir():
            return Path(c)
    return None


@pytest.fixture(scope="session")
def desk():
    d = desk_dir()
    if d is None:
        pytest.skip("no desk-profile run directory (set ATTRGAN_DESK_DIR or run "
                    "the pipeline in README.md)")
    return d


def require(desk: Path, relative: str):
    path = desk / relative
    if not path.exists():
        pytest.skip(f"desk artifact {relative} not present yet; produce it with "
                    f"the pipeline in README.md")
    return path
