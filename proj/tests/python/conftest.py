import sys
from pathlib import Path

# Make the in-tree extension module importable without installing the wheel.
_root = Path(__file__).resolve().parents[2]
for candidate in (_root / "build", _root / "python"):
    if candidate.exists():
        sys.path.insert(0, str(candidate))
