"""Shipped JSON configs; ``path(name)`` resolves one on disk."""
from pathlib import Path

_DIR = Path(__file__).parent


def names() -> list[str]:
    return sorted(p.stem for p in _DIR.glob("*.json"))


def path(name: str) -> Path:
    p = _DIR / (name if name.endswith(".json") else f"{name}.json")
    if not p.exists():
        raise FileNotFoundError(f"no preset {name!r}; available: {names()}")
    return p
