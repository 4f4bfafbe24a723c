"""Run configuration, reproducibility manifests, and seed derivation.

Configuration is an INI file with one section per pipeline stage; command
line flags override file values. All randomness flows from the single
[run] seed through named per-stage sub-seeds, never from ambient entropy.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

from . import __version__
from .corpus import PreprocessConfig, load_acronym_map, load_lexicon
from .errors import ValidationError

__all__ = [
    "RunConfig",
    "load_config",
    "derive_seed",
    "atomic_write_text",
    "sha256_of",
    "RunManifest",
]

_STEP_NAMES = (
    "nfc",
    "lowercase",
    "expand_acronyms",
    "normalize_punctuation",
    "correct_spelling",
    "collapse_whitespace",
)


class RunConfig:
    """Typed access over the INI sections, resolved relative to its file."""

    def __init__(self, parser: configparser.ConfigParser, base_dir: Path):
        self._parser = parser
        self.base_dir = base_dir

    def get(self, section: str, key: str, fallback: str | None = None) -> str | None:
        value = self._parser.get(section, key, fallback=fallback)
        if value is None or value == "":
            return fallback
        return value

    def get_int(self, section: str, key: str, fallback: int) -> int:
        value = self.get(section, key)
        if value is None:
            return fallback
        try:
            return int(value)
        except ValueError:
            raise ValidationError(f"[{section}] {key} must be an integer, got {value!r}") from None

    def get_float(self, section: str, key: str, fallback: float) -> float:
        value = self.get(section, key)
        if value is None:
            return fallback
        try:
            return float(value)
        except ValueError:
            raise ValidationError(f"[{section}] {key} must be a number, got {value!r}") from None

    def path(self, section: str, key: str) -> Path | None:
        value = self.get(section, key)
        if value is None:
            return None
        return (self.base_dir / value).resolve() if not os.path.isabs(value) else Path(value)

    def require_path(self, section: str, key: str) -> Path:
        resolved = self.path(section, key)
        if resolved is None:
            raise ValidationError(f"config is missing [{section}] {key}")
        if not resolved.exists():
            raise FileNotFoundError(f"[{section}] {key}: no such file {resolved}")
        return resolved

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed", 0)

    @property
    def output_dir(self) -> Path:
        value = self.path("paths", "output_dir")
        return value if value is not None else self.base_dir / "out"

    def preprocess(self) -> PreprocessConfig:
        steps_value = self.get("preprocess", "steps")
        if steps_value is None:
            flags = {name: name != "correct_spelling" for name in _STEP_NAMES}
        else:
            enabled = {s.strip() for s in steps_value.split(",") if s.strip()}
            unknown = enabled - set(_STEP_NAMES)
            if unknown:
                raise ValidationError(f"[preprocess] unknown steps: {sorted(unknown)}")
            flags = {name: name in enabled for name in _STEP_NAMES}
        acronyms: Mapping[str, str] = {}
        acronym_path = self.path("preprocess", "acronym_map")
        if acronym_path is not None and acronym_path.exists():
            acronyms = load_acronym_map(acronym_path)
        lexicon: tuple[str, ...] = ()
        lexicon_path = self.path("preprocess", "lexicon")
        if lexicon_path is not None and lexicon_path.exists():
            lexicon = load_lexicon(lexicon_path)
        return PreprocessConfig(acronyms=acronyms, lexicon=lexicon, **flags)

    def expects_keywords(self) -> tuple[str, ...]:
        value = self.get("corpus", "expects_keywords")
        if value is None:
            return ()
        return tuple(k.strip() for k in value.split(",") if k.strip())

    def snapshot(self) -> dict:
        return {
            section: dict(self._parser.items(section))
            for section in self._parser.sections()
        }


def load_config(path: str | Path) -> RunConfig:
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(config_path, encoding="utf-8")
    except configparser.Error as exc:
        raise ValidationError(f"bad config file: {exc}") from exc
    return RunConfig(parser, config_path.parent.resolve())


def derive_seed(seed: int, stage: str) -> int:
    """Stable per-stage sub-seed from the single run seed."""
    digest = hashlib.blake2b(f"{seed}:{stage}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write-temp-then-rename so readers never see a partial file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def sha256_of(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


class RunManifest:
    """Reproducibility record: written before results, finalized after.

    Carries the config snapshot, the explicit seed, input checksums and,
    once the command finishes, output checksums.
    """

    def __init__(self, command: str, config: RunConfig, out_dir: Path):
        self.command = command
        self.path = out_dir / f"{command}_manifest.json"
        self._payload = {
            "command": command,
            "tool_version": __version__,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "seed": config.seed,
            "config": config.snapshot(),
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path: str | Path) -> None:
        self._payload["inputs"][str(path)] = sha256_of(path)

    def add_output(self, path: str | Path) -> None:
        self._payload["outputs"][str(path)] = sha256_of(path)

    def write(self) -> Path:
        return atomic_write_text(self.path, json.dumps(self._payload, indent=2, sort_keys=True))
