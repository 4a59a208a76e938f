import json
import hashlib
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import numpy as np
import torch
from loguru import logger


def calculate_content_hash(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def calculate_file_hash(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _stream_key(seed: int, name: str) -> list:
    name_key = int(calculate_content_hash(name.encode("utf-8"))[:8], 16)
    return [int(seed) & 0xFFFFFFFF, name_key]


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent numpy generator for one named component of a run."""
    return np.random.default_rng(np.random.SeedSequence(_stream_key(seed, name)))


def torch_generator(seed: int, name: str) -> torch.Generator:
    state = np.random.SeedSequence(_stream_key(seed, name)).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state) & 0x7FFFFFFFFFFFFFFF)
    return generator


def write_text(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def write_json(path: Union[str, Path], payload: Any) -> Path:
    return write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_manifest(out_dir: Union[str, Path], command: str, config_hash: str,
                   artifacts: Iterable[Union[str, Path]], extra: Dict[str, Any] = None) -> Path:
    """List artifacts with their hashes; no timestamps so reruns match byte for byte."""
    out_dir = Path(out_dir)
    entries = []
    for artifact in sorted({Path(a).resolve() for a in artifacts}):
        entries.append({
            "path": artifact.relative_to(out_dir.resolve()).as_posix(),
            "sha256": calculate_file_hash(artifact),
        })
    payload = {
        "command": command,
        "config_hash": config_hash,
        "artifacts": entries,
    }
    if extra:
        payload.update(extra)
    path = write_json(out_dir / "manifest.json", payload)
    logger.info(f"Manifest written: {len(entries)} artifacts")
    return path
