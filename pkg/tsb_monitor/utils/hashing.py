import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import numpy as np

from tsb_monitor.core.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "artifacts.sha256"


def hash_array(*arrays: np.ndarray) -> str:
    """
    Generate SHA-256 hash of one or more float arrays.
    Arrays are cast to little-endian float64 before hashing.
    """
    try:
        digest = hashlib.sha256()
        for array in arrays:
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
            digest.update(b"|")
        return digest.hexdigest()
    except Exception as e:
        logger.error("Error hashing array", error=str(e))
        raise


def op_ref(gen_p: np.ndarray, load_scale: np.ndarray) -> str:
    """Short identifier of an operating point."""
    return hash_array(gen_p, load_scale)[:16]


def hash_document(document: Dict[str, Any]) -> str:
    """
    Generate SHA-256 hash of a JSON-serializable document (sorted keys).
    """
    try:
        text = json.dumps(document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()
    except Exception as e:
        logger.error("Error hashing document", error=str(e))
        raise


def hash_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory: Union[str, Path], names: Iterable[str]) -> Path:
    """
    Write `artifacts.sha256` listing the digest of each named file, sorted by name.
    """
    directory = Path(directory)
    lines = [f"{hash_file(directory / name)}  {name}" for name in sorted(names)]
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    logger.info("Artifact manifest written", path=str(manifest), files=len(lines))
    return manifest
