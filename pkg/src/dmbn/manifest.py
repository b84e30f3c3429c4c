"""Run manifests: every CLI command records what it did and what it produced."""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: int
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    duration_s: float = 0.0
    kernel_backend: str = ""


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, manifest):
    """Serialize atomically: the file appears complete or not at all."""
    payload = json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
