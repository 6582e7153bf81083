"""Frozen image enhancers standing in for a one-step diffusion model.

``external`` hands the render to another program through PNG files:
``<command> <workdir>/in_<id>.png <workdir>/out_<id>.png``.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import blur5
from .io import load_png, save_png

DEFAULT_TIMEOUT = 30.0


class EnhancerError(RuntimeError):
    pass


@dataclass
class EnhancerSpec:
    kind: str = "identity"
    strength: float = 1.0
    command: Optional[str] = None
    workdir: Optional[str] = None
    timeout: float = DEFAULT_TIMEOUT
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("identity", "unsharp", "external"):
            raise ValueError(f"unknown enhancer kind {self.kind!r}")
        if self.strength < 0:
            raise ValueError("unsharp strength must be >= 0")
        if self.kind == "external" and not self.command:
            raise ValueError("external enhancer needs a command")

    @classmethod
    def parse(cls, text: str, strength: float = 1.0) -> "EnhancerSpec":
        """Parse ``identity``, ``unsharp`` or ``external:<command>``."""
        if text.startswith("external:"):
            return cls(kind="external", command=text[len("external:"):])
        return cls(kind=text, strength=strength)


def enhance(image: np.ndarray, spec: EnhancerSpec) -> np.ndarray:
    if spec.kind == "identity":
        return image
    image = np.asarray(image, dtype=float)
    if spec.kind == "unsharp":
        return np.clip(image + spec.strength * (image - blur5(image)), 0.0, 1.0)
    return _run_external(image, spec)


def _run_external(image: np.ndarray, spec: EnhancerSpec) -> np.ndarray:
    with spec._lock:
        workdir = Path(spec.workdir) if spec.workdir else Path(tempfile.gettempdir())
        token = uuid.uuid4().hex
        src = workdir / f"in_{token}.png"
        dst = workdir / f"out_{token}.png"
        try:
            save_png(src, image)
            cmd = shlex.split(spec.command) + [str(src), str(dst)]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True,
                                      timeout=spec.timeout)
            except subprocess.TimeoutExpired as exc:
                raise EnhancerError(f"enhancer timed out after {spec.timeout}s: "
                                    f"{exc.stderr or ''}")
            except OSError as exc:
                raise EnhancerError(f"could not start enhancer {cmd[0]!r}: {exc}") from exc
            if proc.returncode != 0:
                raise EnhancerError(f"enhancer exited with status {proc.returncode}: "
                                    f"{proc.stderr.strip()}")
            try:
                out = load_png(dst)
            except Exception as exc:
                raise EnhancerError(f"enhancer produced unreadable output: {exc}") from exc
            if out.shape != image.shape:
                raise EnhancerError(f"enhancer changed resolution: {image.shape} -> {out.shape}")
            return out
        finally:
            src.unlink(missing_ok=True)
            dst.unlink(missing_ok=True)
