"""Study directory layout, advisory locking, and the shared probe.

A study root holds ``tasks/``, ``archive/`` (transfer architectures and
embeddings), ``matrices/``, ``runs/``, and ``probe/``.  The probe is trained
once on a fixed reference task the first time it is needed and reused
byte-identically afterwards, so every embedding in the study carries the
same probe checksum.  Run directories never overwrite: each request yields
the next free ``-NN`` suffix.
"""

from __future__ import annotations

import fcntl
from contextlib import contextmanager
from pathlib import Path

from .probe import ProbeNetwork
from .taskgen import generate_task

__all__ = ["StudyDir", "train_study_probe"]

SUBDIRS = ("tasks", "archive", "matrices", "runs", "probe")


def train_study_probe(seed: int = 0, channels: int = 8, epochs: int = 30) -> ProbeNetwork:
    """The designated reference probe: trained once, then frozen."""
    reference = generate_task("stripes", seed=seed, n=120, classes=2, task_id="reference")
    return ProbeNetwork.train_reference(
        reference.images, reference.labels, channels=channels, epochs=epochs, seed=seed
    )


class StudyDir:
    def __init__(self, root):
        self.root = Path(root)

    def ensure(self) -> "StudyDir":
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    def path(self, sub: str) -> Path:
        return self.root / sub

    @contextmanager
    def lock(self):
        """Advisory single-writer lock on the study root."""
        self.ensure()
        lock_path = self.root / ".lock"
        with open(lock_path, "w") as handle:
            try:
                fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise RuntimeError(
                    f"study {self.root} is locked by another process"
                ) from None
            try:
                yield self
            finally:
                fcntl.flock(handle, fcntl.LOCK_UN)

    def probe_path(self) -> Path:
        return self.root / "probe" / "probe.wspb"

    def load_or_create_probe(self, seed: int = 0) -> ProbeNetwork:
        path = self.probe_path()
        if path.exists():
            return ProbeNetwork.load(path)
        self.ensure()
        probe = train_study_probe(seed=seed)
        probe.save(path)
        return probe

    def new_run_dir(self, name: str) -> Path:
        """Next free runs/<name>-NN directory; run outputs never overwrite."""
        self.ensure()
        for index in range(100):
            candidate = self.root / "runs" / f"{name}-{index:02d}"
            if not candidate.exists():
                candidate.mkdir(parents=True)
                return candidate
        raise RuntimeError(f"run namespace exhausted for {name!r}")
