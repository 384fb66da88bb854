"""Dataset plumbing: samples, cross-validation fold planning, the paired
two-task epoch stream, and the line-delimited JSON manifest."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume, read_volume

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class Sample:
    """One case: an intensity volume and its label mask for one task."""

    image: Volume
    mask: Volume
    task: str
    case_id: str

    def __post_init__(self):
        if self.image.dims != self.mask.dims:
            raise ValueError(
                f"{self.case_id}: image dims {self.image.dims} != mask dims {self.mask.dims}")
        if self.image.spacing != self.mask.spacing:
            raise ValueError(
                f"{self.case_id}: image spacing {self.image.spacing} != "
                f"mask spacing {self.mask.spacing}")
        if self.image.origin != self.mask.origin:
            raise ValueError(f"{self.case_id}: image and mask origins differ")


@dataclass
class FoldPlan:
    k: int
    assignment: dict  # case id -> fold index

    def cases_in(self, fold: int) -> list:
        return sorted(c for c, f in self.assignment.items() if f == fold)

    def sizes(self) -> list:
        return [len(self.cases_in(f)) for f in range(self.k)]

    def split(self, fold: int) -> tuple:
        """(train case ids, validation case ids) for one held-out fold."""
        if not (0 <= fold < self.k):
            raise ConfigError(f"fold {fold} out of range for k={self.k}")
        val = self.cases_in(fold)
        train = sorted(c for c, f in self.assignment.items() if f != fold)
        return train, val


def plan_folds(case_ids, k: int = 3, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then round-robin assignment; fold sizes differ by at
    most one."""
    cases = sorted(case_ids)
    if len(set(cases)) != len(cases):
        raise ConfigError("case ids must be unique")
    if len(cases) < k:
        raise ConfigError(f"need at least k={k} cases, got {len(cases)}")
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(cases)))
    assignment = {cases[idx]: pos % k for pos, idx in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment)


def sample_seed(seed: int, case_id: str, epoch: int) -> int:
    """Stable per-sample augmentation seed: identical across runs and
    machines, independent of worker scheduling."""
    digest = hashlib.blake2s(f"{seed}|{case_id}|{epoch}".encode("utf-8"),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def epoch_pairs(set_a, set_b, seed: int, epoch: int) -> list:
    """One epoch of (a, b) pairs: both sets shuffled independently, the
    smaller cycling until the larger is exhausted; len = max(|A|, |B|)."""
    a, b = list(set_a), list(set_b)
    if not a or not b:
        raise ConfigError("epoch_pairs: both sets must be non-empty")
    rng_a = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0]))
    rng_b = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1]))
    order_a = [a[i] for i in rng_a.permutation(len(a))]
    order_b = [b[i] for i in rng_b.permutation(len(b))]
    n = max(len(a), len(b))
    return [(order_a[i % len(a)], order_b[i % len(b)]) for i in range(n)]


def epoch_iterator(set_a, set_b, seed: int):
    """Endless stream of epochs, each a list of sample pairs."""
    epoch = 0
    while True:
        yield epoch, epoch_pairs(set_a, set_b, seed, epoch)
        epoch += 1


# ---------------------------------------------------------------------------
# manifest


def write_manifest(records, path) -> None:
    """One JSON object per line, keys sorted; volume paths should be
    relative to the manifest's directory."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: bad manifest line: {exc}")
            for key in ("case_id", "image", "mask", "task"):
                if key not in rec:
                    raise ConfigError(f"{path}:{lineno}: manifest record missing {key!r}")
            records.append(rec)
    return records


def load_sample(record: dict, base_dir) -> Sample:
    image = read_volume(os.path.join(base_dir, record["image"]))
    mask = read_volume(os.path.join(base_dir, record["mask"]))
    return Sample(image=image, mask=mask, task=record["task"],
                  case_id=record["case_id"])
