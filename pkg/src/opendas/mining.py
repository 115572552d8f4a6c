"""Negative-query banks, the augmented label space and hard-negative mining."""

from __future__ import annotations

import json
import logging
import urllib.request
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ValidationError

log = logging.getLogger(__name__)

NEGATIVES_INSTRUCTION = (
    "Your task is to produce five distinct examples for each class provided in the "
    "list, ensuring that the examples are not subcategories of each other but rather "
    "represent clear and separate entities within the same class. This means that each "
    "example should not be a subset or type of another example within the same "
    "category. The objective is to create similar examples that might be confused by a "
    "machine learning model but remain discernible to a human observer to be used as "
    "clear negative examples for triplet loss training. The output format should be a "
    "Python dictionary for easy integration."
)


@dataclass(frozen=True)
class NegativeBank:
    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for key, negatives in self.entries.items():
            negatives = tuple(negatives)
            if not isinstance(key, str) or not key.strip():
                raise ValidationError(f"bank key {key!r} is not a non-empty string")
            seen = set()
            for neg in negatives:
                if not isinstance(neg, str) or not neg.strip():
                    raise ValidationError(f"{key!r}: negative {neg!r} is not a non-empty string")
                if neg.casefold() == key.casefold():
                    raise ValidationError(f"{key!r}: query listed among its own negatives")
                if neg in seen:
                    raise ValidationError(f"{key!r}: duplicate negative {neg!r}")
                seen.add(neg)
            fixed[key] = negatives
        object.__setattr__(self, "entries", fixed)

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> str:
        return json.dumps({k: list(v) for k, v in self.entries.items()}, indent=2,
                          ensure_ascii=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def load_negative_bank(path) -> NegativeBank:
    """Read a JSON ``{query: [negative, ...]}`` file and validate it."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a JSON object of query -> list")
    for key, value in raw.items():
        if not isinstance(value, list):
            raise ValidationError(f"{path}: value for {key!r} is not a list")
    return NegativeBank(raw)


@dataclass(frozen=True)
class LabelSpace:
    labels: tuple[str, ...]
    base_count: int

    @property
    def is_base(self) -> np.ndarray:
        return np.arange(len(self.labels)) < self.base_count

    @property
    def base(self) -> tuple[str, ...]:
        return self.labels[: self.base_count]

    def index(self, label: str) -> int:
        return self._lookup[label]

    @cached_property
    def _lookup(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)


def build_label_space(base: Sequence[str], bank: NegativeBank) -> LabelSpace:
    """Base queries first, then bank negatives in key/list order, deduplicated."""
    if not base:
        raise ValidationError("base query list is empty")
    labels: list[str] = []
    for q in base:
        if q not in labels:
            labels.append(q)
    base_count = len(labels)
    for key in bank.entries:
        for neg in bank.entries[key]:
            if neg not in labels:
                labels.append(neg)
    return LabelSpace(tuple(labels), base_count)


def build_instruction_prompt(base: Sequence[str]) -> str:
    if not base:
        raise ValidationError("base query list is empty")
    classes = "\n".join(f"- {q}" for q in base)
    return f"{NEGATIVES_INSTRUCTION}\n\nClasses:\n{classes}\n"


def request_negatives(prompt: str, endpoint: str, out_path, timeout: float = 60.0) -> Path:
    """POST ``prompt`` as JSON to ``endpoint`` and save the raw reply body.

    The reply is stored unparsed; convert it to the bank format and run
    ``negatives validate`` before training.
    """
    body = json.dumps({"prompt": prompt}).encode("utf-8")
    req = urllib.request.Request(endpoint, data=body,
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        payload = resp.read()
    out = Path(out_path)
    out.write_bytes(payload)
    log.info("saved %d bytes from %s to %s", len(payload), endpoint, out)
    return out


def hardest_negative(v, label_embeddings, true_index: int) -> int:
    """Index of the closest (L2) label embedding other than ``true_index``."""
    t = np.asarray(label_embeddings, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ValidationError("need at least two label embeddings to pick a negative")
    if not 0 <= true_index < t.shape[0]:
        raise ValidationError(f"true index {true_index} out of range")
    dist = np.linalg.norm(t - v, axis=1)
    dist[true_index] = np.inf
    return int(np.argmin(dist))


def hardest_negatives(anchors: torch.Tensor, label_embeddings: torch.Tensor,
                      targets: torch.Tensor) -> torch.Tensor:
    """Batched :func:`hardest_negative` on detached tensors."""
    if label_embeddings.shape[0] < 2:
        raise ValidationError("label space has no negative candidates")
    with torch.no_grad():
        dist = torch.cdist(anchors.detach().unsqueeze(0),
                           label_embeddings.detach().unsqueeze(0),
                           compute_mode="donot_use_mm_for_euclid_dist").squeeze(0)
        dist[torch.arange(len(targets)), targets] = float("inf")
        return torch.argmin(dist, dim=1)
