"""Frozen memory bank of old-model embeddings and, after the classifier
freeze, their logits under the new head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySetError, ProtocolError
from .model import ClassifierParams, EncoderParams, classify, encode
from .numeric import zero_pad


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class OldEmbeddingBank:
    ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    credible: np.ndarray
    label_index: dict = field(compare=False, repr=False)

    @classmethod
    def from_arrays(cls, ids, labels, embeddings, credible=None):
        ids = _readonly(ids, np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ProtocolError("bank ids must be unique")
        labels = _readonly(labels, np.int64)
        embeddings = _readonly(embeddings, np.float64)
        if credible is None:
            credible = np.ones(len(ids), dtype=bool)
        credible = _readonly(credible, bool)
        index: dict[int, list[int]] = {}
        for i, lab in zip(ids.tolist(), labels.tolist()):
            index.setdefault(lab, []).append(i)
        return cls(ids, labels, embeddings, credible, index)

    def __len__(self):
        return len(self.ids)

    def row_of(self, entry_id: int) -> int:
        rows = getattr(self, "_rows", None)
        if rows is None:
            rows = {int(i): r for r, i in enumerate(self.ids.tolist())}
            object.__setattr__(self, "_rows", rows)
        return rows[int(entry_id)]

    def has(self, entry_id: int) -> bool:
        try:
            self.row_of(entry_id)
        except KeyError:
            return False
        return True

    def with_credible(self, credible) -> "OldEmbeddingBank":
        return OldEmbeddingBank.from_arrays(self.ids, self.labels, self.embeddings, credible)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class DiscriminativeBank:
    ids: np.ndarray
    logits: np.ndarray
    classifier_fingerprint: str


def build_bank(old_encoder: EncoderParams, samples) -> OldEmbeddingBank:
    samples = list(samples)
    if not samples:
        raise EmptySetError("cannot build a bank from an empty dataset")
    X = np.stack([s.x for s in samples])
    return OldEmbeddingBank.from_arrays(
        [s.id for s in samples], [s.label for s in samples], encode(old_encoder, X))


def positives(bank: OldEmbeddingBank, anchor_id: int, anchor_label: int) -> list[int]:
    out = []
    for i in bank.label_index.get(int(anchor_label), []):
        if i != anchor_id and bank.credible[bank.row_of(i)]:
            out.append(i)
    return out


def candidates(bank: OldEmbeddingBank, anchor_id: int, negative_cap=None, rng=None,
               anchor_label=None) -> list[int]:
    """Credible entries other than the anchor.

    With ``negative_cap`` set, keeps every positive and a uniform sample of at
    most ``negative_cap`` negatives drawn from ``rng``.
    """
    keep = bank.credible & (bank.ids != anchor_id)
    if negative_cap is None:
        return bank.ids[keep].tolist()
    if anchor_label is None:
        anchor_label = int(bank.labels[bank.row_of(anchor_id)])
    pos = keep & (bank.labels == anchor_label)
    neg_rows = np.flatnonzero(keep & ~pos)
    if len(neg_rows) > negative_cap:
        neg_rows = np.sort(rng.choice(neg_rows, size=negative_cap, replace=False))
    rows = np.sort(np.concatenate([np.flatnonzero(pos), neg_rows]))
    return bank.ids[rows].tolist()


def batch_masks(bank: OldEmbeddingBank, anchor_ids, anchor_labels, negative_cap=None, rng=None):
    """Candidate and positive masks, shape (len(anchor_ids), len(bank))."""
    anchor_ids = np.asarray(anchor_ids)
    anchor_labels = np.asarray(anchor_labels)
    cand = bank.credible[None, :] & (bank.ids[None, :] != anchor_ids[:, None])
    pos = cand & (bank.labels[None, :] == anchor_labels[:, None])
    if negative_cap is not None:
        for r in range(len(anchor_ids)):
            neg_rows = np.flatnonzero(cand[r] & ~pos[r])
            if len(neg_rows) > negative_cap:
                drop = np.setdiff1d(neg_rows, rng.choice(neg_rows, size=negative_cap, replace=False))
                cand[r, drop] = False
    return cand, pos


def build_discriminative_bank(bank: OldEmbeddingBank, frozen_classifier: ClassifierParams) -> DiscriminativeBank:
    if not frozen_classifier.frozen:
        raise ProtocolError("the discriminative bank needs a frozen classifier")
    rows = np.flatnonzero(bank.credible)
    emb = zero_pad(bank.embeddings[rows], frozen_classifier.W.shape[1])
    logits = classify(frozen_classifier, emb) if len(rows) else np.zeros((0, frozen_classifier.n_classes))
    return DiscriminativeBank(_readonly(bank.ids[rows]), _readonly(logits), frozen_classifier.fingerprint())


def dump_bank(bank: OldEmbeddingBank, path) -> None:
    with open(path, "w") as fh:
        for i, lab, v, c in zip(bank.ids.tolist(), bank.labels.tolist(), bank.embeddings, bank.credible.tolist()):
            fh.write(json.dumps({"id": i, "label": lab, "v": [float(x) for x in v], "credible": c}) + "\n")


def load_bank(path) -> OldEmbeddingBank:
    ids, labels, vecs, cred = [], [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        ids.append(rec["id"])
        labels.append(rec["label"])
        vecs.append(rec["v"])
        cred.append(rec.get("credible", True))
    if not ids:
        raise EmptySetError(f"{path}: no entries")
    return OldEmbeddingBank.from_arrays(ids, labels, np.asarray(vecs, dtype=np.float64), cred)
