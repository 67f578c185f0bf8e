"""Mini-batch SGD for the old model and the new model.

The new model trains in two stages. Stage 1 minimizes cross-entropy plus the
weighted embedding-space contrastive term against the old bank. Stage 2
freezes the classifier head, caches the head's logits of every credible old
embedding and adds the discriminative-space term. Baseline modes: plain
cross-entropy (``independent``) and L2 regression onto the sample's own old
embedding (``l2_regression``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .bank import OldEmbeddingBank, batch_masks, build_discriminative_bank
from .errors import DivergenceError, NumericError, ParameterError
from .losses import consensus_weights, contrastive_batch, cross_entropy_batch
from .model import (
    ClassifierParams,
    EncoderParams,
    classifier_backward,
    classify,
    encode,
    encode_backward,
    init_classifier,
    init_encoder,
)
from .numeric import make_rng, zero_pad

log = logging.getLogger(__name__)

MODES = ("nccl", "independent", "l2_regression")


@dataclass
class TrainingConfig:
    alpha: float = 0.01
    beta: float = 0.01
    tau: float = 1.0
    threshold_factor: float = 0.5
    learning_rate: float = 0.3
    epochs_stage1: int = 225
    epochs_stage2: int = 75
    batch_size: int = 8
    seed: int = 1
    mode: str = "nccl"
    normalize_embeddings: bool = True
    normalize_logits: bool = True
    negative_cap: int | None = None
    hidden: int = 32
    d_emb: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha/beta: must be non-negative")
        if not self.tau > 0:
            raise ParameterError("tau: must be positive")
        if not 0 < self.threshold_factor <= 1:
            raise ParameterError("threshold_factor: must lie in (0, 1]")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ParameterError("epochs: must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size: must be >= 1")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate: must be non-negative")
        if self.mode not in MODES:
            raise ParameterError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.negative_cap is not None and self.negative_cap < 0:
            raise ParameterError("negative_cap: must be non-negative")
        if self.d_emb < 2 or self.hidden < 1:
            raise ParameterError("d_emb/hidden: invalid architecture")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingState:
    encoder: EncoderParams
    classifier: ClassifierParams
    classifier_frozen: bool = False
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    frozen_snapshot: str | None = None
    discriminative_fingerprint: str | None = None
    counters: dict = field(default_factory=lambda: {"noncredible_in_candidates": 0, "skipped_anchors": 0})

    @property
    def skipped_per_epoch(self) -> list:
        return [h["skipped_anchors"] for h in self.loss_history]


def classifier_bytes(c: ClassifierParams) -> str:
    return json.dumps(checkpoint_dict_for_classifier(c), sort_keys=True)


def checkpoint_dict_for_classifier(c: ClassifierParams) -> dict:
    return {"W": c.W.reshape(-1).tolist(), "b": c.b.tolist(), "shape": list(c.W.shape)}


def sgd_step(params: dict, grads: dict, learning_rate: float) -> dict:
    """``p - lr * g`` for every block present in ``grads``; other blocks pass through."""
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        out[name] = p - learning_rate * g
    return out


def _stack(samples):
    X = np.stack([s.x for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    ids = np.array([s.id for s in samples], dtype=np.int64)
    return X, y, ids


def _init_models(cfg: TrainingConfig, d_in: int, n_classes: int, tag: str):
    rng = make_rng(cfg.seed, "init")
    enc = init_encoder(rng, d_in, cfg.hidden, cfg.d_emb)
    clf = init_classifier(rng, cfg.d_emb, n_classes, tag=tag)
    return enc, clf


class _BankView:
    """Bank arrays laid out for the batched kernels."""

    def __init__(self, bank: OldEmbeddingBank, ids: np.ndarray, d_emb: int):
        self.bank = bank
        missing = [i for i in ids.tolist() if not bank.has(i)]
        if missing:
            raise ParameterError(f"{len(missing)} training samples have no bank entry (e.g. id {missing[0]})")
        self.rows = np.array([bank.row_of(i) for i in ids.tolist()], dtype=np.int64)
        self.padded = zero_pad(bank.embeddings, d_emb)
        self.weights = consensus_weights(bank.embeddings[self.rows], bank.embeddings)
        self.anchor_credible = bank.credible[self.rows]
        self.logits = None


def train(cfg: TrainingConfig, samples, bank: OldEmbeddingBank | None, n_classes: int,
          tag: str = "new") -> TrainingState:
    """Train a fresh encoder + head on ``samples`` (labels in [0, n_classes))."""
    cfg.validate()
    samples = list(samples)
    X, y, ids = _stack(samples)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    enc, clf = _init_models(cfg, X.shape[1], n_classes, tag)
    state = TrainingState(enc, clf)
    if cfg.mode != "independent" and bank is None:
        raise ParameterError(f"mode {cfg.mode} needs an old-embedding bank")
    view = _BankView(bank, ids, cfg.d_emb) if cfg.mode != "independent" else None

    shuffle_rng = make_rng(cfg.seed, "shuffle")
    neg_rng = make_rng(cfg.seed, "negatives")
    n = len(samples)
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2
    for epoch in range(total_epochs):
        stage = 1 if epoch < cfg.epochs_stage1 else 2
        if stage == 2 and cfg.mode == "nccl" and not state.classifier_frozen:
            _freeze(state, view)
        sums = {"l_new": 0.0, "l1": 0.0, "l2": 0.0, "l2_reg": 0.0, "total": 0.0}
        skipped = 0
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = np.sort(order[start:start + cfg.batch_size])
            # overflow surfaces as a non-finite loss, which is reported below
            with np.errstate(over="ignore", invalid="ignore"):
                terms, n_skip = _step(state, cfg, X[batch], y[batch], ids[batch], batch, view, neg_rng)
            skipped += n_skip
            for k, v in terms.items():
                sums[k] += v * len(batch)
        record = {k: v / n for k, v in sums.items()}
        if not np.isfinite(record["total"]):
            raise DivergenceError(epoch)
        record.update(epoch=epoch, stage=stage, skipped_anchors=skipped)
        state.loss_history.append(record)
        state.counters["skipped_anchors"] += skipped
        state.epoch = epoch + 1
        log.debug("epoch %d stage %d total %.6f", epoch, stage, record["total"])
    return state


def _freeze(state: TrainingState, view: _BankView):
    state.classifier.frozen = True
    state.classifier_frozen = True
    state.frozen_snapshot = classifier_bytes(state.classifier)
    disc = build_discriminative_bank(view.bank, state.classifier)
    state.discriminative_fingerprint = disc.classifier_fingerprint
    full = np.zeros((len(view.bank), state.classifier.n_classes))
    full[[view.bank.row_of(i) for i in disc.ids.tolist()]] = disc.logits
    view.logits = full


def batch_objective(encoder, classifier, cfg, Xb, yb, masks=None, weights=None, bank_vecs=None,
                    bank_logits=None, targets=None, frozen=False):
    """Batch-mean objective and its gradients.

    masks: (cand, pos) for the contrastive terms; weights: consensus weights;
    bank_vecs: padded old embeddings; bank_logits: frozen-head logits of the
    bank (enables the discriminative term); targets: old embeddings for the
    regression baseline. Returns (terms, encoder_grads, classifier_grads,
    skipped_mask).
    """
    b = len(yb)
    Z = encode(encoder, Xb)
    logits = classify(classifier, Z)
    ce, g_logits = cross_entropy_batch(logits, yb)
    clf_grads, g_Z = classifier_backward(classifier, Z, g_logits / b)
    terms = {"l_new": float(ce.mean()), "l1": 0.0, "l2": 0.0, "l2_reg": 0.0}
    skipped = np.zeros(b, dtype=bool)
    if masks is not None:
        cand, pos = masks
        v1, g1, skipped = contrastive_batch(Z, bank_vecs, cand, pos, weights, cfg.tau, cfg.normalize_embeddings)
        terms["l1"] = float(v1.mean())
        g_Z = g_Z + cfg.alpha * g1 / b
        if bank_logits is not None:
            v2, g2, _ = contrastive_batch(logits, bank_logits, cand, pos, weights, cfg.tau, cfg.normalize_logits)
            terms["l2"] = float(v2.mean())
            g_Z = g_Z + cfg.beta * (g2 @ classifier.W) / b
    if targets is not None:
        diff = Z - targets
        terms["l2_reg"] = float(np.mean(np.sum(diff * diff, axis=1)))
        g_Z = g_Z + cfg.alpha * 2.0 * diff / b
    terms["total"] = terms["l_new"] + cfg.alpha * (terms["l1"] + terms["l2_reg"]) + cfg.beta * terms["l2"]
    enc_grads = encode_backward(encoder, Xb, g_Z)
    if frozen:
        clf_grads = {}
    return terms, enc_grads, clf_grads, skipped


def _step(state, cfg, Xb, yb, idb, batch_idx, view, neg_rng):
    kwargs = {}
    if cfg.mode == "nccl":
        bank = view.bank
        cand, pos = batch_masks(bank, idb, yb, cfg.negative_cap, neg_rng)
        state.counters["noncredible_in_candidates"] += int(np.sum(cand & ~bank.credible[None, :]))
        # filtered anchors take no part in either contrastive term
        pos &= view.anchor_credible[batch_idx][:, None]
        kwargs = dict(masks=(cand, pos), weights=view.weights[batch_idx], bank_vecs=view.padded,
                      bank_logits=view.logits if state.classifier_frozen else None)
    elif cfg.mode == "l2_regression":
        kwargs = dict(targets=view.padded[view.rows[batch_idx]])
    terms, enc_grads, clf_grads, skipped = batch_objective(
        state.encoder, state.classifier, cfg, Xb, yb, frozen=state.classifier_frozen, **kwargs)
    if not np.isfinite(terms["total"]):
        raise DivergenceError(state.epoch)
    state.encoder = EncoderParams(**sgd_step(state.encoder.blocks(), enc_grads, cfg.learning_rate))
    if not state.classifier_frozen:
        clf = state.classifier
        new = sgd_step(clf.blocks(), clf_grads, cfg.learning_rate)
        state.classifier = ClassifierParams(new["W"], new["b"], clf.tag, False)
    return terms, int(skipped.sum())


def train_old(cfg: TrainingConfig, samples, n_classes: int) -> tuple[EncoderParams, ClassifierParams]:
    """Plain cross-entropy training of the old model on its identity subset."""
    old_cfg = TrainingConfig(**{**cfg.to_dict(), "mode": "independent"})
    state = train(old_cfg, samples, None, n_classes, tag="old")
    return state.encoder, state.classifier
