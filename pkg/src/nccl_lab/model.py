"""Two-layer tanh encoder, linear classifier head, analytic backprop and
JSON checkpoints.

Every function accepts either one input vector or a stack of row vectors.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError
from .numeric import as_vec

# classify() calls per classifier tag; lets the pipeline prove which heads were read
CLASSIFY_CALLS: Counter = Counter()


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, d_in = self.W1.shape
        d_emb, h2 = self.W2.shape
        if self.b1.shape != (h,) or h2 != h or self.b2.shape != (d_emb,):
            raise DimensionError("inconsistent encoder parameter shapes")
        if d_emb < 2:
            raise ParameterError("embedding dimension must be at least 2")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def d_emb(self) -> int:
        return self.W2.shape[0]

    def blocks(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.blocks().items()})


@dataclass
class ClassifierParams:
    W: np.ndarray
    b: np.ndarray
    tag: str = "new"
    frozen: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError("inconsistent classifier parameter shapes")
        if self.W.shape[0] < 2:
            raise ParameterError("classifier needs at least two classes")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def blocks(self) -> dict:
        return {"W": self.W, "b": self.b}

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.W.copy(), self.b.copy(), self.tag, self.frozen)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.W, self.b):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class LabeledSample:
    id: int
    label: int
    split: str
    x: np.ndarray
    outlier: bool = field(default=False)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(rng: np.random.Generator, d_in: int, hidden: int, d_emb: int) -> EncoderParams:
    return EncoderParams(
        W1=_uniform(rng, (hidden, d_in), d_in),
        b1=_uniform(rng, (hidden,), d_in),
        W2=_uniform(rng, (d_emb, hidden), hidden),
        b2=_uniform(rng, (d_emb,), hidden),
    )


def init_classifier(rng: np.random.Generator, d_emb: int, n_classes: int, tag="new") -> ClassifierParams:
    return ClassifierParams(
        W=_uniform(rng, (n_classes, d_emb), d_emb),
        b=_uniform(rng, (n_classes,), d_emb),
        tag=tag,
    )


def _hidden(p: EncoderParams, x: np.ndarray) -> np.ndarray:
    x = as_vec(x)
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"input has {x.shape[-1]} features, encoder expects {p.d_in}")
    return np.tanh(x @ p.W1.T + p.b1)


def encode(p: EncoderParams, x) -> np.ndarray:
    return _hidden(p, x) @ p.W2.T + p.b2


def classify(c: ClassifierParams, z) -> np.ndarray:
    z = as_vec(z)
    if z.shape[-1] != c.W.shape[1]:
        raise DimensionError(f"embedding has {z.shape[-1]} dims, classifier expects {c.W.shape[1]}")
    CLASSIFY_CALLS[c.tag] += 1
    return z @ c.W.T + c.b


def encode_backward(p: EncoderParams, x, upstream_grad) -> dict:
    """Gradients of ``sum(upstream_grad * encode(p, x))`` per parameter block.

    For stacked inputs the per-sample gradients are summed.
    """
    x = as_vec(x)
    g = as_vec(upstream_grad)
    if g.shape[-1] != p.d_emb or g.shape[:-1] != x.shape[:-1]:
        raise DimensionError("upstream gradient does not match encoder output")
    H = _hidden(p, x)
    X2, H2, G2 = np.atleast_2d(x), np.atleast_2d(H), np.atleast_2d(g)
    dA = (G2 @ p.W2) * (1.0 - H2 * H2)
    return {
        "W1": dA.T @ X2,
        "b1": dA.sum(axis=0),
        "W2": G2.T @ H2,
        "b2": G2.sum(axis=0),
    }


def classifier_backward(c: ClassifierParams, z, upstream_grad) -> tuple[dict, np.ndarray]:
    """Parameter gradients and input gradient of ``sum(upstream_grad * classify(c, z))``."""
    Z2, G2 = np.atleast_2d(as_vec(z)), np.atleast_2d(as_vec(upstream_grad))
    grads = {"W": G2.T @ Z2, "b": G2.sum(axis=0)}
    dz = as_vec(upstream_grad) @ c.W
    return grads, dz


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "nccl-lab-checkpoint/1"


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _unpack(d: dict) -> np.ndarray:
    arr = np.asarray(d["data"], dtype=np.float64)
    return arr.reshape(d["shape"])


def checkpoint_dict(encoder: EncoderParams, classifier: ClassifierParams | None,
                    seed: int, config_hash: str) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "config_hash": config_hash,
        "encoder": {k: _pack(v) for k, v in encoder.blocks().items()},
        "classifier": None,
    }
    if classifier is not None:
        doc["classifier"] = {k: _pack(v) for k, v in classifier.blocks().items()}
        doc["classifier"]["tag"] = classifier.tag
        doc["classifier"]["frozen"] = classifier.frozen
    return doc


def save_checkpoint(path, encoder, classifier, seed, config_hash) -> None:
    doc = checkpoint_dict(encoder, classifier, seed, config_hash)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[EncoderParams, ClassifierParams | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path}: not a checkpoint file")
    enc = EncoderParams(**{k: _unpack(doc["encoder"][k]) for k in ("W1", "b1", "W2", "b2")})
    clf = None
    if doc.get("classifier"):
        c = doc["classifier"]
        clf = ClassifierParams(_unpack(c["W"]), _unpack(c["b"]), c.get("tag", "new"), c.get("frozen", False))
    meta = {"seed": doc.get("seed"), "config_hash": doc.get("config_hash")}
    return enc, clf, meta
