"""Run configuration: JSON file plus dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataSpec
from .errors import ParameterError
from .evaluation import CMC_KS
from .trainer import TrainingConfig

SECTIONS = ("data", "split", "filter", "train_old", "train_new", "eval")


def default_config() -> dict:
    """The reference desk-scale configuration."""
    return {
        "name": "reference",
        "data": DataSpec().to_dict(),
        "split": {"old_fraction": 0.5, "overlap": True},
        "filter": {"spread": "mean_sq"},
        "train_old": TrainingConfig(mode="independent").to_dict(),
        "train_new": TrainingConfig().to_dict(),
        "eval": {"distance": "cosine", "max_triplets": 2_000_000, "cmc_ks": list(CMC_KS)},
    }


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ParameterError(f"{where}: unknown config key")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ParameterError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ParameterError(f"{key}: unknown config key")
        node = node[p]
    if parts[-1] not in node:
        raise ParameterError(f"{key}: unknown config key")
    node[parts[-1]] = parse_value(raw)
    return cfg


def set_seed(cfg: dict, seed: int) -> dict:
    cfg["data"]["seed"] = seed
    cfg["train_old"]["seed"] = seed
    cfg["train_new"]["seed"] = seed
    return cfg


def load_config(path=None, overrides=(), seed=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
        cfg = _merge(cfg, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        set_seed(cfg, int(seed))
    validate(cfg)
    return cfg


@dataclass
class RunConfig:
    name: str
    data: DataSpec
    old_fraction: float
    overlap: bool
    spread: str
    train_old: TrainingConfig
    train_new: TrainingConfig
    distance: str = "cosine"
    max_triplets: int = 2_000_000
    cmc_ks: tuple = CMC_KS
    raw: dict = field(default_factory=dict, repr=False)


def validate(cfg: dict) -> RunConfig:
    for section in SECTIONS:
        if not isinstance(cfg.get(section), dict):
            raise ParameterError(f"{section}: missing section")
    try:
        data = DataSpec(**cfg["data"])
        train_old = TrainingConfig(**cfg["train_old"])
        train_new = TrainingConfig(**cfg["train_new"])
    except TypeError as exc:
        raise ParameterError(str(exc)) from exc
    if train_old.d_emb > train_new.d_emb:
        raise ParameterError("train_new.d_emb: must be >= train_old.d_emb (old embeddings are zero-padded)")
    split = cfg["split"]
    of = split.get("old_fraction")
    if not isinstance(of, (int, float)) or not 0 < of < 1:
        raise ParameterError("split.old_fraction: must lie strictly between 0 and 1")
    spread = cfg["filter"].get("spread", "mean_sq")
    if spread not in ("mean_sq", "var_sq"):
        raise ParameterError("filter.spread: must be 'mean_sq' or 'var_sq'")
    ev = cfg["eval"]
    if ev.get("distance") not in ("cosine", "euclidean"):
        raise ParameterError("eval.distance: must be 'cosine' or 'euclidean'")
    return RunConfig(
        name=str(cfg.get("name", "run")), data=data, old_fraction=float(of), overlap=bool(split.get("overlap", True)),
        spread=spread, train_old=train_old, train_new=train_new, distance=ev["distance"],
        max_triplets=int(ev.get("max_triplets", 2_000_000)), cmc_ks=tuple(ev.get("cmc_ks", CMC_KS)), raw=cfg,
    )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
