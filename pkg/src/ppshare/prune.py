"""Merge-pruning: fold similar prototypes together and finetune the head.

A merge removes prototype ``p``, adds its head column into the survivor
``q`` and hands ``p``'s classes over to ``q``; per-class head row sums are
therefore conserved exactly.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InvariantViolation, ValidationError
from .model import Model
from .similarity import rank_pairs, response_profile
from .trainer import FINETUNE_STRATEGIES, TrainConfig, accuracy, finetune

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    zeta: float = 0.10
    steps: int | None = None
    target_size: int | None = None
    strategy: str = "dd"
    finetune_iters: int = 25
    finetune_strategy: str = "h"
    inter_class_only: bool = False
    seed: int = 0
    stop_on_val_drop: float | None = None
    rerank_each_merge: bool = False
    profile_subsample: int | None = None

    def validate(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValidationError("zeta must lie in (0, 1)")
        if self.steps is None and self.target_size is None:
            raise ValidationError("give steps or target_size")
        if self.steps is not None and self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.target_size is not None and self.target_size < 1:
            raise ValidationError("target_size must be >= 1")
        if self.strategy not in ("dd", "di", "random"):
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.finetune_strategy not in FINETUNE_STRATEGIES:
            raise ValidationError(f"unknown finetune strategy {self.finetune_strategy!r}")
        if self.finetune_iters < 0:
            raise ValidationError("finetune_iters must be >= 0")
        return self

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown PruneConfig keys: {sorted(unknown)}")
        return cls(**obj).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class MergeRecord:
    step: int
    removed: int
    kept: int
    key: float
    classes: list

    def to_dict(self):
        return {"step": self.step, "removed": self.removed, "kept": self.kept,
                "key": self.key, "classes": list(self.classes)}


@dataclass
class PruneLog:
    config: dict
    initial_size: int
    initial_train_acc: float = float("nan")
    initial_val_acc: float = float("nan")
    steps: list = field(default_factory=list)

    def pool_sizes(self):
        return [s["pool_after"] for s in self.steps]

    def to_jsonl(self):
        return "".join(json.dumps(s, sort_keys=True) + "\n" for s in self.steps)

    def summary_rows(self):
        rows = [{"step": 0, "pool_size": self.initial_size, "pruned_fraction": 0.0,
                 "train_acc": self.initial_train_acc, "val_acc": self.initial_val_acc}]
        for s in self.steps:
            rows.append({"step": s["step"], "pool_size": s["pool_after"],
                         "pruned_fraction": 1.0 - s["pool_after"] / self.initial_size,
                         "train_acc": s["train_acc"], "val_acc": s["val_acc"]})
        return rows

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["step", "pool_size", "pruned_fraction", "train_acc", "val_acc"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.summary_rows():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def merge_pair(m: Model, remove: int, keep: int) -> Model:
    """Merge alive position ``remove`` into ``keep``; returns a new model."""
    if remove == keep:
        raise ValidationError("cannot merge a prototype into itself")
    if not (0 <= remove < m.M and 0 <= keep < m.M):
        raise ValidationError(f"prototype index out of range for M={m.M}")
    out = m.copy()
    out.head[:, keep] = m.head[:, keep] + m.head[:, remove]
    out.assigned[keep] = m.assigned[keep] | m.assigned[remove]
    dead_id, keep_id = int(m.ids[remove]), int(m.ids[keep])
    alive = np.ones(m.M, dtype=bool)
    alive[remove] = False
    out.head = np.ascontiguousarray(out.head[:, alive])
    out.prototypes = np.ascontiguousarray(out.prototypes[alive])
    out.assigned = [a for a, k in zip(out.assigned, alive) if k]
    out.ids = out.ids[alive]
    out.merge_parent[dead_id] = keep_id
    return out


def merge_direction(m: Model, a: int, b: int):
    """(remove, keep) positions: keep the larger L1 head column, ties keep the lower id."""
    na = float(np.abs(m.head[:, a]).sum())
    nb = float(np.abs(m.head[:, b]).sum())
    if na > nb or (na == nb and m.ids[a] < m.ids[b]):
        return b, a
    return a, b


def target_removals(M, zeta):
    return max(1, int(round(zeta * M)))


def prune_step(m: Model, ranking, zeta, step=1, max_removals=None):
    """One pass over ``ranking`` merging about ``zeta`` of the current pool.

    Pairs are resolved through the merge links so merges can cascade; after
    the target count is hit, pairs tying the last accepted key are still
    merged. ``max_removals`` caps the count (used to land on a target size).
    """
    if ranking.pool_fingerprint != m.fingerprint():
        raise ValidationError("ranking is stale for this prototype pool")
    r = target_removals(m.M, zeta)
    cap = m.M - 1 if max_removals is None else min(max_removals, m.M - 1)
    r = min(r, cap)
    records = []
    boundary = None
    for i, j, key in ranking:
        if len(records) >= cap:
            break
        if len(records) >= r and key != boundary:
            break
        ri, rj = m.find(i), m.find(j)
        if ri == rj:
            continue
        remove, keep = merge_direction(m, m.index_of(ri), m.index_of(rj))
        rid, kid = int(m.ids[remove]), int(m.ids[keep])
        moved = sorted(m.assigned[remove] - m.assigned[keep])
        m = merge_pair(m, remove, keep)
        records.append(MergeRecord(step, rid, kid, float(key), moved))
        if len(records) == r:
            boundary = key
    return m, records


def _rerank_step(m, data, cfg, step, max_removals):
    r = min(target_removals(m.M, cfg.zeta), m.M - 1)
    if max_removals is not None:
        r = min(r, max_removals)
    records = []
    for _ in range(r):
        ranking = _rank(m, data, cfg, step)
        if len(ranking) == 0:
            break
        i, j, key = next(iter(ranking))
        remove, keep = merge_direction(m, m.index_of(i), m.index_of(j))
        rid, kid = int(m.ids[remove]), int(m.ids[keep])
        moved = sorted(m.assigned[remove] - m.assigned[keep])
        m = merge_pair(m, remove, keep)
        records.append(MergeRecord(step, rid, kid, float(key), moved))
    return m, records


def _rank(m, data, cfg, step):
    profile = None
    if cfg.strategy == "dd":
        profile = response_profile(m, data, cfg.profile_subsample, cfg.seed + step)
    return rank_pairs(m, data, cfg.strategy, seed=cfg.seed * 1_000_003 + step, profile=profile,
                      inter_class_only=cfg.inter_class_only)


def prune(m: Model, train, val, cfg: PruneConfig, train_cfg: TrainConfig | None = None,
          callback=None):
    """Repeated rank / merge / finetune / evaluate until the stop condition.

    ``callback(step, model)`` is invoked with the unpruned model (step 0)
    and after every completed step.
    """
    cfg.validate()
    train_cfg = train_cfg or TrainConfig()
    initial = m.M
    plog = PruneLog(cfg.to_dict(), initial)
    plog.initial_train_acc = accuracy(m, train)
    plog.initial_val_acc = accuracy(m, val) if val is not None else float("nan")
    if callback is not None:
        callback(0, m)
    target = cfg.target_size if cfg.target_size is not None else 1
    step = 0
    while m.M > max(target, 1) and m.M >= 2:
        if cfg.steps is not None and step >= cfg.steps:
            break
        step += 1
        before = m.M
        room = before - target
        if cfg.rerank_each_merge:
            new, records = _rerank_step(m, train, cfg, step, room)
        else:
            ranking = _rank(m, train, cfg, step)
            if len(ranking) == 0:
                break
            new, records = prune_step(m, ranking, cfg.zeta, step, max_removals=room)
        if not records:
            break
        drift = _check_conservation(m, new)
        new = finetune(new, train, cfg.finetune_iters, train_cfg, cfg.finetune_strategy)
        entry = {
            "step": step,
            "pool_before": before,
            "pool_after": new.M,
            "merges": [r.to_dict() for r in records],
            "row_sum_drift": drift,
            "train_acc": accuracy(new, train),
            "val_acc": accuracy(new, val) if val is not None else float("nan"),
        }
        if (cfg.stop_on_val_drop is not None and val is not None
                and plog.initial_val_acc - entry["val_acc"] > cfg.stop_on_val_drop):
            entry["rolled_back"] = True
            plog.steps.append(entry)
            log.info("step %d: validation drop beyond %.4f, stopping", step, cfg.stop_on_val_drop)
            break
        plog.steps.append(entry)
        m = new
        if callback is not None:
            callback(step, m)
        log.info("step %d: pool %d -> %d, val %.4f", step, before, m.M, entry["val_acc"])
    return m, plog


def _check_conservation(before, after):
    for k in range(before.K):
        if not any(k in a for a in after.assigned):
            raise InvariantViolation(f"class {k} lost all of its prototypes")
    drift = np.abs(before.head.sum(axis=1) - after.head.sum(axis=1)).max()
    if drift > 1e-9 * max(1.0, np.abs(before.head).sum()):
        raise InvariantViolation(f"head row sums drifted by {drift}")
    return float(drift)
