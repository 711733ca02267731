"""Evaluation and interpretation: accuracy, class-sharing graph, patch assignment."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import Model, top_activations
from .prune import PruneConfig, prune
from .trainer import TrainConfig


def evaluate(m: Model, data):
    """Top-1 accuracy, per-class accuracy and the (true, predicted) confusion counts."""
    if data.N == 0:
        raise ValidationError("evaluate on an empty dataset")
    pred = m.predict_batch(data.features64())
    conf = np.zeros((m.K, m.K), dtype=np.int64)
    np.add.at(conf, (data.labels, pred), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return {
        "accuracy": float(np.trace(conf) / data.N),
        "per_class": per_class.tolist(),
        "confusion": conf.tolist(),
    }


@dataclass
class ClassGraph:
    num_classes: int
    edges: dict = field(default_factory=dict)  # (a, b) with a < b -> weight
    labels: list | None = None

    def weight(self, a, b):
        if a == b:
            return 0
        return self.edges.get((min(a, b), max(a, b)), 0)

    def to_dot(self):
        lines = ["graph classes {"]
        for k in range(self.num_classes):
            lines.append(f'  {k} [label="{self._label(k)}"];')
        for (a, b), w in sorted(self.edges.items()):
            lines.append(f"  {a} -- {b} [weight={w}, penwidth={w}];")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        obj = {
            "nodes": [{"id": k, "label": self._label(k)} for k in range(self.num_classes)],
            "edges": [{"a": a, "b": b, "weight": w} for (a, b), w in sorted(self.edges.items())],
        }
        return json.dumps(obj, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        nodes = obj["nodes"]
        g = cls(len(nodes), labels=[n["label"] for n in nodes])
        for e in obj["edges"]:
            g.edges[(min(e["a"], e["b"]), max(e["a"], e["b"]))] = int(e["weight"])
        return g

    def _label(self, k):
        return str(self.labels[k]) if self.labels else str(k)


def build_class_graph(m: Model, labels=None) -> ClassGraph:
    """Edge weight between two classes = number of alive prototypes they share."""
    g = ClassGraph(m.K, labels=labels)
    for a_set in m.assigned:
        cls = sorted(a_set)
        for i, a in enumerate(cls):
            for b in cls[i + 1:]:
                g.edges[(a, b)] = g.edges.get((a, b), 0) + 1
    return g


def patch_assignment_rate(m: Model, data, n=5):
    """Share of each image's top-``n`` (patch, best prototype) activations whose
    prototype is assigned to the image's true class."""
    if data.N == 0:
        raise ValidationError("assignment rate over an empty dataset")
    hits = total = 0
    for patches, label in zip(data.features64(), data.labels):
        for _, proto, _ in top_activations(m, patches, n):
            hits += int(label) in m.assigned[proto]
            total += 1
    return hits / total


@dataclass
class Comparison:
    rows: list = field(default_factory=list)

    def curve(self, strategy, seed, finetune="h", zeta=None):
        return [r for r in self.rows if r["strategy"] == strategy and r["seed"] == seed
                and r["finetune"] == finetune and (zeta is None or r["zeta"] == zeta)]

    def accuracy_at(self, strategy, seed, fraction, finetune="h", zeta=None, column="val_acc"):
        """Accuracy at the first step whose pruned fraction reaches ``fraction``."""
        for r in self.curve(strategy, seed, finetune, zeta):
            if r["pruned_fraction"] >= fraction - 1e-12:
                return r[column]
        return float("nan")

    def to_csv(self):
        cols = ["strategy", "finetune", "zeta", "seed", "step", "pool_size",
                "pruned_fraction", "train_acc", "val_acc", "assignment_rate"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def finetune_table(self, fraction):
        """Mean validation accuracy per finetune strategy at ``fraction`` pruned."""
        out = {}
        for ft in sorted({r["finetune"] for r in self.rows}):
            accs = [self.accuracy_at(s, seed, fraction, ft)
                    for s, seed in sorted({(r["strategy"], r["seed"]) for r in self.rows if r["finetune"] == ft})]
            out[ft] = float(np.nanmean(accs)) if accs else float("nan")
        return out


def compare_strategies(model: Model, train, val, prune_cfg: PruneConfig, train_cfg: TrainConfig | None = None,
                       strategies=("dd", "di", "random"), seeds=(0,), finetunes=("h",),
                       zetas=None, rate_n=None, rate_data=None, out=None) -> Comparison:
    """Prune the same checkpoint under every (strategy, finetune, zeta, seed) combination."""
    out = out or Comparison()
    zetas = zetas or (prune_cfg.zeta,)
    for ft in finetunes:
        for zeta in zetas:
            for strategy in strategies:
                for seed in seeds:
                    cfg = PruneConfig(**{**prune_cfg.to_dict(), "strategy": strategy, "seed": seed,
                                         "finetune_strategy": ft, "zeta": zeta})
                    rates = {}
                    cb = None
                    if rate_n:
                        def cb(step, mm, rates=rates):
                            rates[step] = patch_assignment_rate(mm, rate_data or val, rate_n)
                    _, plog = prune(model, train, val, cfg, train_cfg, callback=cb)
                    for r in plog.summary_rows():
                        out.rows.append({"strategy": strategy, "finetune": ft, "zeta": zeta, "seed": seed,
                                         **r, "assignment_rate": rates.get(r["step"], float("nan"))})
    return out
