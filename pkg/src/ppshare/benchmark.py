"""Planted-redundancy benchmark: synthesize, train, project, then prune under
several protocols and record accuracy and patch-assignment curves.

One seed drives everything (data, initialisation, pruning tie-breaks), so a
run is reproducible bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

from .analysis import Comparison, compare_strategies
from .features import SynthSpec, synthesize
from .prune import PruneConfig
from .trainer import TrainConfig, accuracy, finetune_head, project_prototypes, train_phase1

log = logging.getLogger(__name__)

BENCH_SPEC = SynthSpec(K=10, D=16, H=3, W=3, images_per_class=40, clusters_per_class=4,
                       shared_clusters=3, cluster_sigma=0.2, val_images_per_class=100)


@dataclass
class BenchmarkConfig:
    spec: SynthSpec = field(default_factory=lambda: BENCH_SPEC)
    protos_per_class: int = 10
    epochs: int = 150
    lr: float = 1e-2
    lr_decay_every: int = 50
    push_iters: int = 100
    finetune_iters: int = 25
    finetune_lr_head: float = 1e-3
    finetune_lr_protos: float = 3e-3
    finetune_lr_addon: float = 3e-3
    zeta: float = 0.10
    compare_zetas: tuple = (0.05, 0.15)
    final_fraction: float = 0.70
    rate_n: int = 5

    def train_config(self, seed):
        return TrainConfig(epochs=self.epochs, add_on=True, protos_per_class=self.protos_per_class,
                           lr_head=self.lr, lr_protos=self.lr, lr_addon=self.lr,
                           lr_decay_every=self.lr_decay_every, seed=seed)

    def finetune_config(self, seed):
        base = self.train_config(seed).to_dict()
        base.update(lr_head=self.finetune_lr_head, lr_protos=self.finetune_lr_protos,
                    lr_addon=self.finetune_lr_addon)
        return TrainConfig(**base)

    def to_dict(self):
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["compare_zetas"] = list(self.compare_zetas)
        return d


def prepare(seed, cfg: BenchmarkConfig | None = None):
    """Data plus a trained, projected model: ``(model, train, val, history)``."""
    cfg = cfg or BenchmarkConfig()
    train, val, _ = synthesize(cfg.spec, seed)
    m, history = train_phase1(train, cfg.train_config(seed), val)
    m = project_prototypes(m, train)
    m = finetune_head(m, train, cfg.push_iters, cfg.finetune_config(seed))
    return m, train, val, history


def run_seed(seed, cfg: BenchmarkConfig | None = None):
    """All pruning protocols for one seed; returns ``(summary, comparison)``."""
    cfg = cfg or BenchmarkConfig()
    t0 = time.perf_counter()
    m, train, val, _ = prepare(seed, cfg)
    target = max(1, int(round((1.0 - cfg.final_fraction) * m.M)))
    pcfg = PruneConfig(zeta=cfg.zeta, target_size=target, finetune_iters=cfg.finetune_iters, seed=seed)
    ft = cfg.finetune_config(seed)
    comp = compare_strategies(m, train, val, pcfg, ft, seeds=(seed,), rate_n=cfg.rate_n)
    compare_strategies(m, train, val, pcfg, ft, strategies=("dd",), seeds=(seed,),
                       zetas=cfg.compare_zetas, out=comp)
    compare_strategies(m, train, val, pcfg, ft, strategies=("dd",), seeds=(seed,),
                       finetunes=("ph", "all"), out=comp)
    curve = comp.curve("dd", seed, zeta=cfg.zeta)
    summary = {
        "seed": seed,
        "pool": m.M,
        "val_unpruned": accuracy(m, val),
        "acc_at_50": {s: comp.accuracy_at(s, seed, 0.5, zeta=cfg.zeta) for s in ("dd", "di", "random")},
        "acc_by_zeta": {str(z): comp.accuracy_at("dd", seed, cfg.final_fraction, zeta=z)
                        for z in cfg.compare_zetas},
        "acc_by_finetune": {f: comp.accuracy_at("dd", seed, cfg.final_fraction, finetune=f, zeta=cfg.zeta)
                            for f in ("h", "ph", "all")},
        "rate_first": curve[0]["assignment_rate"],
        "rate_final": curve[-1]["assignment_rate"],
        "seconds": time.perf_counter() - t0,
    }
    log.info("seed %d done in %.1fs", seed, summary["seconds"])
    return summary, comp


def run_benchmark(seeds=range(5), cfg: BenchmarkConfig | None = None, out=None):
    """Run every seed; optionally write ``comparison.csv`` and ``summary.json`` to ``out``."""
    cfg = cfg or BenchmarkConfig()
    summaries, comp = [], Comparison()
    for seed in seeds:
        s, c = run_seed(seed, cfg)
        summaries.append(s)
        comp.rows.extend(c.rows)
    if out is not None:
        from pathlib import Path

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(comp.to_csv())
        with open(out / "summary.json", "w") as fh:
            json.dump({"config": cfg.to_dict(), "seeds": summaries}, fh, indent=1, default=_nan_safe)
            fh.write("\n")
    return summaries, comp


def _nan_safe(x):
    x = float(x)
    return None if math.isnan(x) else x
