"""Numeric checker for the logit-change bounds of prototype merging.

Given exclusive prototypes ``P_k``, a plan merging some of them into
retained prototypes of *other* classes, and ``delta`` in (0, 1), the logit
of the true class ``c`` can drop by at most ``|merged_c| * log((1+d)(2-d))``
and any other class can rise by at most its own such amount, provided the
distance conditions below hold. The logit in question is the one built on
each prototype's globally nearest training patch ``z_p``::

    L_k = sum_p w(k, p) * log((|z_p - p|^2 + 1) / (|z_p - p|^2 + eps))

Conditions checked by :func:`check_assumptions`:

``A1``  targets are retained prototypes of other classes
``A2``  every merged prototype has exactly one target
``A3``  ``z_p`` is the nearest training patch (computed, always holds)
``A4a`` for k != c: |p - q| <= theta |z_p - p| - sqrt(eps)
``A4b`` for c: |q - p| <= (sqrt(1+d) - 1) |z_p - p| and |z_p - p| <= sqrt(1-d)
``A5``  head weight 1 on own prototypes, 0 elsewhere
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .features import FeatureDataset
from .model import Model, log_similarity, logits, nearest_patches, predict
from .prune import merge_pair

REL_TOL = 1e-9


class InfeasibleInstance(ValidationError):
    """Requested radii cannot satisfy the distance conditions."""


def theta(delta):
    """min(sqrt(1+d) - 1, 1 - 1/sqrt(2-d)); 0 at d=1 (degenerate)."""
    return min(math.sqrt(1.0 + delta) - 1.0, 1.0 - 1.0 / math.sqrt(2.0 - delta))


def delta_max(delta, merged_count):
    """Logit-change bound for a class with ``merged_count`` merged-away prototypes."""
    return merged_count * math.log((1.0 + delta) * (2.0 - delta))


@dataclass(frozen=True)
class TheoremParams:
    delta: float
    epsilon: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValidationError(f"delta must lie in the open interval (0, 1), got {self.delta}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError("epsilon must lie in (0, 1)")

    @property
    def theta(self):
        return theta(self.delta)


def _le(lhs, rhs, tol=REL_TOL):
    return lhs <= rhs + tol * max(abs(lhs), abs(rhs), 1.0)


@dataclass
class MergePlan:
    """Map merged-away prototype id -> retained target id."""

    targets: dict

    def __post_init__(self):
        self.targets = {int(k): int(v) for k, v in self.targets.items()}

    def by_class(self, m: Model):
        """Per class: (retained ids, merged ids, target ids as a multiset list)."""
        out = {}
        for k in range(m.K):
            members = [int(i) for i, a in zip(m.ids, m.assigned) if k in a]
            merged = [p for p in members if p in self.targets]
            retained = [p for p in members if p not in self.targets]
            out[k] = (retained, merged, [self.targets[p] for p in merged])
        return out

    def check_pool(self, m: Model):
        alive = set(m.ids.tolist())
        for p, q in self.targets.items():
            if p not in alive or q not in alive:
                raise ValidationError(f"plan references a prototype that is not alive: {p}->{q}")
            if p == q:
                raise ValidationError(f"prototype {p} merged into itself")
        for i, a in zip(m.ids, m.assigned):
            if len(a) != 1:
                raise ValidationError(f"prototype {i} is not exclusive; the pre-merge pool must be")


def apply_plan(m: Model, plan: MergePlan) -> Model:
    """Merge every planned prototype into its target (direction fixed by the plan)."""
    plan.check_pool(m)
    for p in sorted(plan.targets):
        q = plan.targets[p]
        m = merge_pair(m, m.index_of(p), m.index_of(q))
    return m


@dataclass
class AssumptionReport:
    conditions: dict = field(default_factory=dict)

    def add(self, name, witnesses, info=None):
        self.conditions[name] = {"passed": not witnesses, "witnesses": witnesses}
        if info is not None:
            self.conditions[name]["info"] = info

    @property
    def passed(self):
        return all(c["passed"] for c in self.conditions.values())

    def failed(self):
        return [k for k, c in self.conditions.items() if not c["passed"]]

    def to_dict(self):
        return {"passed": self.passed, "conditions": self.conditions}


def _nearest_geometry(m, data):
    img, patch, dist = nearest_patches(m, data)
    Z = m.embed(data.features64()[img, patch])
    return {int(pid): (Z[i], float(dist[i])) for i, pid in enumerate(m.ids)}


def check_assumptions(m: Model, data: FeatureDataset, plan: MergePlan, params: TheoremParams,
                      x, c) -> AssumptionReport:
    plan.check_pool(m)
    rep = AssumptionReport()
    pred = predict(m, x)
    rep.add("x_correct", [] if pred == c else [{"predicted": pred, "label": int(c)}])

    protos = {int(i): m.prototypes[n] for n, i in enumerate(m.ids)}
    cls = {int(i): next(iter(a)) for i, a in zip(m.ids, m.assigned)}
    a1 = []
    for p, q in sorted(plan.targets.items()):
        if q in plan.targets:
            a1.append({"p": p, "target": q, "reason": "target is itself merged away"})
        elif cls[q] == cls[p]:
            a1.append({"p": p, "target": q, "reason": "target in the same class"})
    rep.add("A1", a1)
    rep.add("A2", [])

    near = _nearest_geometry(m, data)
    rep.add("A3", [], info={str(p): near[p][1] for p in sorted(plan.targets)})

    th = params.theta
    se = math.sqrt(params.epsilon)
    a4a, a4b, slack = [], [], {}
    for p, q in sorted(plan.targets.items()):
        a = near[p][1]
        r = float(np.linalg.norm(protos[p] - protos[q]))
        k = cls[p]
        if k != c:
            rhs = th * a - se
            slack[str(p)] = rhs
            if not _le(r, rhs):
                a4a.append({"k": k, "p": p, "target": q, "merge_dist": r, "zp_dist": a, "bound": rhs})
        else:
            rhs1 = (math.sqrt(1.0 + params.delta) - 1.0) * a
            rhs2 = math.sqrt(1.0 - params.delta)
            if not (_le(r, rhs1) and _le(a, rhs2)):
                a4b.append({"k": k, "p": p, "target": q, "merge_dist": r, "zp_dist": a,
                            "merge_bound": rhs1, "zp_bound": rhs2})
    rep.add("A4a", a4a, info={"theta": th, "sqrt_eps": se, "slack": slack})
    rep.add("A4b", a4b)

    A = m.assignment_matrix()
    bad = np.argwhere(m.head != A.astype(np.float64))
    rep.add("A5", [{"class": int(k), "p": int(m.ids[i]), "weight": float(m.head[k, i])} for k, i in bad])
    return rep


def proof_logits(m: Model, data: FeatureDataset, near=None):
    """Per-class logits built on each prototype's nearest training patch."""
    near = near or _nearest_geometry(m, data)
    d2 = np.array([near[int(i)][1] ** 2 for i in m.ids])
    return m.head @ log_similarity(d2, m.epsilon)


@dataclass
class Verdict:
    logit_drop_c: float
    logit_rise: dict
    bounds: dict
    margin: float
    margin_threshold: float
    margin_condition: bool
    prediction_preserved: bool
    violations: list
    network_logits_before: list
    network_logits_after: list

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return dict(self.__dict__, ok=self.ok)


def verify_bounds(m_before: Model, m_after: Model, plan: MergePlan, params: TheoremParams,
                  x, c, data: FeatureDataset) -> Verdict:
    """Evaluate logit changes against the bounds; a claimed-but-failed bound is a violation."""
    plan.check_pool(m_before)
    expected_ids = sorted(set(m_before.ids.tolist()) - set(plan.targets))
    if sorted(m_after.ids.tolist()) != expected_ids or m_after.K != m_before.K:
        raise ValidationError("post-merge model does not match the plan")
    near = _nearest_geometry(m_before, data)
    Lb = proof_logits(m_before, data, near)
    La = proof_logits(m_after, data, near)
    groups = plan.by_class(m_before)
    bounds = {k: delta_max(params.delta, len(groups[k][1])) for k in range(m_before.K)}
    drop_c = float(Lb[c] - La[c])
    rise = {k: float(La[k] - Lb[k]) for k in range(m_before.K) if k != c}
    violations = []
    if not _le(drop_c, bounds[c]):
        violations.append({"class": int(c), "kind": "drop", "change": drop_c, "bound": bounds[c]})
    for k, v in rise.items():
        if not _le(v, bounds[k]):
            violations.append({"class": k, "kind": "rise", "change": v, "bound": bounds[k]})
    others = [k for k in range(m_before.K) if k != c]
    if others:
        margin = float(Lb[c] - max(Lb[k] for k in others))
        threshold = bounds[c] + max(bounds[k] for k in others)
        preserved = all(_le(La[k], La[c]) for k in others)
    else:
        margin, threshold, preserved = math.inf, bounds[c], True
    claimed = margin >= threshold
    if claimed and not preserved:
        violations.append({"class": int(c), "kind": "prediction", "margin": margin, "threshold": threshold})
    return Verdict(
        logit_drop_c=drop_c,
        logit_rise=rise,
        bounds=bounds,
        margin=margin,
        margin_threshold=threshold,
        margin_condition=bool(claimed),
        prediction_preserved=bool(preserved),
        violations=violations,
        network_logits_before=logits(m_before, x).tolist(),
        network_logits_after=logits(m_after, x).tolist(),
    )


def proof_chain(m: Model, data: FeatureDataset, plan: MergePlan, params: TheoremParams, c):
    """Re-evaluate the intermediate inequalities of the argument per merged prototype.

    Returns a list of ``(name, p, lhs, rhs, ok)`` with ``ok = lhs <= rhs``.
    """
    near = _nearest_geometry(m, data)
    protos = {int(i): m.prototypes[n] for n, i in enumerate(m.ids)}
    cls = {int(i): next(iter(a)) for i, a in zip(m.ids, m.assigned)}
    d, eps = params.delta, params.epsilon
    out = []

    def rec(name, p, lhs, rhs):
        out.append((name, p, float(lhs), float(rhs), _le(lhs, rhs)))

    for p, q in sorted(plan.targets.items()):
        zp, a = near[p]
        zq, b = near[q]
        r = float(np.linalg.norm(protos[p] - protos[q]))
        via = float(np.linalg.norm(zp - protos[q]))  # |z_p - q|
        first = (b * b + 1.0) / (a * a + 1.0)
        second = (a * a + eps) / (b * b + eps)
        rec("nearest_q", p, b, via)
        rec("triangle", p, via, a + r)
        rec("sqrt_stretch", p, (a + r) ** 2, (1.0 + d) * a * a)
        if cls[p] == c:
            rec("first_factor_lower", p, 1.0 / (2.0 - d), first)
            rec("second_factor_lower", p, 1.0 / (1.0 + d), second)
            rec("theta_c", p, 1.0 / ((1.0 + d) * (2.0 - d)), first * second)
        else:
            zq_to_p = float(np.linalg.norm(zq - protos[p]))
            rec("nearest_p", p, a, zq_to_p)
            rec("star", p, a / math.sqrt(2.0 - d) + math.sqrt(eps), zq_to_p - r)
            rec("first_factor_upper", p, first, 1.0 + d)
            rec("second_factor_upper", p, second, 2.0 - d)
            rec("theta_k", p, first * second, (1.0 + d) * (2.0 - d))
    return out


@dataclass
class InstanceSpec:
    K: int = 3
    D: int = 4
    protos_per_class: int = 3
    merged_per_class: int = 1
    delta: float = 0.5
    epsilon: float = 1e-4
    patch_distance: float | None = None
    spacing: float = 10.0
    distractors: int = 3
    max_attempts: int = 50


@dataclass
class Instance:
    model: Model
    data: FeatureDataset
    plan: MergePlan
    params: TheoremParams
    x: np.ndarray
    c: int
    attempts: int = 1


def _unit(rng, D):
    v = rng.standard_normal(D)
    return v / np.linalg.norm(v)


def _radii(spec, params):
    """Admissible nearest-patch distance ranges for merged prototypes."""
    th, se = params.theta, math.sqrt(params.epsilon)
    c_hi = math.sqrt(1.0 - params.delta)
    if spec.patch_distance is not None:
        a = spec.patch_distance
        if th * a - se <= 0.0:
            raise InfeasibleInstance(
                f"theta*|z_p-p| - sqrt(eps) = {th * a - se:.3g} <= 0 for patch_distance={a}")
        if a > c_hi:
            raise InfeasibleInstance(f"patch_distance={a} exceeds sqrt(1-delta)={c_hi:.3g}")
        return (a, a), (a, a)
    k_lo = 1.05 * se / th
    return (k_lo, 3.0 * k_lo + 0.5), (0.2 * c_hi, c_hi)


def construct_instance(spec: InstanceSpec, seed) -> Instance:
    """Build a model, data, plan and input satisfying every condition.

    Distances are chosen backwards from the inequalities; the result is then
    checked and redrawn (deterministically) if an unlucky layout makes some
    other patch the nearest one.
    """
    if spec.merged_per_class >= spec.protos_per_class:
        raise ValidationError("merged_per_class must leave at least one retained prototype")
    if spec.K < 2:
        raise ValidationError("need at least two classes")
    params = TheoremParams(spec.delta, spec.epsilon)
    k_rng, c_rng = _radii(spec, params)
    spacing = max(spec.spacing, 10.0 * k_rng[1])
    for attempt in range(spec.max_attempts):
        rng = np.random.default_rng([int(seed), attempt])
        inst = _draw_instance(spec, params, rng, k_rng, c_rng, spacing)
        rep = check_assumptions(inst.model, inst.data, inst.plan, params, inst.x, inst.c)
        if rep.passed:
            inst.attempts = attempt + 1
            return inst
    raise InfeasibleInstance(f"no admissible layout after {spec.max_attempts} attempts")


def _draw_instance(spec, params, rng, k_rng, c_rng, spacing):
    K, D, mk = spec.K, spec.D, spec.protos_per_class
    c = int(rng.integers(K))
    M = K * mk
    ids = np.arange(M)
    cls = np.repeat(np.arange(K), mk)
    merged = {k: sorted(rng.choice(np.arange(k * mk, (k + 1) * mk), spec.merged_per_class,
                                   replace=False).tolist()) for k in range(K)}
    retained = {k: [int(p) for p in range(k * mk, (k + 1) * mk) if p not in merged[k]] for k in range(K)}
    protos = np.zeros((M, D))
    patches = []
    labels = []
    for k in range(K):
        for p in retained[k]:
            protos[p] = spacing * rng.standard_normal(D)
    targets = {}
    reach = {}
    th, se = params.theta, math.sqrt(params.epsilon)
    for k in range(K):
        pool = [q for i in range(K) if i != k for q in retained[i]]
        for p in merged[k]:
            free = [q for q in pool if q not in reach] or pool
            q = int(free[rng.integers(len(free))])
            targets[p] = q
            lo, hi = c_rng if k == c else k_rng
            a = float(rng.uniform(lo, hi))
            bound = (math.sqrt(1.0 + params.delta) - 1.0) * a if k == c else th * a - se
            r = float(rng.uniform(0.0, 1.0)) * bound
            u = _unit(rng, D)
            protos[p] = protos[q] + r * u
            patches.append(protos[p] + a * u)
            labels.append(k)
            reach[q] = max(reach.get(q, 0.0), a + r)
    for k in range(K):
        for q in retained[k]:
            # a target's own patch must stay farther from p than p's planted patch
            a = max(float(rng.uniform(0.1, 1.0)), 1.5 * reach.get(q, 0.0))
            patches.append(protos[q] + a * _unit(rng, D))
            labels.append(k)
    for _ in range(spec.distractors):
        patches.append(spacing * 3.0 * _unit(rng, D) * (1.0 + rng.uniform()))
        labels.append(int(rng.integers(K)))
    patches = np.asarray(patches)
    data = FeatureDataset(patches[:, None, :], np.asarray(labels), K, 1, 1)
    head = np.zeros((K, M))
    head[cls, ids] = 1.0
    m = Model(protos, [{int(k)} for k in cls], head, params.epsilon)
    x = protos[cls == c].copy()
    return Instance(m, data, MergePlan(targets), params, x, c)


def sweep(deltas, seeds, spec: InstanceSpec | None = None):
    """Construct, check and verify one instance per (delta, seed)."""
    spec = spec or InstanceSpec()
    rows = []
    for d in deltas:
        for s in seeds:
            sp = InstanceSpec(**{**spec.__dict__, "delta": d})
            inst = construct_instance(sp, s)
            rep = check_assumptions(inst.model, inst.data, inst.plan, inst.params, inst.x, inst.c)
            after = apply_plan(inst.model, inst.plan)
            ver = verify_bounds(inst.model, after, inst.plan, inst.params, inst.x, inst.c, inst.data)
            chain = proof_chain(inst.model, inst.data, inst.plan, inst.params, inst.c)
            rows.append({
                "delta": d, "seed": s, "assumptions": rep.passed, "bounds": ver.ok,
                "chain": all(ok for *_, ok in chain), "margin_condition": ver.margin_condition,
                "prediction_preserved": ver.prediction_preserved,
                "max_ratio": max([ver.logit_drop_c / ver.bounds[inst.c] if ver.bounds[inst.c] else 0.0]
                                 + [ver.logit_rise[k] / ver.bounds[k] for k in ver.logit_rise if ver.bounds[k]]),
            })
    return rows
