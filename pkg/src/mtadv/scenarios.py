"""Threat-scenario harnesses (ST, MA, UA, TA, CA) and their reports.

Each harness draws seeded attack tuples from a benchmark dataset, runs one
attack per tuple (optionally in a process pool) and aggregates per-tuple
records into report rows.  Tuple ``i`` is always seeded with
``tuple_seed(spec.seed, i)`` and records are aggregated in index order, so
a report is a pure function of (spec, dataset) whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .attack import PGD_STEPS, AttackConfig, TargetSet, fgsm, mtadv, pgd, tuple_seed
from .dataset import IdentityDataset, make_pairs
from .embedder import SystemProfile, embed, embed_batch
from .errors import CalibrationError, ConfigError, ProtocolError
from .metrics import asr, mean_or_nan, pairwise_dissimilarity, ssim

__all__ = [
    "KINDS",
    "CSV_HEADER",
    "ScenarioSpec",
    "ReportRow",
    "ScenarioReport",
    "run_scenario",
    "run_st",
    "run_ma",
    "run_ua",
    "run_ta",
    "run_ca",
    "universal_example",
]

KINDS = ("ST", "MA", "UA", "TA", "CA")
BASELINES = ("pgd", "fgsm")
CSV_HEADER = ["scenario", "system_id", "tau", "eer", "asr_white", "asr_gray",
              "mean_dissim", "mean_ssim", "mean_steps", "mean_time_ms"]


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything a harness needs besides the benchmark dataset.

    ``box`` picks which of the two success rates :meth:`ScenarioReport.asr`
    returns; every row carries both.  For UA, ``n_target_users`` is the
    number of learned subjects and ``imgs_per_target`` the larger of the two
    learn-set sizes (the other is always 1).
    """

    kind: str
    systems: tuple[SystemProfile, ...]
    box: str = "gray"
    n_target_users: int = 1
    imgs_per_target: int = 1
    attack_cfg: AttackConfig = AttackConfig()
    n_pairs: int = 200
    seed: int = 0
    baselines: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "systems", tuple(self.systems))
        object.__setattr__(self, "baselines", tuple(self.baselines))

    def validate(self, dataset: IdentityDataset | None = None) -> "ScenarioSpec":
        k, m = self.kind, len(self.systems)
        if k not in KINDS:
            raise ConfigError(f"unknown scenario {k!r}; expected one of {', '.join(KINDS)}")
        if self.box not in ("white", "gray"):
            raise ConfigError(f"box must be white or gray, got {self.box!r}")
        if self.n_pairs < 0:
            raise ConfigError("n_pairs must be >= 0")
        if m == 0:
            raise ConfigError(f"{k} needs at least one system")
        for s in self.systems:
            if not s.calibrated:
                raise CalibrationError(f"system {s.system_id} is not calibrated")
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ConfigError(f"unknown baseline(s) {sorted(bad)}; expected pgd and/or fgsm")
        if self.baselines and k != "ST":
            raise ConfigError("baselines are only defined for the ST scenario")
        if k == "ST" and (self.n_target_users != 1 or m != 1):
            raise ConfigError(f"ST needs exactly 1 target user and 1 system (got {self.n_target_users}, {m})")
        if k == "MA" and (not 2 <= self.n_target_users <= 50 or m != 1):
            raise ConfigError(f"MA needs 2-50 target users and 1 system (got {self.n_target_users}, {m})")
        if k == "UA":
            if self.n_target_users < 2 or m != 1:
                raise ConfigError(f"UA needs >= 2 learned users and 1 system (got {self.n_target_users}, {m})")
            if self.imgs_per_target < 1:
                raise ConfigError("imgs_per_target must be >= 1")
        if k == "TA":
            if m < 2 or self.n_target_users != 1:
                raise ConfigError(f"TA needs >= 2 systems and 1 target user (got {m}, {self.n_target_users})")
            ids = [s.model.model_id for s in self.systems]
            if len(set(ids)) != len(ids):
                raise ConfigError(f"TA systems must use distinct models, got {ids}")
        if k == "CA":
            if m != 2:
                raise ConfigError(f"CA needs one undefended and one defended system (got {m})")
            plain, defended = self.systems
            if plain.defense is not None:
                raise ConfigError(f"CA: first system {plain.system_id} must be undefended")
            if defended.defense is None:
                raise ConfigError(f"CA: defended system {defended.system_id} has no defense")
            if plain.model is not defended.model and plain.model.model_id != defended.model.model_id:
                raise ConfigError("CA: both pipelines must wrap the same model")
        if dataset is not None:
            n = len(dataset)
            need = {"UA": self.n_target_users + 2}.get(k, self.n_target_users + 1)
            if n < need:
                raise ProtocolError(f"{k} with {self.n_target_users} target users needs >= {need} subjects, have {n}")
            if k == "UA" and self.imgs_per_target > min(dataset.n_images):
                raise ProtocolError(f"imgs_per_target={self.imgs_per_target} exceeds images per subject")
        return self

    def to_json(self) -> dict:
        cfg = self.attack_cfg
        return {
            "kind": self.kind,
            "box": self.box,
            "n_target_users": self.n_target_users,
            "imgs_per_target": self.imgs_per_target,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "baselines": list(self.baselines),
            "attack_cfg": {"epsilon": cfg.epsilon, "alpha": cfg.alpha, "t_max": cfg.t_max,
                           "tau_conv": cfg.tau_conv, "seed": cfg.seed},
            "systems": [s.describe() for s in self.systems],
        }


@dataclass
class ReportRow:
    scenario: str
    system_id: str
    tau: float
    eer: float
    asr_white: float
    asr_gray: float
    mean_dissim: float
    mean_ssim: float
    mean_steps: float
    mean_time_ms: float
    n: int = 0
    stop_reasons: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def csv_values(self, timing: bool = True) -> list[str]:
        vals = [self.scenario, self.system_id]
        for name in CSV_HEADER[2:]:
            v = getattr(self, name)
            if name == "mean_time_ms" and not timing:
                vals.append("")
            else:
                vals.append(repr(float(v)))
        return vals

    def to_json(self, timing: bool = True) -> dict:
        d = {name: getattr(self, name) for name in CSV_HEADER}
        if not timing:
            d["mean_time_ms"] = None
        d.update(n=self.n, stop_reasons=dict(sorted(self.stop_reasons.items())), **self.extra)
        return d


@dataclass
class ScenarioReport:
    spec: ScenarioSpec
    rows: list[ReportRow]
    records: list[dict]
    dataset: dict = field(default_factory=dict)

    def row(self, scenario: str, system_id: str | None = None) -> ReportRow:
        for r in self.rows:
            if r.scenario == scenario and (system_id is None or r.system_id == system_id):
                return r
        raise KeyError(f"no row {scenario!r} / {system_id!r}")

    def asr(self, scenario: str | None = None, system_id: str | None = None) -> float:
        r = self.row(scenario or self.rows[0].scenario, system_id)
        return r.asr_white if self.spec.box == "white" else r.asr_gray

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_values(timing))
        return buf.getvalue()

    def to_json(self, timing: bool = True, config: dict | None = None) -> str:
        doc = {
            "spec": self.spec.to_json(),
            "dataset": self.dataset,
            "rows": [r.to_json(timing) for r in self.rows],
        }
        if config is not None:
            doc["config"] = config
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"

    def write(self, out_dir, stem: str | None = None, timing: bool = True, config: dict | None = None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.spec.kind.lower()
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv(timing))
        json_path.write_text(self.to_json(timing, config))
        return csv_path, json_path


# --- parallel execution -----------------------------------------------------

_CTX = None


def _init_worker(ctx):
    global _CTX
    _CTX = ctx
    threadpool_limits(1)


def _call(args):
    name, i = args
    return _JOBS[name](_CTX, i)


def _map(name: str, ctx, n: int, threads: int) -> list:
    # single-threaded BLAS everywhere so every worker sees the same arithmetic
    if threads <= 1 or n <= 1:
        with threadpool_limits(1):
            return [_JOBS[name](ctx, i) for i in range(n)]
    workers = min(threads, n)
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(_call, [(name, i) for i in range(n)], chunksize=max(1, n // (4 * workers))))


# --- per-tuple jobs ---------------------------------------------------------


def _cfg(spec: ScenarioSpec, i: int) -> AttackConfig:
    return replace(spec.attack_cfg, seed=tuple_seed(spec.seed, i))


def _timed(fn, *args):
    t0 = time.perf_counter()
    res = fn(*args)
    return res, 1000.0 * (time.perf_counter() - t0)


def _outcome(system: SystemProfile, adv, target, enrolled) -> dict:
    # ``g`` and ``gray_dissim`` feed the planar-geometry checks
    f = embed(system, adv)
    ft = embed(system, target)
    fe = embed_batch(system, enrolled)
    kind = system.distance_kind
    return {
        "white": asr(f, ft[None, :], system.tau, kind),
        "gray": asr(f, fe, system.tau, kind),
        "dissim": float(pairwise_dissimilarity(f, ft, kind)),
        "gray_d": pairwise_dissimilarity(f[None, :], fe, kind).tolist(),
        "gray_dissim": float(np.mean(pairwise_dissimilarity(f[None, :], fe, kind))),
        "g": float(np.mean(pairwise_dissimilarity(ft[None, :], fe, kind))),
    }


def _attack_record(res, ms, source):
    return {"steps": res.steps_taken, "stop": res.stop_reason.value, "time_ms": ms,
            "ssim": ssim(res.adv, source)}


def _st_job(ctx, i):
    spec, ds, tuples = ctx
    tp = tuples[i]
    system = spec.systems[0]
    src = ds.image(tp.source_subject, tp.source_image_index)
    tgt = ds.image(tp.target_subject, tp.target_image_index)
    enrolled = ds.subjects[tp.target_subject].images[list(tp.enrolled_image_indices)]
    ts = TargetSet([system], [tgt])
    cfg = _cfg(spec, i)
    out = {}
    runs = [("mtadv", lambda: mtadv(src, ts, cfg))]
    if "pgd" in spec.baselines:
        runs.append(("pgd", lambda: pgd(src, ts, replace(cfg, t_max=PGD_STEPS))))
    if "fgsm" in spec.baselines:
        runs.append(("fgsm", lambda: fgsm(src, ts, cfg.epsilon)))
    for name, run in runs:
        res, ms = _timed(run)
        rec = _attack_record(res, ms, src)
        rec.update(_outcome(system, res.adv, tgt, enrolled))
        out[name] = rec
    return out


def _ma_job(ctx, i):
    spec, ds, tuples = ctx
    tp = tuples[i]
    system = spec.systems[0]
    src = ds.image(tp.source_subject, tp.source_image_index)
    tgts = [ds.image(t.subject, t.image_index) for t in tp.targets]
    res, ms = _timed(mtadv, src, TargetSet([system], tgts), _cfg(spec, i))
    rec = _attack_record(res, ms, src)
    per_user = [_outcome(system, res.adv, ds.image(t.subject, t.image_index),
                         ds.subjects[t.subject].images[list(t.enrolled_indices)]) for t in tp.targets]
    rec["white_users"] = [u["white"] for u in per_user]
    rec["gray_users"] = [u["gray"] for u in per_user]
    rec["dissim_users"] = [u["dissim"] for u in per_user]
    return rec


def universal_example(source, system: SystemProfile, learn_images, cfg: AttackConfig):
    """One adversarial example matched against every learn image at once."""
    return mtadv(source, TargetSet([system], list(learn_images)), cfg)


def _ua_job(ctx, i):
    spec, ds, plans = ctx
    plan = plans[i]
    system = spec.systems[0]
    src = ds.image(*plan["source"])
    held = np.concatenate([ds.subjects[s].images for s in plan["eval"]])
    held_feats = embed_batch(system, held)
    counts = [len(ds.subjects[s].images) for s in plan["eval"]]
    out = {}
    for k, chosen in plan["learn"].items():
        learn = np.stack([ds.image(s, j) for s, js in chosen for j in js])
        res, ms = _timed(universal_example, src, system, learn, _cfg(spec, i))
        rec = _attack_record(res, ms, src)
        f = embed(system, res.adv)
        d_held = pairwise_dissimilarity(f[None, :], held_feats, system.distance_kind)
        hit = d_held <= system.tau
        rec["white"] = asr(f, embed_batch(system, learn), system.tau, system.distance_kind)
        rec["gray"] = float(np.mean(hit))
        rec["subject_level"] = float(np.mean([h.any() for h in np.split(hit, np.cumsum(counts)[:-1])]))
        rec["dissim"] = float(np.mean(d_held))
        out[k] = rec
    return out


def _ta_job(ctx, i):
    spec, ds, tuples = ctx
    tp = tuples[i]
    src = ds.image(tp.source_subject, tp.source_image_index)
    tgt = ds.image(tp.target_subject, tp.target_image_index)
    enrolled = ds.subjects[tp.target_subject].images[list(tp.enrolled_image_indices)]
    res, ms = _timed(mtadv, src, TargetSet(spec.systems, [tgt]), _cfg(spec, i))
    rec = _attack_record(res, ms, src)
    rec["systems"] = [_outcome(s, res.adv, tgt, enrolled) for s in spec.systems]
    return rec


def _ca_job(ctx, i):
    spec, ds, tuples = ctx
    plain, defended = spec.systems
    tp = tuples[i]
    src = ds.image(tp.source_subject, tp.source_image_index)
    tgt = ds.image(tp.target_subject, tp.target_image_index)
    enrolled = ds.subjects[tp.target_subject].images[list(tp.enrolled_image_indices)]
    cfg = _cfg(spec, i)
    base, base_ms = _timed(mtadv, src, TargetSet([plain], [tgt]), cfg)
    counter, counter_ms = _timed(mtadv, src, TargetSet([plain, defended], [tgt]), cfg)
    out = {}
    for name, res, ms, system in (("clean", base, base_ms, plain), ("baseline", base, base_ms, defended),
                                  ("counter", counter, counter_ms, defended)):
        rec = _attack_record(res, ms, src)
        rec.update(_outcome(system, res.adv, tgt, enrolled))
        out[name] = rec
    return out


_JOBS = {"ST": _st_job, "MA": _ma_job, "UA": _ua_job, "TA": _ta_job, "CA": _ca_job}


# --- aggregation ------------------------------------------------------------


def _row(scenario: str, system: SystemProfile, recs: Sequence[dict], white_key="white",
         gray_key="gray", dissim_key="dissim", **extra) -> ReportRow:
    return ReportRow(
        scenario=scenario,
        system_id=system.system_id,
        tau=float(system.tau),
        eer=float(system.eer) if system.eer is not None else float("nan"),
        asr_white=mean_or_nan(r[white_key] for r in recs),
        asr_gray=mean_or_nan(r[gray_key] for r in recs),
        mean_dissim=mean_or_nan(r[dissim_key] for r in recs),
        mean_ssim=mean_or_nan(r["ssim"] for r in recs),
        mean_steps=mean_or_nan(r["steps"] for r in recs),
        mean_time_ms=mean_or_nan(r["time_ms"] for r in recs),
        n=len(recs),
        stop_reasons=dict(Counter(r["stop"] for r in recs)),
        extra=extra,
    )


def _attack_tuples(spec, dataset, n_targets=1):
    if spec.n_pairs == 0:
        return []
    return make_pairs(dataset, "attack", seed=spec.seed, n_tuples=spec.n_pairs, n_targets=n_targets, box="gray")


def _report(spec, dataset, rows, records):
    return ScenarioReport(spec, rows, records, dataset.manifest())


def _check_kind(spec, kind):
    if spec.kind != kind:
        raise ConfigError(f"spec.kind is {spec.kind!r}, expected {kind!r}")


def run_st(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    """Single target: white box scores the optimisation target, gray box the
    target subject's other images.  Baselines add ``ST-pgd`` / ``ST-fgsm`` rows."""
    _check_kind(spec, "ST")
    spec.validate(dataset)
    tuples = _attack_tuples(spec, dataset)
    records = _map("ST", (spec, dataset, tuples), len(tuples), threads)
    system = spec.systems[0]
    rows = [_row("ST", system, [r["mtadv"] for r in records])]
    for b in spec.baselines:
        rows.append(_row(f"ST-{b}", system, [r[b] for r in records]))
    return _report(spec, dataset, rows, records)


def run_ma(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    """One example per tuple for ``n_target_users`` users jointly.  Per-user
    rates are averaged within a tuple; the per-tuple minimum over users is
    reported alongside as ``asr_gray_min`` / ``asr_white_min``."""
    _check_kind(spec, "MA")
    spec.validate(dataset)
    tuples = _attack_tuples(spec, dataset, spec.n_target_users)
    records = _map("MA", (spec, dataset, tuples), len(tuples), threads)
    for r in records:
        r["white"] = float(np.mean(r["white_users"]))
        r["gray"] = float(np.mean(r["gray_users"]))
        r["dissim"] = float(np.mean(r["dissim_users"]))
    row = _row("MA", spec.systems[0], records,
               asr_white_min=mean_or_nan(min(r["white_users"]) for r in records),
               asr_gray_min=mean_or_nan(min(r["gray_users"]) for r in records))
    return _report(spec, dataset, [row], records)


def _ua_plans(spec: ScenarioSpec, dataset: IdentityDataset) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x0A11]))
    n, L = len(dataset), spec.n_target_users
    sizes = sorted({1, spec.imgs_per_target})
    plans = []
    for _ in range(spec.n_pairs):
        order = rng.permutation(n)
        source, learn, held = int(order[0]), sorted(int(s) for s in order[1 : L + 1]), sorted(int(s) for s in order[L + 1 :])
        src_img = int(rng.integers(dataset.n_images[source]))
        perms = {s: rng.permutation(dataset.n_images[s]) for s in learn}
        # the k-image learn set extends the 1-image one
        chosen = {k: [(s, sorted(int(j) for j in perms[s][:k])) for s in learn] for k in sizes}
        plans.append({"source": (source, src_img), "learn": chosen, "eval": held})
    return plans


def run_ua(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    """Universal example learned on ``n_target_users`` subjects, scored on
    every image of the remaining (held-out) subjects.  Rows ``UA-k1`` and
    ``UA-k<imgs_per_target>`` use 1 and ``imgs_per_target`` learn images per
    subject.  ``asr_gray`` is image level; the subject-level "at least one
    match" rate is reported as ``asr_subject``.  ``asr_white`` scores the
    learn images themselves."""
    _check_kind(spec, "UA")
    spec.validate(dataset)
    plans = _ua_plans(spec, dataset)
    records = _map("UA", (spec, dataset, plans), len(plans), threads)
    system = spec.systems[0]
    rows = []
    for k in sorted({1, spec.imgs_per_target}):
        recs = [r[k] for r in records]
        rows.append(_row(f"UA-k{k}", system, recs, asr_subject=mean_or_nan(r["subject_level"] for r in recs)))
    return _report(spec, dataset, rows, [{str(k): v for k, v in r.items()} for r in records])


def run_ta(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    """One joint example per tuple against every system; one row per system.
    ``joint_white`` is the fraction of tuples accepted by all systems."""
    _check_kind(spec, "TA")
    spec.validate(dataset)
    tuples = _attack_tuples(spec, dataset)
    records = _map("TA", (spec, dataset, tuples), len(tuples), threads)
    joint = mean_or_nan(all(s["white"] == 1.0 for s in r["systems"]) for r in records)
    rows = []
    for m, system in enumerate(spec.systems):
        recs = [dict(r, **r["systems"][m]) for r in records]
        rows.append(_row("TA", system, recs, joint_white=joint))
    return _report(spec, dataset, rows, records)


def run_ca(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    """Counterattack on a defended pipeline.

    ``CA-clean``: ST attack on the undefended system, scored there.
    ``CA-baseline``: the same examples scored through the defense.
    ``CA-counter``: a joint attack on both pipelines, scored through the defense.
    """
    _check_kind(spec, "CA")
    spec.validate(dataset)
    tuples = _attack_tuples(spec, dataset)
    records = _map("CA", (spec, dataset, tuples), len(tuples), threads)
    plain, defended = spec.systems
    rows = [
        _row("CA-clean", plain, [r["clean"] for r in records]),
        _row("CA-baseline", defended, [r["baseline"] for r in records]),
        _row("CA-counter", defended, [r["counter"] for r in records]),
    ]
    return _report(spec, dataset, rows, records)


_RUNNERS = {"ST": run_st, "MA": run_ma, "UA": run_ua, "TA": run_ta, "CA": run_ca}


def run_scenario(spec: ScenarioSpec, dataset: IdentityDataset, threads: int = 1) -> ScenarioReport:
    if spec.kind not in _RUNNERS:
        raise ConfigError(f"unknown scenario {spec.kind!r}; expected one of {', '.join(KINDS)}")
    return _RUNNERS[spec.kind](spec, dataset, threads)
