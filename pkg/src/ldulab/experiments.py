"""Experiment runners behind ``labcli run <experiment>``.

Every run writes into ``output_dir``:

* ``resolved_config.json`` - the full config with defaults filled in
* ``metrics.csv`` - one row per (sweep point, seed), fixed column order
* ``checkpoints/`` - the trained denoiser and every trained ``rho``
* ``partial/`` - one JSON record per finished (sweep point, seed); a rerun
  with the same config picks these up instead of recomputing
* ``samples/`` - protected samples (CSV for points, PGM for images)
* ``*.svg`` - line charts of the sweep

Seeds drive textual inversion, perturbation-net init and generation; the
denoiser and the dataset have their own seeds in the config.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .attacks import diffpure, gaussian_filter, quantize
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, write_resolved
from .datasets import Dataset, DatasetSpec, export_pgm, export_points_csv, generate
from .diffusion import Denoiser, SamplerConfig, few_step_denoise, invert, train_dm
from .errors import ConfigError, ConstraintNotMet, ModeError
from .metrics import MetricsRecord, carry, config_hash, e_L, e_R, mmd, protection_score, psnr, spearman
from .nets import DenoiserSpec, TokenTable, init_denoiser
from .personalize import db_train, generate_personalized, ti_train
from .plots import emit_plot
from .schedule import NoiseSchedule, make_schedule
from .tensorcore import ParamStore
from .unlearn import craft_unlearnable, joint_minmax_train, linf_true

log = logging.getLogger(__name__)

# metric columns per experiment, after experiment,seed,sweep_key,sweep_value
COLUMNS = {
    "main": ["protection_score", "mmd_clean", "mmd", "linf", "psnr_db", "e_R", "feasible", "lambda", "attack", "config_hash"],
    "budget-ablation": ["protection_score", "protection_min", "linf", "psnr_db", "feasible", "attack", "config_hash"],
    "steps-ablation": ["protection_score", "protection_min", "linf", "psnr_db", "e_R", "feasible", "attack", "config_hash"],
    "purify-sweep": ["protection_score", "protection_min", "linf", "attack", "config_hash"],
    "feasible-region": ["carry", "e_L", "e_R", "config_hash"],
}
DEFAULT_SWEEPS = {
    "main": ("identity", []),
    "budget-ablation": ("delta_255", [4.0, 8.0, 12.0, 32.0]),
    "steps-ablation": ("k", [1.0, 2.0, 4.0, 8.0]),
    "purify-sweep": ("t_star", [0.0, 5.0, 10.0, 20.0, 30.0, 50.0, 100.0, 150.0, 200.0]),
    "feasible-region": ("k", [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]),
}
PLOTS = {
    "budget-ablation": ["protection_score"],
    "steps-ablation": ["protection_score", "linf"],
    "purify-sweep": ["protection_score"],
    "feasible-region": ["carry", "e_L"],
    "main": ["protection_score"],
}


# ---------------------------------------------------------------------------
# shared setup


@dataclass
class Lab:
    cfg: ExperimentConfig
    schedule: NoiseSchedule
    dataset: Dataset
    model: Denoiser
    out: Path
    _clean: dict = field(default_factory=dict)

    @property
    def data_range(self) -> float:
        return self.dataset.spec.data_range

    def delta(self, delta_255: float) -> float:
        """Budget in data units: ``n/255`` of the data range."""
        return delta_255 / 255.0 * self.data_range

    def sampler(self, k: int | None = None) -> SamplerConfig:
        s = self.cfg.sampler
        return SamplerConfig(k=int(k or s.k), guidance=s.guidance)

    def subjects(self, n_identities: int | None = None) -> list[np.ndarray]:
        ids = self.dataset.identities[: n_identities or len(self.dataset.identities)]
        return [i.samples for i in ids]


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.kind, s.beta_min, s.beta_max)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    spec = DatasetSpec(
        kind=d.kind, n_per_identity=d.n_per_identity, n_identities=d.n_identities, noise=d.noise, a=d.a, b=d.b,
        turns=d.turns, dim=d.dim, extent=d.extent, pool_per_class=d.pool_per_class, n_reference=d.n_reference, seed=d.seed,
    )
    return generate(spec)


def denoiser_spec(cfg: ExperimentConfig) -> DenoiserSpec:
    d = cfg.dataset
    kind = "images" if d.kind == "glyphs" else "points"
    return DenoiserSpec(
        kind=kind, dim=d.dim, channels=1, extent=d.extent, hidden=tuple(cfg.model.hidden),
        conv_width=cfg.model.conv_width, n_class=d.n_identities,
    )


def get_denoiser(cfg: ExperimentConfig, dataset: Dataset, schedule: NoiseSchedule, out: Path | None) -> Denoiser:
    """Load the configured checkpoint, or a cached one in ``out``, or train and cache."""
    spec = denoiser_spec(cfg)
    candidates = []
    if cfg.model.checkpoint:
        candidates.append(Path(cfg.model.checkpoint))
    cached = out / "checkpoints" / "dm.ldul" if out is not None else None
    if cached is not None:
        candidates.append(cached)
    for path in candidates:
        if path.exists():
            params, sched = load_checkpoint(path)
            if sched is not None and (sched.T != schedule.T or not np.array_equal(sched.beta, schedule.beta)):
                raise ConfigError(f"checkpoint {path} was trained with a different schedule", "model.checkpoint")
            return Denoiser(params, spec, TokenTable(spec.n_class, spec.cond_dim), schedule)
        if path == Path(cfg.model.checkpoint or "\0"):
            raise ConfigError(f"checkpoint not found: {path}", "model.checkpoint")
    model = Denoiser(init_denoiser(spec, cfg.model.seed), spec, schedule=schedule)
    m = cfg.model
    train_dm(model, dataset.pool, dataset.pool_labels, schedule, m.train_steps, lr=m.lr, seed=m.seed, batch=m.batch,
             cond_drop=m.cond_drop, lr_final=m.lr_final)
    if cached is not None:
        save_checkpoint(cached, model.params, schedule)
    return model


def setup(cfg: ExperimentConfig, out: str | Path | None = None) -> Lab:
    cfg.validate()
    out_path = Path(out or cfg.output_dir)
    schedule = build_schedule(cfg)
    dataset = build_dataset(cfg)
    model = get_denoiser(cfg, dataset, schedule, out_path)
    return Lab(cfg, schedule, dataset, model, out_path)


# ---------------------------------------------------------------------------
# personalization + scoring


@dataclass
class Personalized:
    generations: list[np.ndarray]
    tokens: np.ndarray | None = None


def personalize(lab: Lab, samples: list[np.ndarray], seed: int) -> Personalized:
    """Run the configured personalization on per-identity ``samples`` and generate from it."""
    p = lab.cfg.personalize
    ev = SamplerConfig(k=min(lab.cfg.sampler.eval_k, lab.schedule.T), guidance=lab.cfg.sampler.guidance)
    if p.method == "ti":
        res = ti_train(lab.model, samples, p.steps, lr=p.lr, seed=seed)
        E = res.tokens[TokenTable.PSEUDO]
        gens = [generate_personalized(lab.model, E[i], p.n_generate, ev, lab.schedule, seed) for i in range(len(samples))]
        return Personalized(gens, E.copy())
    gens = []
    class_emb = lab.model.params["net/tokens/class/w"]
    for i, s in enumerate(samples):
        others = lab.dataset.pool[lab.dataset.pool_labels == i + 1]
        tuned = db_train(lab.model, s, class_emb[i], others, i + 1, p.prior_weight, p.db_steps, lr=p.db_lr, seed=seed).model
        gens.append(generate_personalized(tuned, class_emb[i], p.n_generate, ev, lab.schedule, seed))
    return Personalized(gens)


def clean_personalization(lab: Lab, seed: int, n_identities: int | None = None) -> tuple[Personalized, list[float]]:
    """Clean-data personalization for ``seed`` and its per-identity baseline distances (cached)."""
    key = (seed, n_identities)
    if key not in lab._clean:
        subj = lab.subjects(n_identities)
        pers = personalize(lab, subj, seed)
        bw = lab.cfg.metrics.bandwidth
        base = [mmd(g, lab.dataset.identities[i].reference, bw, unbiased=False) for i, g in enumerate(pers.generations)]
        lab._clean[key] = (pers, base)
    return lab._clean[key]


def craft_tokens(lab: Lab, seed: int, n_identities: int | None = None) -> np.ndarray:
    """Frozen personalization artifacts the perturbation net is trained against."""
    pers, _ = clean_personalization(lab, seed, n_identities)
    if pers.tokens is not None:
        return pers.tokens
    res = ti_train(lab.model, lab.subjects(n_identities), lab.cfg.personalize.steps, lr=lab.cfg.personalize.lr, seed=seed)
    return res.tokens[TokenTable.PSEUDO]


def attacked_baseline(lab: Lab, seed: int, n_identities: int, t_star: int | None = None) -> list[float]:
    """Baseline distances for clean subjects passed through the configured attack (cached).

    Uses the same attack noise streams as the protected samples, so the ratio
    isolates what the perturbation adds beyond the attack's own damage.
    """
    key = ("attacked", seed, n_identities, attack_label(lab, t_star))
    if key not in lab._clean:
        attacked = apply_attack(lab, lab.subjects(n_identities), seed, t_star=t_star)
        pers = personalize(lab, attacked, seed)
        bw = lab.cfg.metrics.bandwidth
        lab._clean[key] = [mmd(g, lab.dataset.identities[i].reference, bw, unbiased=False) for i, g in enumerate(pers.generations)]
    return lab._clean[key]


def score(lab: Lab, samples: list[np.ndarray], seed: int, t_star: int | None = None) -> tuple[list[float], list[float], list[float]]:
    """Personalize on ``samples``; returns (protection scores, distances, baselines) per identity.

    ``samples`` must already carry any attack; ``t_star`` names the DiffPure
    strength used, so the baseline can be attacked the same way.
    """
    n = len(samples)
    attacked = (t_star is not None and t_star > 0) or (t_star is None and lab.cfg.attack.name != "none")
    if attacked and lab.cfg.attack.baseline == "attacked":
        base = attacked_baseline(lab, seed, n, t_star)
    else:
        _, base = clean_personalization(lab, seed, n)
    pers = personalize(lab, samples, seed)
    bw = lab.cfg.metrics.bandwidth
    dist = [mmd(g, lab.dataset.identities[i].reference, bw, unbiased=False) for i, g in enumerate(pers.generations)]
    scores = [protection_score(g, lab.dataset.identities[i].reference, base[i], bw) for i, g in enumerate(pers.generations)]
    return scores, dist, base


def apply_attack(lab: Lab, samples: list[np.ndarray], seed: int, t_star: int | None = None) -> list[np.ndarray]:
    a = lab.cfg.attack
    name = "diffpure" if t_star is not None else a.name
    if name == "none":
        return samples
    image = lab.model.spec.kind == "images"
    if name in ("gaussian_filter", "quantize") and not image:
        raise ModeError(f"attack {name!r} needs image data")
    out = []
    for i, s in enumerate(samples):
        if name == "diffpure":
            ts = a.t_star if t_star is None else t_star
            out.append(diffpure(s, ts, lab.model, lab.schedule, seed=seed * 1000 + i))
        elif name == "gaussian_filter":
            out.append(gaussian_filter(s, a.kernel_size, a.sigma))
        else:
            out.append(quantize(s, a.levels))
    return out


def attack_label(lab: Lab, t_star: int | None = None) -> str:
    a = lab.cfg.attack
    if t_star is not None:
        return f"diffpure:t_star={t_star}"
    if a.name == "diffpure":
        return f"diffpure:t_star={a.t_star}"
    if a.name == "gaussian_filter":
        return f"gaussian_filter:k={a.kernel_size}:sigma={a.sigma!r}"
    if a.name == "quantize":
        return f"quantize:levels={a.levels}"
    return "none"


@dataclass
class Crafted:
    outputs: list[np.ndarray]
    originals: list[np.ndarray]
    reconstructions: list[np.ndarray]
    feasible: bool
    penalty_lambda: float
    warnings: list[str] = field(default_factory=list)
    rounds: int = 0  # completed min-max outer rounds (0 for frozen-token crafting)


def craft(lab: Lab, seed: int, delta_255: float, k: int | None = None, n_identities: int | None = None, tag: str = "") -> Crafted:
    """Train rho for ``seed`` at budget ``delta_255`` (checkpointed) and return the protected sets."""
    u = lab.cfg.unlearn
    subj = lab.subjects(n_identities)
    tokens = craft_tokens(lab, seed, n_identities)
    sampler = lab.sampler(k)
    clip = (0.0, 1.0) if lab.model.spec.kind == "images" else None
    delta = lab.delta(delta_255)
    if u.minmax:
        feasible = True
        try:
            res = joint_minmax_train(subj, lab.model, tokens, delta, u.outer_rounds, u.tau_steps, u.rho_steps,
                                     lab.cfg.personalize.lr, u.lr, seed, sampler, u.n_mc, eta_lambda=u.eta_lambda,
                                     tolerance=u.tolerance, rho_lr_final=u.lr_final or None)
        except ConstraintNotMet as exc:
            log.warning("%s", exc)
            res, feasible = exc.result, False
        rho, outputs, lam = res.rho, res.outputs, res.state.penalty_lambda
        warnings, rounds = list(res.warnings), len(res.rounds)
    else:
        groups = [[i] for i in range(len(subj))] if u.per_identity else [list(range(len(subj)))]
        rho, outputs, feasible, lam = ParamStore(), [None] * len(subj), True, 0.0
        warnings, rounds = [], 0
        for g in groups:
            try:
                res = craft_unlearnable([subj[i] for i in g], lab.model, tokens[g], delta, sampler, u.steps, u.lr, seed,
                                        u.shuffle, n_mc=u.n_mc, norm_kind=u.norm, eta_lambda=u.eta_lambda,
                                        lambda0=u.lambda0, tolerance=u.tolerance, cond_tokens=[i + 1 for i in g], clip=clip,
                                        lr_final=u.lr_final or None)
            except ConstraintNotMet as exc:
                log.warning("%s", exc)
                res = exc.result
            prefix = f"id{g[0]}/" if u.per_identity else ""
            for n in res.rho.names():
                rho[prefix + n] = res.rho[n]
            for j, i in enumerate(g):
                outputs[i] = res.outputs[j]
            feasible = feasible and res.feasible
            lam = max(lam, res.state.penalty_lambda)
    save_checkpoint(lab.out / "checkpoints" / f"rho_{tag or 'run'}_seed{seed}.ldul", rho)
    x0 = np.concatenate(subj)
    who = np.concatenate([np.full(len(s), i) for i, s in enumerate(subj)])
    recon = few_step_denoise(lab.model, invert(lab.model, x0, lab.schedule), who + 1, sampler, lab.schedule)
    recon = [recon[who == i] for i in range(len(subj))]
    _export_samples(lab, outputs, f"{tag or 'run'}_seed{seed}")
    return Crafted(outputs, subj, recon, feasible, lam, warnings, rounds)


def _export_samples(lab: Lab, outputs: list[np.ndarray], name: str) -> None:
    d = lab.out / "samples"
    d.mkdir(parents=True, exist_ok=True)
    if lab.model.spec.kind == "points":
        x = np.concatenate(outputs)
        labels = np.concatenate([np.full(len(o), i + 1) for i, o in enumerate(outputs)])
        export_points_csv(x, d / f"{name}.csv", labels)
    else:
        for i, o in enumerate(outputs):
            for j, img in enumerate(o):
                export_pgm(img, d / f"{name}_id{i}_{j}.pgm")


def _imperceptibility(lab: Lab, c: Crafted) -> tuple[float, float]:
    """Worst-case l-inf distance and worst-case PSNR over every emitted sample."""
    out, x0 = np.concatenate(c.outputs), np.concatenate(c.originals)
    worst_psnr = min(psnr(a, b, peak=lab.data_range) for a, b in zip(out, x0))
    return float(linf_true(out, x0).max()), min(worst_psnr, 999.0)


# ---------------------------------------------------------------------------
# experiments: each returns the records for one (sweep value, seed) unit


def _unit_main(lab: Lab, seed: int, _value) -> list[MetricsRecord]:
    u = lab.cfg.unlearn
    c = craft(lab, seed, u.delta_255, tag="main")
    attacked = apply_attack(lab, c.outputs, seed)
    scores, dist, base = score(lab, attacked, seed)
    recs = []
    for i in range(len(scores)):
        out_i, x_i = c.outputs[i], c.originals[i]
        worst_psnr = min(min(psnr(a, b, peak=lab.data_range) for a, b in zip(out_i, x_i)), 999.0)
        recs.append(_rec(lab, seed, "identity", i, {
            "protection_score": scores[i], "mmd_clean": base[i], "mmd": dist[i],
            "linf": float(linf_true(out_i, x_i).max()), "psnr_db": worst_psnr,
            "e_R": e_R(c.reconstructions[i], x_i), "feasible": float(c.feasible), "lambda": c.penalty_lambda,
        }, attack_label(lab)))
    return recs


def _unit_budget(lab: Lab, seed: int, value: float) -> list[MetricsRecord]:
    c = craft(lab, seed, value, tag=f"delta{value:g}")
    scores, _, _ = score(lab, apply_attack(lab, c.outputs, seed), seed)
    linf, worst = _imperceptibility(lab, c)
    return [_rec(lab, seed, "delta_255", value, {
        "protection_score": float(np.mean(scores)), "protection_min": float(np.min(scores)),
        "linf": linf, "psnr_db": worst, "feasible": float(c.feasible)}, attack_label(lab))]


def _unit_steps(lab: Lab, seed: int, value: float) -> list[MetricsRecord]:
    k = int(value)
    c = craft(lab, seed, lab.cfg.unlearn.delta_255, k=k, tag=f"k{k}")
    scores, _, _ = score(lab, apply_attack(lab, c.outputs, seed), seed)
    linf, worst = _imperceptibility(lab, c)
    e = float(np.mean([e_R(r, x) for r, x in zip(c.reconstructions, c.originals)]))
    return [_rec(lab, seed, "k", value, {
        "protection_score": float(np.mean(scores)), "protection_min": float(np.min(scores)),
        "linf": linf, "psnr_db": worst, "e_R": e, "feasible": float(c.feasible)}, attack_label(lab))]


def _unit_purify(lab: Lab, seed: int, value: float) -> list[MetricsRecord]:
    key = ("crafted", seed)
    if key not in lab._clean:
        lab._clean[key] = craft(lab, seed, lab.cfg.unlearn.delta_255, tag="purify")
    c = lab._clean[key]
    t_star = int(value)
    scores, _, _ = score(lab, apply_attack(lab, c.outputs, seed, t_star=t_star), seed, t_star=t_star)
    return [_rec(lab, seed, "t_star", value, {
        "protection_score": float(np.mean(scores)), "protection_min": float(np.min(scores)),
        "linf": float(linf_true(np.concatenate(c.outputs), np.concatenate(c.originals)).max())}, attack_label(lab, t_star))]


def carry_inputs(lab: Lab, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverted pool points, their labels, and unit-norm perturbation draws for ``seed``."""
    mc = lab.cfg.metrics
    rng = tc.make_rng(seed, 1111)
    idx = rng.choice(len(lab.dataset.pool), size=min(mc.carry_points, len(lab.dataset.pool)), replace=False)
    idx.sort()
    x0 = lab.dataset.pool[idx]
    labels = lab.dataset.pool_labels[idx]
    z_T = invert(lab.model, x0, lab.schedule)
    delta = rng.standard_normal(z_T.shape)
    delta /= np.linalg.norm(delta.reshape(len(delta), -1), axis=1).reshape((-1,) + (1,) * (delta.ndim - 1))
    return x0, labels, z_T, delta


def _unit_feasible(lab: Lab, seed: int, value: float) -> list[MetricsRecord]:
    k = int(value)
    key = ("carry", seed)
    if key not in lab._clean:
        lab._clean[key] = carry_inputs(lab, seed)
    x0, labels, z_T, delta = lab._clean[key]
    draws = lab.cfg.metrics.carry_draws
    c = carry(lab.model, z_T[:draws], delta[:draws], [k], lab.schedule, labels[:draws])[k]
    sampler = SamplerConfig(k=k, guidance=lab.cfg.sampler.guidance)
    recon = few_step_denoise(lab.model, z_T, labels, sampler, lab.schedule)
    shifted = few_step_denoise(lab.model, z_T + delta, labels, sampler, lab.schedule)
    spec = lab.dataset.spec
    el = e_L(shifted, spec.a, spec.b) if spec.kind == "spiral" else math.nan
    scalars = {"carry": c, "e_R": e_R(recon, x0)}
    if math.isfinite(el):
        scalars["e_L"] = el
    return [_rec(lab, seed, "k", value, scalars, "none")]


UNITS: dict[str, Callable] = {
    "main": _unit_main,
    "budget-ablation": _unit_budget,
    "steps-ablation": _unit_steps,
    "purify-sweep": _unit_purify,
    "feasible-region": _unit_feasible,
}


def experiment_hash(cfg: ExperimentConfig) -> str:
    """Hash of the config fields that determine results; ``output_dir`` is only a location."""
    d = cfg.to_dict()
    d.pop("output_dir", None)
    return config_hash(d)


def _rec(lab: Lab, seed: int, key: str, value, scalars: dict, attack: str) -> MetricsRecord:
    return MetricsRecord(lab.cfg.experiment, seed, key, value, scalars, attack, experiment_hash(lab.cfg))


def sweep_of(cfg: ExperimentConfig) -> tuple[str, list]:
    key, values = DEFAULT_SWEEPS[cfg.experiment]
    if cfg.sweep.values:
        values = list(cfg.sweep.values)
    if cfg.sweep.key and cfg.sweep.key != key:
        raise ConfigError(f"experiment {cfg.experiment!r} sweeps {key!r}, not {cfg.sweep.key!r}", "sweep.key")
    if cfg.experiment == "main":
        values = [None]  # one unit per seed; rows are per identity
    return key, values


# ---------------------------------------------------------------------------
# persistence


def _record_to_json(r: MetricsRecord) -> dict:
    return {"experiment": r.experiment, "seed": r.seed, "sweep_key": r.sweep_key, "sweep_value": r.sweep_value,
            "scalars": r.scalars, "attack": r.attack, "config_hash": r.config_hash}


def _record_from_json(d: dict) -> MetricsRecord:
    return MetricsRecord(d["experiment"], d["seed"], d["sweep_key"], d["sweep_value"], d["scalars"], d["attack"], d["config_hash"])


def records_csv(records: list[MetricsRecord], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "seed", "sweep_key", "sweep_value", *columns])
    for r in records:
        w.writerow(r.row(columns))
    return buf.getvalue()


def run(cfg: ExperimentConfig, out: str | Path | None = None, lab: Lab | None = None) -> list[MetricsRecord]:
    """Run ``cfg.experiment`` over its sweep and seeds; resumes from ``partial/`` records."""
    cfg.validate()
    out_path = Path(out or cfg.output_dir)
    write_resolved(cfg, out_path)
    lab = lab or setup(cfg, out_path)
    lab.cfg, lab.out = cfg, out_path
    key, values = sweep_of(cfg)
    h = experiment_hash(cfg)
    partial = out_path / "partial"
    partial.mkdir(parents=True, exist_ok=True)
    records: list[MetricsRecord] = []
    for value in values:
        for seed in cfg.seeds:
            name = f"{'all' if value is None else format(value, 'g')}_seed{seed}.json"
            path = partial / name
            if path.exists():
                blob = json.loads(path.read_text())
                if blob.get("config_hash") == h:
                    records.extend(_record_from_json(d) for d in blob["records"])
                    continue
            recs = UNITS[cfg.experiment](lab, seed, value)
            path.write_text(json.dumps({"config_hash": h, "records": [_record_to_json(r) for r in recs]}, sort_keys=True))
            records.extend(recs)
    columns = COLUMNS[cfg.experiment]
    (out_path / "metrics.csv").write_text(records_csv(records, columns))
    rows = [dict(zip(["experiment", "seed", "sweep_key", "sweep_value", *columns], r.row(columns))) for r in records]
    ys = [y for y in PLOTS[cfg.experiment] if all(y in r.scalars for r in records)]
    if rows and ys:
        emit_plot(rows, "sweep_value", ys, out_path / f"{cfg.experiment}.svg", title=cfg.experiment)
    return records


def summarize_trend(records: list[MetricsRecord], metric: str) -> dict[int, list[float]]:
    """Per-seed values of ``metric`` ordered by sweep value."""
    by_seed: dict[int, list[tuple[float, float]]] = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append((float(r.sweep_value), r.scalars[metric]))
    return {s: [v for _, v in sorted(pts)] for s, pts in sorted(by_seed.items())}


def carry_spearman(records: list[MetricsRecord]) -> float:
    pts = sorted((float(r.sweep_value), r.scalars["carry"]) for r in records)
    return spearman([p[0] for p in pts], [p[1] for p in pts])
