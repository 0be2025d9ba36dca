"""Training, evaluation, ablation, gradient checking and parameter counting."""

from __future__ import annotations

import ast
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, RunConfig
from .datasets import (
    LabeledSample,
    artificial_atom_types,
    gen_toy_mm_dataset,
    harmonic_diatomic,
    parse_bonds,
    parse_extxyz,
    split,
    toy_mm_system,
)
from .featurize import GraphBatch, MolecularGraph, VocabularyError
from .niu import ModelConfig, MolCtModel, molct_forward
from .optim import AdamState, NonFiniteGradient, adam_step
from .readout import loss, loss_terms, predict_energy_forces

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "split", "loss", "energy_mae", "force_mae", "mean_ponder_steps"]
FORMAT_VERSION = 1

VARIANTS = {
    "cfc-r": dict(unit="cfc", basis="linear", rme_blocks=0),
    "cfc-logr": dict(unit="cfc", basis="log", rme_blocks=0),
    "ea-tied": dict(unit="ea", n_units=1, iterations=3),
    "ea-stacked": dict(unit="ea", n_units=3, iterations=1),
    "niu-1": dict(unit="niu", n_units=1),
    "niu-3": dict(unit="niu", n_units=3),
    "rme-on": dict(rme_blocks=1),
    "rme-off": dict(rme_blocks=0),
    "artificial-atom-types": dict(artificial_atom_types=True),
}


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainRecord:
    step: int
    split: str
    loss: float
    energy_mae: float
    force_mae: float
    mean_ponder_steps: float
    energy_term: float
    force_term: float
    seed: int


# ---------------------------------------------------------------- data


def _builtin(name: str, n: int, seed: int, noise: float = 0.08) -> list[LabeledSample]:
    if name == "toymm":
        graph, ff = toy_mm_system()
        return gen_toy_mm_dataset(graph, ff, n, noise=noise, seed=seed)
    if name == "diatomic":
        return harmonic_diatomic(n, seed=seed)
    raise ConfigError(f"unknown builtin dataset {name!r} (choose toymm or diatomic)")


def _read(path: str, bonds: str | None, n_hint: int, seed: int, noise: float = 0.08) -> list[LabeledSample]:
    if path.startswith("builtin:"):
        return _builtin(path.split(":", 1)[1], n_hint, seed, noise)
    edges = parse_bonds(bonds) if bonds else []
    return parse_extxyz(path, edges)


def load_datasets(cfg: RunConfig) -> tuple[list[LabeledSample], list[LabeledSample]]:
    if cfg.train_data:
        train = _read(cfg.train_data, cfg.bonds, cfg.n_train, cfg.split_seed, cfg.noise)
        val = _read(cfg.val_data, cfg.bonds, cfg.n_val, cfg.split_seed + 1, cfg.noise) if cfg.val_data else []
        return train, val
    data = _read(cfg.data, cfg.bonds, cfg.n_train + cfg.n_val, cfg.split_seed, cfg.noise)
    return split(data, cfg.n_train, cfg.n_val, cfg.split_seed)


class Stacked:
    """Samples bucketed by particle count, stored as stacked arrays for fast batching."""

    def __init__(self, samples: Sequence[LabeledSample]):
        groups: dict[int, list[LabeledSample]] = {}
        for s in samples:
            groups.setdefault(s.graph.n_particles, []).append(s)
        self.buckets = []
        for n, items in sorted(groups.items()):
            self.buckets.append(dict(
                n=n,
                species=np.stack([s.graph.species for s in items]),
                coords=np.stack([s.graph.coords for s in items]),
                rel=np.stack([s.graph.relation_matrix() for s in items]),
                energy=np.array([s.energy for s in items]),
                forces=np.stack([s.forces for s in items]),
            ))
        self.size = len(samples)

    def batch(self, bucket: int, idx) -> tuple[GraphBatch, np.ndarray, np.ndarray]:
        b = self.buckets[bucket]
        gb = GraphBatch(b["species"][idx], Tensor(b["coords"][idx], requires_grad=True), b["rel"][idx])
        return gb, b["energy"][idx], b["forces"][idx]


def standardization(samples: Sequence[LabeledSample]) -> tuple[float, float]:
    """(mean energy per atom, force RMS) of a training set."""
    per_atom = np.mean([s.energy / s.graph.n_particles for s in samples])
    f = np.concatenate([s.forces.reshape(-1) for s in samples])
    rms = float(np.sqrt(np.mean(f**2)))
    return float(per_atom), rms if rms > 0 else 1.0


def _to_model_units(model: MolCtModel, n: int, energy, forces):
    e = (np.asarray(energy) - model.energy_per_atom * n) / model.energy_scale
    return e, np.asarray(forces) / model.energy_scale


# ---------------------------------------------------------------- evaluation


def evaluate(model: MolCtModel, dataset, lam: float = 0.99, batch_size: int = 128,
             T_max: int | None = None) -> dict:
    """Deterministic metrics over the full set.

    ``loss`` is the training objective in standardized units (no ponder term);
    ``energy_mae`` and ``force_mae`` are in the dataset's units, force MAE per component.
    """
    data = dataset if isinstance(dataset, Stacked) else Stacked(dataset)
    vocab = model.cfg.species_vocab_size
    tot = dict(loss=0.0, e_abs=0.0, f_abs=0.0, f_count=0, steps=0.0, eterm=0.0, fterm=0.0)
    for k, b in enumerate(data.buckets):
        if b["species"].max() >= vocab:
            raise VocabularyError(f"species id {int(b['species'].max())} outside trained vocabulary of {vocab}")
        m = len(b["energy"])
        for start in range(0, m, batch_size):
            idx = np.arange(start, min(m, start + batch_size))
            gb, e0, f0 = data.batch(k, idx)
            pred = predict_energy_forces(gb, model, T_max=T_max, create_graph=False)
            es, fs = _to_model_units(model, b["n"], e0, f0)
            with ad.no_grad():
                L = loss(pred, es, fs, lam)
            et, ft = loss_terms(pred, es, fs)
            tot["loss"] += float(L.data) * len(idx)
            tot["eterm"] += et * len(idx)
            tot["fterm"] += ft * len(idx)
            tot["e_abs"] += float(np.sum(np.abs(pred.total_energy - e0)))
            tot["f_abs"] += float(np.sum(np.abs(pred.forces - f0)))
            tot["f_count"] += f0.size
            steps = np.sum(pred.steps, axis=0) if pred.steps else np.zeros(e0.shape + (b["n"],))
            tot["steps"] += float(np.mean(steps)) * len(idx)
    n = max(data.size, 1)
    return dict(
        loss=tot["loss"] / n,
        energy_mae=tot["e_abs"] / n,
        force_mae=tot["f_abs"] / max(tot["f_count"], 1),
        mean_ponder_steps=tot["steps"] / n,
        energy_term=tot["eterm"] / n,
        force_term=tot["fterm"] / n,
    )


def predictions_table(model: MolCtModel, samples: Sequence[LabeledSample]) -> list[dict]:
    """Rows of sample_id, E_pred, E_label, per-atom force error norm (mean over atoms)."""
    rows = []
    for k, s in enumerate(samples):
        pred = predict_energy_forces(s.graph, model)
        err = np.linalg.norm(pred.forces[0] - s.forces, axis=-1)
        rows.append(dict(sample_id=k, E_pred=float(pred.total_energy[0]), E_label=s.energy,
                         force_error_norm=float(err.mean())))
    return rows


# ---------------------------------------------------------------- model file


def save_model(model: MolCtModel, path, run_config: RunConfig | None = None, extra: dict | None = None) -> None:
    meta = dict(
        format_version=FORMAT_VERSION,
        model_config=asdict(model.cfg),
        run_config=run_config.to_dict() if run_config else None,
        energy_per_atom=model.energy_per_atom,
        energy_scale=model.energy_scale,
        extra=extra or {},
    )
    arrays = {f"param:{name}": p.data for name, p in model.named_parameters().items()}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> tuple[MolCtModel, dict]:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["__meta__"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model file version {meta.get('format_version')}")
        model = MolCtModel(ModelConfig(**meta["model_config"]))
        params = model.named_parameters()
        for name, p in params.items():
            key = f"param:{name}"
            if key not in f:
                raise ValueError(f"model file lacks parameter {name}")
            arr = f[key]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: file shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr)
    model.energy_per_atom = meta["energy_per_atom"]
    model.energy_scale = meta["energy_scale"]
    return model, meta


# ---------------------------------------------------------------- training


def _write_metrics(records: Sequence[TrainRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.step, r.split, repr(r.loss), repr(r.energy_mae), repr(r.force_mae),
                        repr(r.mean_ponder_steps)])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["step"] = int(r["step"])
        for k in METRIC_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def prepare_data(cfg: RunConfig):
    """Load, optionally relabel by bond signature, return (train, val, vocab)."""
    train, val = load_datasets(cfg)
    vocab = None
    if cfg.artificial_atom_types:
        train, vocab = artificial_atom_types(train)
        val, _ = artificial_atom_types(val, vocab)
    return train, val, vocab


def train_seed(cfg: RunConfig, seed: int, data=None, out_dir: Path | None = None,
               on_record=None) -> tuple[MolCtModel, list[TrainRecord]]:
    """Minibatch Adam on the force-matching loss for one seed."""
    train, val, vocab = data if data is not None else prepare_data(cfg)
    mcfg = cfg.model_config()
    model = MolCtModel(mcfg, seed=seed)
    model.energy_per_atom, model.energy_scale = standardization(train)
    tr, va = Stacked(train), Stacked(val) if val else None
    params = model.named_parameters()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    rng = np.random.default_rng(seed)
    sizes = np.array([len(b["energy"]) for b in tr.buckets], dtype=np.float64)
    records: list[TrainRecord] = []

    def log_point(step):
        for name, ds in (("train", tr), ("val", va)):
            if ds is None:
                continue
            m = evaluate(model, ds, cfg.lam)
            rec = TrainRecord(step, name, m["loss"], m["energy_mae"], m["force_mae"], m["mean_ponder_steps"],
                              m["energy_term"], m["force_term"], seed)
            records.append(rec)
            if on_record:
                on_record(rec)

    log_point(0)
    for step in range(1, cfg.steps + 1):
        k = int(rng.choice(len(sizes), p=sizes / sizes.sum())) if len(sizes) > 1 else 0
        m = int(sizes[k])
        idx = rng.choice(m, size=min(cfg.batch_size, m), replace=False)
        gb, e0, f0 = tr.batch(k, idx)
        es, fs = _to_model_units(model, tr.buckets[k]["n"], e0, f0)
        pred = predict_energy_forces(gb, model, create_graph=True, physical_units=False)
        L = loss(pred, es, fs, cfg.lam, cfg.ponder_weight)
        if not math.isfinite(float(L.data)):
            raise NumericFailure(f"seed {seed}: non-finite loss at step {step} (batch ids {idx.tolist()})")
        grads = ad.grad(L, list(params.values()))
        gdict = {name: g.data for name, g in zip(params, grads) if g is not None}
        try:
            adam_step(params, gdict, state)
        except NonFiniteGradient as exc:
            raise NumericFailure(f"seed {seed}: {exc} at step {step} (batch ids {idx.tolist()})") from exc
        if step % cfg.log_every == 0 or step == cfg.steps:
            log_point(step)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics(records, out_dir / "metrics.csv")
        extra = {"artificial_types": encode_vocab(vocab)} if vocab else {}
        save_model(model, out_dir / "model.npz", cfg, extra)
    return model, records


def encode_vocab(vocab: dict) -> dict:
    return {repr(sig): k for sig, k in vocab.items()}


def decode_vocab(encoded: dict) -> dict:
    return {ast.literal_eval(sig): k for sig, k in encoded.items()}


def remap_for_model(meta: dict, samples):
    """Apply the artificial-type relabelling a model was trained with, if any."""
    enc = (meta.get("extra") or {}).get("artificial_types")
    if not enc:
        return samples
    return artificial_atom_types(samples, decode_vocab(enc))[0]


def aggregate(records_by_seed: dict[int, list[TrainRecord]]) -> list[dict]:
    """Mean and standard deviation across seeds at every (step, split)."""
    table: dict[tuple, list[TrainRecord]] = {}
    for recs in records_by_seed.values():
        for r in recs:
            table.setdefault((r.step, r.split), []).append(r)
    rows = []
    for (step, split_name), rs in sorted(table.items()):
        row = dict(step=step, split=split_name, n_seeds=len(rs))
        for k in METRIC_COLUMNS[2:]:
            vals = np.array([getattr(r, k) for r in rs])
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std())
        rows.append(row)
    return rows


def write_rows(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _seed_job(args):
    cfg, seed, out_dir = args
    _, recs = train_seed(cfg, seed, out_dir=out_dir)
    return seed, recs


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MOLCT_THREADS", "1")))
    except ValueError:
        return 1


def train(cfg: RunConfig, seeds: Sequence[int] | None = None, figures: bool = True) -> dict:
    """Train every seed, write per-seed metrics/models, aggregate CSV and loss-curve figure.

    Returns {"records": {seed: [...]}, "failures": {seed: message}, "aggregate": rows}.
    """
    cfg.validate()
    seeds = list(seeds if seeds is not None else cfg.seeds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, failures = {}, {}
    jobs = [(cfg, s, out / f"seed_{s}") for s in seeds]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {s: pool.submit(_seed_job, job) for s, job in zip(seeds, jobs)}
            for s, fut in futs.items():
                try:
                    records[s] = fut.result()[1]
                except NumericFailure as exc:
                    failures[s] = str(exc)
    else:
        data = prepare_data(cfg)
        for s, job in zip(seeds, jobs):
            try:
                records[s] = train_seed(cfg, s, data=data, out_dir=job[2])[1]
            except NumericFailure as exc:
                log.error("%s", exc)
                failures[s] = str(exc)
    rows = aggregate(records)
    write_rows(rows, out / "aggregate.csv")
    if figures and rows:
        from .plotting import plot_loss_curves

        plot_loss_curves({"run": rows}, out / "loss_curves.png")
    return dict(records=records, failures=failures, aggregate=rows)


# ---------------------------------------------------------------- ablation


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """Apply '+'-joined variant overrides left to right."""
    out = cfg
    for part in variant.split("+"):
        if part not in VARIANTS:
            raise ConfigError(f"unknown variant {part!r}; valid variants: {', '.join(VARIANTS)}")
        out = out.replace(**VARIANTS[part])
    return out


def ablate(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int] | None = None,
           out_dir=None, figures: bool = True) -> list[dict]:
    """Run every variant on the same data split and seed list; write curves, table and figure."""
    seeds = list(seeds if seeds is not None else cfg.seeds)
    configs = {v: variant_config(cfg, v) for v in variants}
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_data = load_datasets(cfg)
    curves, table = {}, []
    for v, vcfg in configs.items():
        train_set, val_set = base_data
        vocab = None
        if vcfg.artificial_atom_types:
            train_set, vocab = artificial_atom_types(train_set)
            val_set, _ = artificial_atom_types(val_set, vocab)
        recs = {}
        t0 = time.time()
        for s in seeds:
            _, recs[s] = train_seed(vcfg, s, data=(train_set, val_set, vocab),
                                    out_dir=out / v / f"seed_{s}")
        rows = aggregate(recs)
        write_rows(rows, out / v / "aggregate.csv")
        curves[v] = rows
        last = max(r["step"] for r in rows)
        fin = {r["split"]: r for r in rows if r["step"] == last}
        tr_m = fin["train"]["loss_mean"]
        va_m = fin["val"]["loss_mean"] if "val" in fin else float("nan")
        table.append(dict(
            variant=v,
            params=param_count(vcfg)["total"],
            final_train_loss_mean=tr_m,
            final_train_loss_std=fin["train"]["loss_std"],
            final_val_loss_mean=va_m,
            final_val_loss_std=fin["val"]["loss_std"] if "val" in fin else float("nan"),
            val_train_ratio=va_m / tr_m if tr_m > 0 else float("inf"),
            seconds=round(time.time() - t0, 1),
        ))
        log.info("variant %s done: train %.4g val %.4g", v, tr_m, va_m)
    write_rows(table, out / "report.csv")
    flat = [dict(variant=v, **r) for v, rows in curves.items() for r in rows]
    write_rows(flat, out / "curves.csv")
    if figures:
        from .plotting import plot_loss_curves

        plot_loss_curves(curves, out / "loss_curves.png")
    return table


# ---------------------------------------------------------------- parameter counts


def param_count(cfg: RunConfig | ModelConfig) -> dict:
    mcfg = cfg.model_config() if isinstance(cfg, RunConfig) else cfg
    model = MolCtModel(mcfg, seed=0)
    counts = dict(
        embeddings=model.species_table.size + model.relation_table.size,
        rme=model.rme.num_parameters(),
    )
    for k, unit in enumerate(model.units):
        counts[f"unit{k}_{unit.kind}"] = unit.num_parameters()
        if unit.kind == "niu":
            counts[f"unit{k}_ponder"] = unit.block.ponder.num_parameters()
    counts["readout"] = model.readout.num_parameters()
    counts["total"] = model.num_parameters()
    return counts


# ---------------------------------------------------------------- gradient check

GRADCHECK_TOLERANCES = {"coords": 1e-5, "params": 1e-5, "force_loss_params": 1e-4}


def relative_error(a, b, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor) over components."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_graph(rng: np.random.Generator, n: int, species=(1, 6, 7, 8), min_dist: float = 0.9,
                 box: float | None = None, n_rel_types: int = 2) -> MolecularGraph:
    """Random non-degenerate configuration with a random spanning chain of bonds."""
    box = box or 1.2 * n ** (1 / 3) + 1.0
    while True:
        x = rng.uniform(-box / 2, box / 2, size=(n, 3))
        d = np.linalg.norm(x[:, None] - x[None], axis=-1) + np.eye(n) * 1e9
        if d.min() > min_dist:
            break
    z = rng.choice(species, size=n)
    edges = [(k, k + 1, int(rng.integers(n_rel_types))) for k in range(n - 1)]
    return MolecularGraph(z, x, edges)


def _pick_params(model: MolCtModel, rng, per_param: int = 1):
    picks = []
    for name, p in model.named_parameters().items():
        for _ in range(per_param):
            picks.append((name, p, tuple(int(rng.integers(s)) for s in p.shape)))
    return picks


def gradcheck(cfg: RunConfig | None = None, seed: int = 0, n_atoms: int = 4, step: float = 1e-5) -> dict:
    """Finite-difference checks of forces, energy parameter gradients and force-loss parameter gradients."""
    mcfg = (cfg.model_config() if cfg else ModelConfig(D=8, d=4, heads=2, rme_blocks=1, unit="niu"))
    rng = np.random.default_rng(seed)
    model = MolCtModel(mcfg, seed=seed)
    g = random_graph(rng, n_atoms)
    lam = cfg.lam if cfg else 0.99
    ponder_w = cfg.ponder_weight if cfg else 0.001
    report = {}

    def energy_at(x):
        with ad.no_grad():
            return predict_energy_forces(g.with_coords(x), model).total_energy[0]

    pred = predict_energy_forces(g, model)
    fd = -ad.finite_diff_grad(lambda x: energy_at(x.reshape(-1, 3)), g.coords.copy(), step)
    report["coords"] = relative_error(pred.forces[0], fd)

    picks = _pick_params(model, rng)
    params = [p for _, p, _ in picks]
    uniq = list({id(p): p for p in params}.values())

    def fd_param(fn, p, idx, h):
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = fn()
        p.data[idx] = orig - h
        fm = fn()
        p.data[idx] = orig
        return (fp - fm) / (2 * h)

    # first-order: energy w.r.t. parameters
    b = GraphBatch.from_graphs([g], requires_grad=True)
    res = molct_forward(b, model)
    energy = ad.tsum(model.readout(res.nodes))
    grads = dict(zip(map(id, uniq), ad.grad(energy, uniq)))
    errs = []
    for name, p, idx in picks:
        an = grads[id(p)].data[idx] if grads[id(p)] is not None else 0.0
        num = fd_param(lambda: energy_at(g.coords), p, idx, step)
        errs.append(relative_error(an, num))
    report["params"] = max(errs)

    # second-order path: full loss with force term
    e_label = np.array([0.3])
    f_label = rng.normal(size=(1, n_atoms, 3))

    def loss_value():
        with ad.no_grad():
            pr = predict_energy_forces(g, model, physical_units=False)
        return float(loss(pr, e_label, f_label, lam, ponder_w).data)

    pr = predict_energy_forces(g, model, create_graph=True, physical_units=False)
    L = loss(pr, e_label, f_label, lam, ponder_w)
    grads = dict(zip(map(id, uniq), ad.grad(L, uniq)))
    errs = []
    for name, p, idx in picks:
        an = grads[id(p)].data[idx] if grads[id(p)] is not None else 0.0
        num = fd_param(loss_value, p, idx, 1e-4 if step < 1e-4 else step)
        errs.append(relative_error(an, num))
    report["force_loss_params"] = max(errs)
    report["n_params_checked"] = len(picks)
    report["passed"] = all(report[k] < tol for k, tol in GRADCHECK_TOLERANCES.items())
    return report
