"""Experiment configs and the runners behind the CLI reports."""
from __future__ import annotations

import csv
import dataclasses
import functools
import io
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import continual as cl
from . import data, federation as fed, models
from .data import EnvironmentId, ShiftKnobs
from .errors import ArchitectureError, ConfigError, FedAvoidError
from .metrics import BoxStats, evaluate

log = logging.getLogger(__name__)

VAL_SEED = 1_000_003
POOLED = "pooled"
CSV_FIELDS = ("mode", "arch", "train_envs", "val_env", "seed", "accuracy", "auc", "status", "message")


def _known_arch(name) -> None:
    try:
        models.get_arch(name)
    except ArchitectureError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ExperimentConfig:
    mode: str = "federated"
    arch: str = "alexnet_lite"
    train_envs: list = field(default_factory=lambda: ["S0", "S1", "S2"])
    val_envs: list = field(default_factory=lambda: ["S0", "S1", "S2"])
    seeds: list = field(default_factory=lambda: [0])
    rounds: int = fed.ROUNDS
    epochs: int = fed.LOCAL_EPOCHS
    lr: float = fed.LR
    batch_size: int = fed.BATCH_SIZE
    train_size: int = 1000
    val_size: int = 200
    val_seed: int = VAL_SEED
    quorum: float = 1.0
    clip_norm: float = fed.CLIP_NORM
    shift: ShiftKnobs = field(default_factory=ShiftKnobs)

    def __post_init__(self):
        if isinstance(self.shift, dict):
            try:
                self.shift = ShiftKnobs(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.shift.items()})
            except TypeError as exc:
                raise ConfigError(f"bad shift knobs: {exc}") from exc
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("centralized", "federated"):
            raise ConfigError(f"mode must be centralized or federated, got {self.mode!r}")
        _known_arch(self.arch)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.train_envs:
            raise ConfigError("train_envs must be non-empty")
        for e in list(self.train_envs) + list(self.val_envs):
            EnvironmentId.parse(e)
        if len(set(self.train_envs)) != len(self.train_envs):
            raise ConfigError("train_envs contains duplicates")
        if self.rounds < 0 or self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("invalid schedule")
        if self.train_size < 2 or self.val_size < 2:
            raise ConfigError("dataset sizes must be >= 2")

    @property
    def train_ids(self) -> list[EnvironmentId]:
        return [EnvironmentId.parse(e) for e in self.train_envs]

    @property
    def val_ids(self) -> list[EnvironmentId]:
        return [EnvironmentId.parse(e) for e in self.val_envs]

    @property
    def architecture(self):
        return models.get_arch(self.arch)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["shift"] = dataclasses.asdict(self.shift)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(obj)


@functools.lru_cache(maxsize=64)
def dataset(env: EnvironmentId, split: str, size: int, seed: int, shift: ShiftKnobs) -> data.EnvironmentDataset:
    return data.generate(env, split, size, seed, shift)


def train_sets(cfg: ExperimentConfig, seed: int) -> dict:
    return {e.name: dataset(e, "train", cfg.train_size, seed, cfg.shift) for e in cfg.train_ids}


def val_sets(cfg: ExperimentConfig, envs=None) -> dict:
    envs = cfg.val_ids if envs is None else envs
    return {e.name: dataset(e, "val", cfg.val_size, cfg.val_seed, cfg.shift) for e in envs}


def train_centralized(cfg: ExperimentConfig, seed: int | None = None) -> models.ModelParams:
    """Pool every train env and run ``rounds * epochs`` epochs (equal compute to the federated arm)."""
    seed = cfg.seeds[0] if seed is None else seed
    sets = train_sets(cfg, seed)
    pooled = data.combine([sets[k] for k in sorted(sets)])
    if len(pooled) == 0:
        raise ConfigError("empty training combination")
    return fed.train_centralized_params(cfg.architecture, pooled, cfg.rounds * cfg.epochs, cfg.lr, cfg.batch_size, seed,
                                        clip_norm=cfg.clip_norm)


def train_federated(cfg: ExperimentConfig, seed: int | None = None) -> models.ModelParams:
    """One client per train env, in-process FedAvg."""
    seed = cfg.seeds[0] if seed is None else seed
    run = fed.run_federated(cfg.architecture, train_sets(cfg, seed), cfg.rounds, cfg.epochs, cfg.lr, cfg.batch_size, seed,
                            clip_norm=cfg.clip_norm)
    return run.globals[-1]


def train(cfg: ExperimentConfig, seed: int) -> models.ModelParams:
    return train_federated(cfg, seed) if cfg.mode == "federated" else train_centralized(cfg, seed)


# ---------------------------------------------------------------------------
# matrix
# ---------------------------------------------------------------------------


def combos(envs, min_size: int = 1) -> list[tuple]:
    """Every combination of ``envs`` with at least ``min_size`` members, by size then order."""
    envs = list(envs)
    return [c for r in range(min_size, len(envs) + 1) for c in itertools.combinations(envs, r)]


def expand(base: ExperimentConfig, modes=("centralized", "federated"), archs=models.ARCH_NAMES, min_combo=1) -> list[ExperimentConfig]:
    out = []
    for mode, arch, combo in itertools.product(modes, archs, combos(base.train_envs, min_combo)):
        out.append(dataclasses.replace(base, mode=mode, arch=arch, train_envs=list(combo)))
    return out


@dataclass
class MatrixReport:
    rows: list  # dicts keyed by CSV_FIELDS

    def ok_rows(self):
        return [r for r in self.rows if r["status"] == "ok"]

    def cells(self) -> dict:
        """``(mode, arch, train_envs, val_env) -> {"accuracy": BoxStats, "auc": BoxStats, "seeds": n}``."""
        groups: dict = {}
        for r in self.ok_rows():
            groups.setdefault((r["mode"], r["arch"], r["train_envs"], r["val_env"]), []).append(r)
        out = {}
        for key, rows in groups.items():
            aucs = [r["auc"] for r in rows if not math.isnan(r["auc"])]
            out[key] = {
                "accuracy": BoxStats.of([r["accuracy"] for r in rows]),
                "auc": BoxStats.of(aucs) if aucs else None,
                "seeds": len(rows),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
        return buf.getvalue()

    def summary(self) -> list[dict]:
        out = []
        for (mode, arch, tr, va), c in sorted(self.cells().items()):
            out.append({
                "mode": mode, "arch": arch, "train_envs": tr, "val_env": va, "seeds": c["seeds"],
                "accuracy": c["accuracy"].as_dict(),
                "auc": c["auc"].as_dict() if c["auc"] else None,
            })
        return out

    def write(self, out_dir, stem: str = "matrix") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}_summary.json").write_text(json.dumps({
            "note": "accuracy distributions are across training seeds",
            "cells": self.summary(),
        }, indent=2))


def read_rows(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        r["seed"] = int(r["seed"])
        r["accuracy"] = float(r["accuracy"]) if r["accuracy"] else float("nan")
        r["auc"] = float(r["auc"]) if r["auc"] else float("nan")
        rows.append(r)
    return rows


def _eval_rows(mp, cfg, seed, vals: dict, pooled_name=POOLED) -> list[dict]:
    rows = []
    base = {"mode": cfg.mode, "arch": cfg.arch, "train_envs": "+".join(cfg.train_envs), "seed": seed,
            "status": "ok", "message": ""}
    for name in sorted(vals):
        rep = evaluate(mp, vals[name])
        rows.append({**base, "val_env": name, "accuracy": rep.accuracy, "auc": rep.auc})
    if len(vals) > 1:
        rep = evaluate(mp, data.combine([vals[k] for k in sorted(vals)]))
        rows.append({**base, "val_env": pooled_name, "accuracy": rep.accuracy, "auc": rep.auc})
    return rows


def run_matrix(cfgs, progress=None) -> MatrixReport:
    """Train and evaluate every config x seed; failures become error rows."""
    rows = []
    for cfg in cfgs:
        for seed in cfg.seeds:
            try:
                mp = train(cfg, seed)
                rows.extend(_eval_rows(mp, cfg, seed, val_sets(cfg)))
            except FedAvoidError as exc:
                log.warning("cell %s/%s/%s seed %d failed: %s", cfg.mode, cfg.arch, cfg.train_envs, seed, exc)
                rows.append({"mode": cfg.mode, "arch": cfg.arch, "train_envs": "+".join(cfg.train_envs),
                             "val_env": "", "seed": seed, "accuracy": float("nan"), "auc": float("nan"),
                             "status": "error", "message": str(exc)})
            if progress:
                progress(rows[-1])
    return MatrixReport(rows)


# ---------------------------------------------------------------------------
# sim-to-real
# ---------------------------------------------------------------------------


def run_sim2real(cfg: ExperimentConfig, modes=("centralized", "federated"), archs=models.ARCH_NAMES,
                 min_combo: int = 2, progress=None) -> MatrixReport:
    """Train on simulated combos, evaluate on the pooled real validation set.

    Rows carry ``val_env == "pooled"``; one series per (mode, arch), one point
    per train combo.
    """
    if any(e.realm != "sim" for e in cfg.train_ids):
        raise ConfigError("sim2real training environments must all be simulated")
    if not cfg.val_envs or any(e.realm != "real" for e in cfg.val_ids):
        raise ConfigError("sim2real validation environments must all be real")
    rows = []
    vals = val_sets(cfg)
    pooled = data.combine([vals[k] for k in sorted(vals)])
    for c in expand(cfg, modes, archs, min_combo):
        for seed in c.seeds:
            try:
                mp = train(c, seed)
                rep = evaluate(mp, pooled)
                rows.append({"mode": c.mode, "arch": c.arch, "train_envs": "+".join(c.train_envs), "val_env": POOLED,
                             "seed": seed, "accuracy": rep.accuracy, "auc": rep.auc, "status": "ok", "message": ""})
            except FedAvoidError as exc:
                rows.append({"mode": c.mode, "arch": c.arch, "train_envs": "+".join(c.train_envs), "val_env": POOLED,
                             "seed": seed, "accuracy": float("nan"), "auc": float("nan"), "status": "error",
                             "message": str(exc)})
            if progress:
                progress(rows[-1])
    return MatrixReport(rows)


def series_table(report: MatrixReport, stat: str = "median") -> dict:
    """``{(mode, arch): {train_envs: accuracy statistic}}``; the figure-style table."""
    table: dict = {}
    for (mode, arch, tr, _va), c in report.cells().items():
        table.setdefault((mode, arch), {})[tr] = getattr(c["accuracy"], stat)
    return table


# ---------------------------------------------------------------------------
# continual
# ---------------------------------------------------------------------------


@dataclass
class ContinualConfig:
    archs: list = field(default_factory=lambda: list(models.ARCH_NAMES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # prior global: federated pre-training on the simulated environments, one per architecture
    pretrain_envs: list = field(default_factory=lambda: ["S0", "S1", "S2"])
    pretrain_rounds: int = fed.ROUNDS
    pretrain_epochs: int = fed.LOCAL_EPOCHS
    pretrain_size: int = 1000
    prior_seed: int = 0
    steps: int = 1000  # one default-size training set per robot
    n_buf: int = cl.N_BUF
    epochs: int = 2
    lr: float = fed.LR
    batch_size: int = fed.BATCH_SIZE
    d_trig: float = cl.D_TRIG
    rstar_size: int = 300
    world_seed: int = 0
    rstar_world_seed: int = 7

    def __post_init__(self):
        if not isinstance(self.seeds, list) or not self.seeds or not all(isinstance(x, int) for x in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if not isinstance(self.prior_seed, int):
            raise ConfigError("prior_seed must be an integer")
        if not isinstance(self.archs, list) or not self.archs:
            raise ConfigError("archs must be a non-empty list")
        if min(self.steps, self.pretrain_rounds, self.pretrain_epochs, self.epochs) < 0 or self.lr < 0:
            raise ConfigError("invalid schedule")
        if min(self.pretrain_size, self.rstar_size) < 2:
            raise ConfigError("dataset sizes must be >= 2")
        for a in self.archs:
            _known_arch(a)
        if self.n_buf < self.batch_size:
            raise ConfigError("n_buf must be >= batch_size")

    @classmethod
    def from_json(cls, obj: dict) -> "ContinualConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown continual config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


ARMS = ("none", "HS", "HR", "HS+HR")


@dataclass
class ContinualResult:
    rows: list
    rounds: dict  # (arch, seed, arm) -> list of fusion rounds, each a list of ClientUpdates
    fused: dict  # (arch, seed, arm) -> ModelParams
    priors: dict  # arch -> ModelParams

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ("arm", "arch", "seed", "n_updates", "accuracy", "auc")
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})
        return buf.getvalue()

    def medians(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault((r["arch"], r["arm"]), []).append(r["accuracy"])
        return {k: float(np.median(v)) for k, v in out.items()}


def continual_fusion(prior: models.ModelParams, make_sessions) -> tuple[models.ModelParams, list]:
    """Fuse robot updates into the global as they arrive.

    ``make_sessions(provider)`` builds the robots' sessions around a global
    provider. Each fusion round takes the next update from every robot that
    still has one, all trained from the same global, and replaces the global
    with their weighted mean. With no robots the prior stands.
    """
    state = {"g": prior}
    streams = [s.run() for s in make_sessions(lambda: state["g"])]
    rounds = []
    while True:
        batch = [u for u in (next(st, None) for st in streams) if u is not None]
        if not batch:
            return state["g"], rounds
        state["g"] = fed.aggregate(batch)
        rounds.append(batch)


def run_continual(cfg: ContinualConfig, progress=None, log_dir=None) -> ContinualResult:
    """Continual learning from a simulated and a real-realm robot, singly and together.

    Every arm starts from the same prior global, trained once per architecture;
    the seeds vary the robot tours and local training. Accuracy is measured on
    frames from a separate real-realm world. With ``log_dir`` the worlds and
    every session log are written there.
    """
    worlds = {"HS": cl.random_world(cfg.world_seed, "sim"), "HR": cl.random_world(cfg.world_seed + 1, "real")}
    if log_dir is not None:
        log_dir = Path(log_dir)
        for name, w in worlds.items():
            w.save(log_dir / f"world_{name}.json")
    rstar = cl.collect_validation(cl.random_world(cfg.rstar_world_seed, "real"), cfg.rstar_size, cfg.rstar_world_seed, cfg.d_trig)
    rows, rounds, fused, priors = [], {}, {}, {}
    for arch_name in cfg.archs:
        arch = models.get_arch(arch_name)
        pre = {e: data.generate(EnvironmentId.parse(e), "train", cfg.pretrain_size, cfg.prior_seed)
               for e in cfg.pretrain_envs}
        prior = fed.run_federated(arch, pre, cfg.pretrain_rounds, cfg.pretrain_epochs, cfg.lr, cfg.batch_size,
                                  cfg.prior_seed).globals[-1]
        priors[arch_name] = prior
        for seed in cfg.seeds:
            for arm in ARMS:
                robots = [] if arm == "none" else arm.split("+")
                sessions = []

                def make(provider, robots=robots, seed=seed):
                    for name in robots:
                        off = 0 if name == "HS" else 1
                        sessions.append(cl.ContinualSession(
                            worlds[name], cl.Schedule(seed=seed * 2 + off, steps=cfg.steps), cfg.n_buf,
                            cl.TrainCfg(cfg.epochs, cfg.lr, cfg.batch_size, seed * 1000 + off * 100), provider,
                            client_id=name, d_trig=cfg.d_trig))
                    return sessions

                mp, rs = continual_fusion(prior, make)
                fused[arch_name, seed, arm] = mp
                rounds[arch_name, seed, arm] = rs
                if log_dir is not None:
                    for sess in sessions:
                        sess.write_log(log_dir / f"session_{arch_name}_s{seed}_{arm}_{sess.client_id}.csv")
                rep = evaluate(mp, rstar)
                rows.append({"arm": arm, "arch": arch_name, "seed": seed, "n_updates": sum(map(len, rs)),
                             "accuracy": rep.accuracy, "auc": rep.auc})
                if progress:
                    progress(rows[-1])
    return ContinualResult(rows, rounds, fused, priors)
