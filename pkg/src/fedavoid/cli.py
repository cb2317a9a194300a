"""Command-line entry point: ``fedavoid <subcommand> [flags]``.

Exit codes: 0 success, 1 config error, 2 protocol error, 3 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data, experiments as ex, models, session
from . import transport as tp
from .errors import ConfigError, FedAvoidError, FormatError, ProtocolError, StateError
from .metrics import evaluate

log = logging.getLogger("fedavoid")

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_INTERNAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# model files are a single GLOBAL_MODEL frame
# ---------------------------------------------------------------------------


def save_model(mp: models.ModelParams, path) -> None:
    Path(path).write_bytes(tp.encode(tp.global_model(mp.version, mp)))


def load_model(path) -> models.ModelParams:
    m = tp.decode(Path(path).read_bytes())
    if m.msg_type != tp.MsgType.GLOBAL_MODEL:
        raise FormatError("model file does not hold a global model frame", 0)
    return tp.to_model_params(m)


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args, **overrides) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _net(args) -> tp.NetConditions | None:
    flags = [getattr(args, k, None) for k in ("net_drop", "net_dup", "net_reorder")]
    if all(f is None for f in flags):
        return None
    return tp.NetConditions(args.net_drop or 0.0, args.net_dup or 0.0, args.net_reorder or 0, seed=args.seed or 0)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _metrics(mp, cfg) -> dict:
    vals = ex.val_sets(cfg)
    out = {name: evaluate(mp, ds).as_dict() for name, ds in sorted(vals.items())}
    if len(vals) > 1:
        out[ex.POOLED] = evaluate(mp, data.combine([vals[k] for k in sorted(vals)])).as_dict()
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    for seed in cfg.seeds:
        for env in cfg.train_ids:
            ds = data.generate(env, "train", cfg.train_size, seed, cfg.shift)
            data.save(ds, out / f"{env.name}_train_s{seed}.feds")
    for env in cfg.val_ids:
        data.save(data.generate(env, "val", cfg.val_size, cfg.val_seed, cfg.shift), out / f"{env.name}_val.feds")
    print(f"wrote datasets to {out}")
    return EXIT_OK


def _train_cmd(args, mode) -> int:
    cfg = _config(args, mode=mode)
    seed = cfg.seeds[0]
    out = _out(args)
    net = _net(args)
    extra = {}
    if mode == "federated" and net is not None:
        sets = ex.train_sets(cfg, seed)
        init = models.initial_model(cfg.architecture, seed)
        server = session.ServerCoordinator(session.ServerConfig(tuple(sorted(sets)), cfg.rounds, cfg.quorum), init)
        clients = session.make_clients(sets, init, cfg.epochs, cfg.lr, cfg.batch_size, seed, clip_norm=cfg.clip_norm)
        res = session.run_sim_session(server, clients, net)
        extra = {"virtual_ms": res.virtual_ms, "committed_rounds": len(res.committed) - 1,
                 "decode_errors": res.decode_errors, "rejected": res.rejected}
        if not res.finished:
            print(f"session failed after {len(res.committed) - 1} committed rounds", file=sys.stderr)
            return EXIT_PROTOCOL
        mp = res.final
    else:
        mp = ex.train(cfg, seed)
    save_model(mp, out / "model.feda")
    summary = {"config": cfg.to_json(), "seed": seed, "version": mp.version, "metrics": _metrics(mp, cfg), **extra}
    _write_json(out / "metrics.json", summary)
    for name, m in summary["metrics"].items():
        print(f"{name}: accuracy={m['accuracy']:.4f} auc={m['auc']:.4f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = _config(args)
    out = _out(args)
    init = models.initial_model(cfg.architecture, cfg.seeds[0])
    coord = session.ServerCoordinator(
        session.ServerConfig(tuple(sorted(cfg.train_envs)), cfg.rounds, cfg.quorum, args.round_deadline_ms), init)

    def ready(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    session.serve_tcp(coord, args.host, args.port, ready=ready)
    save_model(coord.global_model, out / "model.feda")
    if not coord.finished:
        print("session failed", file=sys.stderr)
        return EXIT_PROTOCOL
    print(f"committed version {coord.global_model.version}")
    return EXIT_OK


def cmd_client(args) -> int:
    cfg = _config(args)
    if args.client_id not in cfg.train_envs:
        raise ConfigError(f"client id {args.client_id!r} is not one of {cfg.train_envs}")
    seed = cfg.seeds[0]
    sets = ex.train_sets(cfg, seed)
    init = models.initial_model(cfg.architecture, seed)
    clients = session.make_clients(sets, init, cfg.epochs, cfg.lr, cfg.batch_size, seed, clip_norm=cfg.clip_norm)
    client = next(c for c in clients if c.client_id == args.client_id)
    session.run_tcp_client(client, args.host, args.port, args.timeout)
    if client.error or not client.done:
        print(f"client {client.client_id}: {client.error or 'timed out'}", file=sys.stderr)
        return EXIT_PROTOCOL
    print(f"client {client.client_id}: trained {client.trained_rounds} rounds")
    return EXIT_OK


def cmd_continual(args) -> int:
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = ex.ContinualConfig.from_json(obj)
    else:
        cfg = ex.ContinualConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    out = _out(args)
    res = ex.run_continual(cfg, log_dir=out)
    (out / "continual.csv").write_text(res.to_csv())
    _write_json(out / "continual_summary.json", {
        "note": "medians are across training seeds",
        "medians": [{"arch": a, "arm": arm, "accuracy": v} for (a, arm), v in sorted(res.medians().items())],
    })
    for (a, arm), v in sorted(res.medians().items()):
        print(f"{a} {arm}: median accuracy {v:.4f}")
    return EXIT_OK


def _modes_archs(args):
    modes = tuple(args.modes.split(",")) if args.modes else ("centralized", "federated")
    archs = tuple(args.archs.split(",")) if args.archs else models.ARCH_NAMES
    for m in modes:
        if m not in ("centralized", "federated"):
            raise ConfigError(f"unknown mode {m!r}")
    for a in archs:
        models.get_arch(a)
    return modes, archs


def _progress(row):
    log.info("%s %s %s seed=%s %s acc=%s", row["mode"], row["arch"], row["train_envs"], row["seed"],
             row["val_env"], row["accuracy"])


def cmd_matrix(args) -> int:
    cfg = _config(args)
    modes, archs = _modes_archs(args)
    rep = ex.run_matrix(ex.expand(cfg, modes, archs, args.min_combo), progress=_progress)
    rep.write(_out(args), "matrix")
    errors = sum(r["status"] != "ok" for r in rep.rows)
    print(f"{len(rep.rows)} rows, {errors} error rows")
    return EXIT_OK


def cmd_sim2real(args) -> int:
    overrides = {} if args.config else {"val_envs": [e.name for e in data.REAL_ENVS]}
    cfg = _config(args, **overrides)
    modes, archs = _modes_archs(args)
    rep = ex.run_sim2real(cfg, modes, archs, args.min_combo, progress=_progress)
    out = _out(args)
    rep.write(out, "sim2real")
    for (mode, arch), series in sorted(ex.series_table(rep).items()):
        print(f"{mode} {arch}: " + " ".join(f"{k}={v:.3f}" for k, v in sorted(series.items())))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    try:
        rows = ex.read_rows(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed report CSV: {exc}") from exc
    rep = ex.MatrixReport(rows)
    out = _out(args)
    stem = Path(args.input).stem
    _write_json(out / f"{stem}_summary.json", {"note": "accuracy distributions are across training seeds",
                                               "cells": rep.summary()})
    for cell in rep.summary():
        a = cell["accuracy"]
        print(f"{cell['mode']:<11} {cell['arch']:<12} {cell['train_envs']:<12} {cell['val_env']:<7} "
              f"n={cell['seeds']} min={a['min']:.3f} q1={a['q1']:.3f} med={a['median']:.3f} "
              f"q3={a['q3']:.3f} max={a['max']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedavoid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config's seeds with one seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "write .feds datasets and manifests")
    add("train-central", lambda a: _train_cmd(a, "centralized"), "train on pooled data")
    tf = add("train-fed", lambda a: _train_cmd(a, "federated"), "federated training, in-process or over a simulated network")
    tf.add_argument("--net-drop", type=float, help="drop probability per frame")
    tf.add_argument("--net-dup", type=float, help="duplication probability per frame")
    tf.add_argument("--net-reorder", type=int, help="maximum reorder window in frames")
    sv = add("serve", cmd_serve, "run a TCP round server")
    sv.add_argument("--round-deadline-ms", type=float, default=60_000.0)
    cl_ = add("client", cmd_client, "run one TCP client")
    cl_.add_argument("--client-id", required=True, help="environment name this client trains on")
    cl_.add_argument("--timeout", type=float, default=3600.0)
    for sp in (sv, cl_):
        sp.add_argument("--host", default="127.0.0.1")
        sp.add_argument("--port", type=int, default=7878)
    add("continual", cmd_continual, "continual collection and fusion arms")
    for name, fn in (("matrix", cmd_matrix), ("sim2real", cmd_sim2real)):
        sp = add(name, fn, f"run the {name} experiment")
        sp.add_argument("--modes", help="comma-separated subset of centralized,federated")
        sp.add_argument("--archs", help="comma-separated architecture names")
        sp.add_argument("--min-combo", type=int, default=1 if name == "matrix" else 2)
    rp = add("report", cmd_report, "summarise a report CSV")
    rp.add_argument("--input", required=True, help="matrix or sim2real CSV")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ProtocolError, StateError, tp.DecodeError, ConnectionError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except FedAvoidError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
