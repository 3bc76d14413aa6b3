"""``hesplit`` command line.

Exit codes: 0 success, 2 configuration error, 3 protocol abort, 4 undetected
manipulation in attack mode.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import socket
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import ckks, nn
from ..channel import KeyRing, ProtocolAbort, ReplayCache, Session, setup_keys
from ..data import DataFormatError, load_dataset, synth_for, train_test_split
from ..split import ClientEngine, Mode, ServerEngine, train_local
from . import attack as attack_mod
from .bench import bench_he
from .config import ConfigError, RunConfig, build, parse_addr
from .dump import dump_activation_maps
from .report import write_report

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_UNDETECTED = 0, 2, 3, 4
log = logging.getLogger("hesplit")


# ---------------------------------------------------------------------------
# shared helpers


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _config(args) -> RunConfig:
    over = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    return build(args.config, over)


def load_data(cfg: RunConfig):
    if cfg.data == "synth":
        ds = synth_for(cfg.model, cfg.synth_train + cfg.synth_test, cfg.seed)
        return train_test_split(ds, cfg.synth_train / (cfg.synth_train + cfg.synth_test), cfg.seed)
    try:
        ds = load_dataset(cfg.data, cfg.model)
        if cfg.test_data:
            return ds, load_dataset(cfg.test_data, cfg.model)
    except (OSError, DataFormatError) as exc:
        raise ConfigError(f"cannot load data: {exc}") from None
    return train_test_split(ds, 1.0 - cfg.test_fraction, cfg.seed)


def _keys(cfg: RunConfig, me: str, peer: str) -> KeyRing:
    try:
        return KeyRing.load(cfg.keys, me, peer)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load key ring from {cfg.keys!r} ({exc}); run `hesplit setup` first") from None


def _save_params(out: Path, params: dict, name: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    np.savez(path, **params)
    return path


def _finish(cfg: RunConfig, history, params: dict, tc) -> None:
    out = Path(cfg.out)
    files = write_report(out, tc, history, cfg.report)
    _save_params(out, params, "client_params.npz")
    for m in history:
        log.info("epoch %d  loss %.4f  train %.2f%%  test %.2f%%  %.2fs  c2s %d B  s2c %d B", m.epoch, m.loss,
                 m.train_acc, m.test_acc, m.time_s, m.bytes_c2s, m.bytes_s2c)
    log.info("report: %s", ", ".join(str(v) for v in files.values()))


# ---------------------------------------------------------------------------
# commands


def cmd_setup(args) -> int:
    d = Path(args.keys)
    client, server = setup_keys(), setup_keys()
    client.save(d, "client")
    server.save(d, "server")
    log.info("wrote client and server key rings to %s", d)
    return EXIT_OK


def cmd_local(args) -> int:
    cfg = _config(args)
    tc = cfg.train_config()
    if tc.mode is not Mode.LOCAL:
        tc.mode = Mode.LOCAL
        tc.he = None
    train, test = load_data(cfg)
    model, history = train_local(tc, train, test)
    _finish(cfg, history, model.tensors, tc)
    return EXIT_OK


def cmd_client(args) -> int:
    cfg = _config(args)
    tc = cfg.train_config()
    if tc.mode is Mode.LOCAL:
        raise ConfigError("client needs mode split-plain or split-he")
    train, test = load_data(cfg)
    keys = _keys(cfg, "client", "server")
    try:
        sock = socket.create_connection(parse_addr(cfg.connect), timeout=cfg.timeout)
    except OSError as exc:
        log.error("cannot reach server at %s: %s", cfg.connect, exc)
        return EXIT_ABORT
    with sock:
        engine = ClientEngine(tc, Session(sock, keys, "client"), train, test)
        history = engine.run()
    _finish(cfg, history, engine.params, tc)
    return EXIT_OK


def cmd_server(args) -> int:
    cfg = _config(args)
    tc = cfg.train_config()
    if tc.mode is Mode.LOCAL:
        raise ConfigError("server needs mode split-plain or split-he")
    keys = _keys(cfg, "server", "client")
    pinned = {"lr": tc.lr, "n": tc.batch_size, "E": tc.epochs, "model": tc.model, "mode": tc.mode.value,
              "he": tc.he.label() if tc.he else None, "be": tc.batch_encrypt, "seed": tc.seed}
    cache = ReplayCache()
    lst = socket.create_server(parse_addr(cfg.listen))
    log.info("listening on %s:%d", *lst.getsockname()[:2])
    status = EXIT_OK
    with lst:
        for _ in range(cfg.sessions):
            conn, peer = lst.accept()
            conn.settimeout(cfg.timeout)
            with conn:
                eng = ServerEngine(Session(conn, keys, "server", replay_cache=cache), pinned=pinned)
                try:
                    eng.serve()
                    log.info("session with %s finished after %d batches", peer, eng.batches_done)
                except ProtocolAbort as exc:
                    log.error("session with %s aborted: %s: %s", peer, type(exc).__name__, exc)
                    status = EXIT_ABORT
    return status


def _parse_script(path) -> list:
    acts = []
    for line in Path(path).read_text().splitlines():
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        kind, nums = parts[0], [int(v) for v in parts[1:]]
        if kind == "tamper":
            acts.append(attack_mod.Action("tamper", nums[0], bit=nums[1] if len(nums) > 1 else 64 * 8))
        elif kind == "replay":
            acts.append(attack_mod.Action("replay", nums[0]))
        elif kind == "delay":
            acts.append(attack_mod.Action("delay", nums[0], ms=nums[1]))
        elif kind == "reorder":
            acts.append(attack_mod.Action("reorder", nums[0], source=nums[1]))
        else:
            raise ConfigError(f"unknown attack action {kind!r}")
    return acts


def cmd_attack(args) -> int:
    cfg = _config(args)
    if args.proxy_to:
        proxy = attack_mod.MitmProxy(parse_addr(args.proxy_to),
                                     _parse_script(args.script) if args.script else (),
                                     listen=parse_addr(cfg.listen))
        log.info("proxy %s:%d -> %s", *proxy.address[:2], args.proxy_to)
        proxy.run()
        for s in proxy.seen:
            print(f"{s.index}\t{s.direction}\t{s.msg_type}\t{s.size}")
        return EXIT_OK
    tc = cfg.train_config()
    if tc.mode is Mode.LOCAL:
        tc.mode = Mode.SPLIT_PLAIN
    train, test = load_data(cfg)
    actions = _parse_script(args.script) if args.script else None
    control, results = attack_mod.run_campaign(tc, train, test, actions, args.tampers, args.replays,
                                               cfg.seed, timeout=args.victim_timeout)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attack_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["action", "victim", "expected", "observed", "detected", "correct_class"])
        for r in results:
            w.writerow([r.action.describe(), r.victim, r.expected, r.observed, r.detected, r.correct_class])
    missed = [r for r in results if not r.detected]
    log.info("control session: %d messages, completed cleanly", len(control.seen))
    log.info("%d actions, %d detected, %d with the expected error class", len(results),
             len(results) - len(missed), sum(r.correct_class for r in results))
    for r in missed:
        log.error("undetected: %s (victim %s)", r.action.describe(), r.victim)
    return EXIT_UNDETECTED if missed else EXIT_OK


def cmd_dump_am(args) -> int:
    cfg = _config(args)
    arch = nn.ARCHITECTURES[cfg.model]
    if args.params:
        with np.load(args.params) as z:
            params = {k: z[k] for k in nn.CLIENT_KEYS}
    else:
        params = nn.init_params(arch, cfg.seed).client_part()
    train, test = load_data(cfg)
    idx = [int(v) for v in args.samples.split(",") if v.strip()]
    try:
        info = dump_activation_maps(params, arch, train, idx, cfg.out, svg=cfg.report == "csv+svg")
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    for row in info:
        log.info("sample %d: %d input + %d AM series, best channel %d, pearson %.3f", row["sample"],
                 row["input_series"], row["am_series"], row["best_channel"], row["pearson"])
    return EXIT_OK


def cmd_bench_he(args) -> int:
    cfg = _config(args)
    sets = [ckks.HEParams.parse(s) for s in args.sets] if args.sets else list(ckks.STANDARD_PARAM_SETS)
    weak = [p.label() for p in sets if p.is_weak]
    if weak and not cfg.allow_weak_params:
        raise ConfigError(f"{', '.join(weak)} below ring degree 4096; pass --allow-weak-params")
    flags = {"both": (False, True), "true": (True,), "false": (False,)}[args.be]
    rows = bench_he(sets, flags, cfg.model, cfg.batch_size, args.batches, cfg.seed,
                    progress=lambda r: log.info("%s", json.dumps(r.row())))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_he.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].row()))
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
    return EXIT_OK


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hesplit", description="U-shaped split learning on CKKS-encrypted activations")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("setup", help="generate client and server key rings")
    p.add_argument("--keys", default="keys")
    p.set_defaults(fn=cmd_setup)

    for name, fn, help_ in (("local", cmd_local, "train the unsplit model"),
                            ("client", cmd_client, "run the client half"),
                            ("server", cmd_server, "run the server half")):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("attack", help="tamper/replay campaign through a TCP proxy")
    _add_run_flags(p)
    p.add_argument("--tampers", type=int, default=200)
    p.add_argument("--replays", type=int, default=50)
    p.add_argument("--script", help="action file: 'tamper I BIT', 'replay I', 'delay I MS', 'reorder I J'")
    p.add_argument("--victim-timeout", type=float, default=3.0)
    p.add_argument("--proxy-to", help="only run the proxy in front of a server at host:port")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("dump-am", help="write inputs and split-layer activation maps")
    _add_run_flags(p)
    p.add_argument("--samples", default="0")
    p.add_argument("--params", help="client_params.npz from a previous run (default: seeded init)")
    p.set_defaults(fn=cmd_dump_am)

    p = sub.add_parser("bench-he", help="HE parameter sweep")
    _add_run_flags(p)
    p.add_argument("--sets", nargs="*", help="e.g. 8192/[60,40,40,60]/2^40")
    p.add_argument("--be", choices=("both", "true", "false"), default="both")
    p.add_argument("--batches", type=int, default=2)
    p.set_defaults(fn=cmd_bench_he)
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ProtocolAbort as exc:
        log.error("protocol abort: %s: %s", type(exc).__name__, exc)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
