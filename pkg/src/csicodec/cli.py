"""Command-line harness: dataset generation, training, coding, evaluation,
clustering and plotting.

Every command reads one TOML file (``--config``) with optional tables
``[scene]``, ``[array]``, ``[data]``, ``[codec]``, ``[train]``, ``[sweep]``
and ``[cluster]``, and writes ``manifest.json`` next to its outputs with the
config hash, seed and package version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import struct
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .channel import ArrayConfig, SceneConfig, generate_dataset, read_dataset, write_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .cluster import cluster_users
from .codec import CodecConfig, MultiUserCsiCodec
from .evaluate import evaluate
from .rangecoder import Bitstream
from .report import ResultRow, emit_results, read_csv
from .train import TrainConfig, fine_tune, rd_sweep, train, train_distributed

log = logging.getLogger("csicodec")

STREAMS_MAGIC = b"DCMS"


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _section(cfg: dict, name: str, cls):
    table = dict(cfg.get(name, {}))
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise SystemExit(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    return cls(**table)


def scene_config(cfg):
    return _section(cfg, "scene", SceneConfig)


def array_config(cfg):
    return _section(cfg, "array", ArrayConfig)


def codec_config(cfg):
    return _section(cfg, "codec", CodecConfig)


def train_config(cfg, **overrides):
    tc = _section(cfg, "train", TrainConfig)
    return TrainConfig(**{**asdict(tc), **overrides}) if overrides else tc


def validate_config(cfg: dict) -> None:
    """Fail early on unknown tables or keys instead of mid-run."""
    builders = {"scene": scene_config, "array": array_config, "codec": codec_config, "train": train_config}
    for name in cfg:
        if name not in (*builders, "data", "sweep", "cluster"):
            raise SystemExit(f"unknown config table [{name}]")
    for name, build in builders.items():
        if name in cfg:
            try:
                build(cfg)
            except (TypeError, ValueError) as exc:
                raise SystemExit(f"invalid [{name}]: {exc}") from exc


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
        "config": cfg,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data helpers


def user_file(directory: Path, user: int) -> Path:
    return directory / f"user{user}.csi"


def load_users(directory) -> np.ndarray:
    """All ``user*.csi`` files of a dataset directory as ``(K, n, N_c, N_t)``;
    a single ``.csi`` file counts as one user."""
    directory = Path(directory)
    if directory.is_file():
        return read_dataset(directory).matrices.astype(np.complex128)[None]
    mats = []
    while user_file(directory, len(mats)).exists():
        mats.append(read_dataset(user_file(directory, len(mats))).matrices)
    if not mats:
        raise SystemExit(f"no user0.csi in {directory}")
    return np.stack(mats).astype(np.complex128)


def write_streams(path, streams: list[Bitstream]) -> None:
    out = bytearray(STREAMS_MAGIC + struct.pack("<I", len(streams)))
    for s in streams:
        raw = s.to_bytes()
        out += struct.pack("<I", len(raw)) + raw
    Path(path).write_bytes(bytes(out))


def read_streams(path) -> list[Bitstream]:
    raw = Path(path).read_bytes()
    if raw[:4] != STREAMS_MAGIC:
        raise SystemExit(f"{path}: not a stream file")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos, out = 8, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        out.append(Bitstream.from_bytes(raw[pos + 4 : pos + 4 + n]))
        pos += 4 + n
    return out


def _seed(cfg) -> int:
    return int(cfg.get("train", {}).get("seed", 0))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    scene, array = scene_config(cfg), array_config(cfg)
    data = cfg.get("data", {})
    n = int(args.n_scenes or data.get("n_scenes", 2500))
    seed = int(args.seed if args.seed is not None else data.get("seed", scene.rng_seed))
    h, pos = generate_dataset(scene, array, n, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for u in range(h.shape[0]):
        write_dataset(user_file(out, u), h[u], pos[u])
    write_manifest(out, "gen-data", cfg, seed, {"n_scenes": n, "n_users": h.shape[0]})
    print(f"wrote {h.shape[0]} user file(s) with {n} scenes to {out}")


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "lam", None) is not None:
        out["lam"] = args.lam
    if getattr(args, "steps", None) is not None:
        out["steps"] = args.steps
    return out


def cmd_train(args, cfg):
    h = load_users(args.data)[args.user]
    model, report = train(h, train_config(cfg, **_overrides(args)), codec_config(cfg))
    _save_run(args.out, "train", cfg, model, report, args.report)


def cmd_fine_tune(args, cfg):
    h = load_users(args.data)
    tc = train_config(cfg, **_overrides(args))
    if args.from_scratch:
        model, report = train_distributed(h, tc, codec_config(cfg))
    else:
        source = load_checkpoint(args.checkpoint)
        model, report = fine_tune(source, h, tc)
    _save_run(args.out, "fine-tune", cfg, model, report, args.report)


def _save_run(out, command, cfg, model, report, report_path=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    Path(report_path or out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    write_manifest(out, command, cfg, _seed(cfg), {"model_id": model.model_id()})
    if report.final is not None:
        r = report.final
        print(f"rate {r.rate:.4f} bits/entry  entropy {r.entropy:.4f}  NMSE {r.nmse_db:.2f} dB  rho {r.rho:.4f}")


def cmd_rd_sweep(args, cfg):
    h = load_users(args.data)[args.user]
    if args.lambdas:
        lambdas = [float(v) for item in args.lambdas for v in item.split(",") if v]
    else:
        lambdas = cfg.get("sweep", {}).get("lambdas", [1.0, 4.0, 16.0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cc = codec_config(cfg)
    rows = []
    for point, model, report in rd_sweep(h, lambdas, train_config(cfg, **_overrides(args)), cc):
        save_checkpoint(model, out / f"model_lam{point.lam:g}.ckpt")
        rows.append(ResultRow(args.series, cc.upsample_mode, point.lam, point.rate, point.entropy,
                              point.nmse_db, point.rho))
        print(f"lambda {point.lam:g}: rate {point.rate:.4f}  NMSE {point.nmse_db:.2f} dB")
    emit_results(rows, out / "results.csv", out / "results.svg")
    write_manifest(out, "rd-sweep", cfg, _seed(cfg), {"lambdas": [float(v) for v in lambdas]})


def cmd_encode(args, cfg):
    model = load_checkpoint(args.checkpoint)
    h = read_dataset(args.data).matrices.astype(np.complex128)
    if isinstance(model, MultiUserCsiCodec):
        streams = [model.compress(x, args.user) for x in h]
    else:
        streams = [model.compress(x) for x in h]
    write_streams(args.out, streams)
    bits = sum(s.payload_bits for s in streams)
    print(f"encoded {len(streams)} matrices, {bits / max(1, h[0].size * len(h)):.4f} payload bits/entry")


def cmd_decode(args, cfg):
    model = load_checkpoint(args.checkpoint)
    per_user = [read_streams(p) for p in args.streams]
    if isinstance(model, MultiUserCsiCodec):
        if len(per_user) != model.n_users:
            raise SystemExit(f"model needs {model.n_users} stream files, got {len(per_user)}")
        recs = [[] for _ in per_user]
        for group in zip(*per_user):
            for u, r in enumerate(model.decompress(list(group))):
                recs[u].append(r)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for u, rec in enumerate(recs):
            write_dataset(user_file(out, u), rec)
    else:
        if len(per_user) != 1:
            raise SystemExit("a single-user model takes one stream file")
        write_dataset(args.out, [model.decompress(s) for s in per_user[0]])
    print(f"decoded {len(per_user[0])} matrices")


def cmd_evaluate(args, cfg):
    model = load_checkpoint(args.checkpoint)
    h = load_users(args.data)
    data = h if isinstance(model, MultiUserCsiCodec) else h[args.user]
    if args.limit:
        data = data[..., : args.limit, :, :] if data.ndim == 4 else data[: args.limit]
    result = evaluate(model, data)
    text = json.dumps(result.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_cluster(args, cfg):
    positions = read_dataset(args.positions).positions if args.positions.endswith(".csi") else None
    if positions is None:
        positions = np.loadtxt(args.positions, delimiter=",", ndmin=2)
    threshold = args.threshold or cfg.get("cluster", {}).get("threshold", 1.0)
    clusters = cluster_users(positions, threshold=threshold)
    out = [{"members": list(c.members), "centroid": list(c.centroid)} for c in clusters]
    print(json.dumps(out, indent=2))


def cmd_plot(args, cfg):
    rows = [row for path in args.csv for row in read_csv(path)]
    out = Path(args.out)
    emit_results(rows, out.with_suffix(".csv"), out.with_suffix(".svg"))
    print(f"wrote {out.with_suffix('.svg')}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csicodec", description="Learned CSI feedback compression toolkit")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a channel dataset")
    g.add_argument("--scene", help="TOML file; same as the global --config")
    g.add_argument("--out", required=True)
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a single-user codec")
    t.add_argument("--data", required=True)
    t.add_argument("--user", type=int, default=0)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--report", help="report path (default <out>/report.json)")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("fine-tune", help="train the multi-user codec")
    f.add_argument("--data", required=True)
    f.add_argument("--checkpoint", help="single-user checkpoint to start from")
    f.add_argument("--from-scratch", action="store_true")
    f.add_argument("--lambda", dest="lam", type=float)
    f.add_argument("--steps", type=int, help="from-scratch steps; fine-tuning uses a tenth")
    f.add_argument("--out", required=True)
    f.add_argument("--report")
    f.set_defaults(fn=cmd_fine_tune)

    s = sub.add_parser("rd-sweep", help="train one codec per lambda")
    s.add_argument("--data", required=True)
    s.add_argument("--user", type=int, default=0)
    s.add_argument("--lambdas", nargs="+", help="values, space or comma separated")
    s.add_argument("--steps", type=int)
    s.add_argument("--series", default="single")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_rd_sweep)

    e = sub.add_parser("encode", help="compress a dataset file to bitstreams")
    e.add_argument("--checkpoint", "--model", required=True)
    e.add_argument("--data", "--in", required=True)
    e.add_argument("--user", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct CSI from bitstreams")
    d.add_argument("--checkpoint", "--model", required=True)
    d.add_argument("--streams", "--in", nargs="+", required=True, help="one stream file per user")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_decode)

    v = sub.add_parser("evaluate", help="held-out rate and distortion")
    v.add_argument("--checkpoint", "--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--user", type=int, default=0)
    v.add_argument("--limit", type=int)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("cluster", help="group nearby users")
    c.add_argument("--positions", required=True, help="CSV of x,y rows or a .csi file with positions")
    c.add_argument("--threshold", type=float)
    c.set_defaults(fn=cmd_cluster)

    pl = sub.add_parser("plot", help="merge result CSVs into one plot")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = load_config(args.config or getattr(args, "scene", None))
    validate_config(cfg)
    args.fn(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
