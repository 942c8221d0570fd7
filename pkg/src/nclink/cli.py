"""Command-line front end: run manifests of trials, parameter sweeps, and
the built-in self-test.

A manifest is a YAML file:

    seed: 42
    repeat: 1
    trials:
      - id: nc-30-p18
        reliability: nc        # raw | harq | harq-arq | nc
        nm: 30                 # nc only
        p: 0.18
        rate: 25.2e6           # link bits/s
        delay: 0.010           # one-way, s
        ack_loss: 0.0
        offered_load: 6.0e6
        packet_size: 1400
        duration: 10.0         # or file_size: 5000000
        np_workers: 1
        codec: {lt: 22400, ti: 1.0, lm: 1400, nr: 120, nk: 1, tr: 0.0}
        arq: {retry_timeout: 0.1}      # optional overrides
        harq: {max_retx: 4}

Flag overrides (--seed, --repeat) beat manifest fields.
"""

import argparse
import csv
import dataclasses
import hashlib
import importlib.resources
import pathlib
import random
import sys

import numpy as np
import yaml

from . import codec, framing, gf256, harness
from .channel import ArqConfig, HarqConfig
from .harness import ChannelConfig, ExperimentConfig, run_trial
from .codec import CodecParams

CSV_COLUMNS = [
    "config_id", "reliability", "nm", "p", "offered_load", "throughput_bps",
    "loss_bps", "loss_pct", "redundancy_bps", "redundancy_exact_bps", "tlr",
    "transfer_delay_s", "sent", "delivered", "seed",
    "drop_overflow", "drop_blocks", "drop_stale", "drop_decap",
    "delivered_salvaged", "error",
]

SWEEP_PARAMS = ("nm", "p", "offered_load", "np_workers")

_CHANNEL_KEYS = ("p", "rate", "delay", "ack_loss", "ack_rate", "ack_delay",
                 "gilbert")
_TRIAL_KEYS = ("id", "reliability", "nm", "offered_load", "packet_size",
               "duration", "file_size", "np_workers", "codec", "arq", "harq")


class ManifestError(ValueError):
    pass


def _build_trial(entry: dict, idx: int) -> ExperimentConfig:
    where = f"trials[{idx}]"
    if not isinstance(entry, dict):
        raise ManifestError(f"{where}: expected a mapping")
    unknown = set(entry) - set(_TRIAL_KEYS) - set(_CHANNEL_KEYS)
    if unknown:
        raise ManifestError(f"{where}: unknown fields {sorted(unknown)}")
    chan_kwargs = {k: entry[k] for k in _CHANNEL_KEYS if k in entry}
    if "gilbert" in chan_kwargs and chan_kwargs["gilbert"] is not None:
        chan_kwargs["gilbert"] = tuple(chan_kwargs["gilbert"])
    sections = {}
    for key, cls in (("codec", CodecParams), ("arq", ArqConfig),
                     ("harq", HarqConfig)):
        kwargs = entry.get(key) or {}
        if not isinstance(kwargs, dict):
            raise ManifestError(f"{where}.{key}: expected a mapping")
        try:
            sections[key] = cls(**kwargs)
        except TypeError as exc:
            raise ManifestError(f"{where}.{key}: {exc}") from exc
    cfg = ExperimentConfig(
        reliability=entry.get("reliability", "raw"),
        nm=entry.get("nm"),
        offered_load=float(entry.get("offered_load", 6e6)),
        packet_size=int(entry.get("packet_size", 1400)),
        duration=entry.get("duration"),
        file_size=entry.get("file_size"),
        channel=ChannelConfig(**chan_kwargs),
        codec=sections["codec"],
        arq=sections["arq"],
        harq=sections["harq"],
        np_workers=int(entry.get("np_workers", 1)),
        config_id=str(entry.get("id", f"trial-{idx}")),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    return cfg


def load_manifest(path) -> tuple[list[ExperimentConfig], int, int]:
    try:
        doc = yaml.safe_load(pathlib.Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "trials" not in doc:
        raise ManifestError("manifest must be a mapping with a 'trials' list")
    trials = doc["trials"]
    if not isinstance(trials, list) or not trials:
        raise ManifestError("'trials' must be a non-empty list")
    configs = [_build_trial(t, i) for i, t in enumerate(trials)]
    return configs, int(doc.get("seed", 0)), int(doc.get("repeat", 1))


def _derive_seed(master: int, index: int) -> int:
    return (master * 1_000_003 + index) % (2**31 - 1)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _report_row(rep, error=""):
    c = rep.counters if rep else {}
    return {
        "config_id": rep.config_id if rep else "",
        "reliability": rep.reliability if rep else "",
        "nm": _fmt(rep.nm) if rep else "",
        "p": _fmt(rep.p) if rep else "",
        "offered_load": _fmt(rep.offered_load) if rep else "",
        "throughput_bps": _fmt(rep.throughput) if rep else "",
        "loss_bps": _fmt(rep.loss) if rep else "",
        "loss_pct": _fmt(rep.loss_pct) if rep else "",
        "redundancy_bps": _fmt(rep.redundancy) if rep else "",
        "redundancy_exact_bps": _fmt(rep.redundancy_exact) if rep else "",
        "tlr": ("saturated" if rep and rep.tlr is None and not error
                else _fmt(rep.tlr) if rep else ""),
        "transfer_delay_s": _fmt(rep.transfer_delay) if rep else "",
        "sent": _fmt(rep.sent) if rep else "",
        "delivered": _fmt(rep.delivered) if rep else "",
        "seed": _fmt(rep.seed) if rep else "",
        "drop_overflow": _fmt(c.get("packets_overflow")) if c else "",
        "drop_blocks": _fmt(c.get("blocks_dropped")) if c else "",
        "drop_stale": _fmt(c.get("stale_bid")) if c else "",
        "drop_decap": _fmt(c.get("decap_errors")) if c else "",
        "delivered_salvaged": _fmt(c.get("delivered_salvaged")) if c else "",
        "error": error,
    }


def run_configs(configs, master_seed, repeat):
    """Execute trials in manifest order; returns (rows, any_error)."""
    rows = []
    failed = False
    idx = 0
    for cfg in configs:
        for _ in range(repeat):
            trial = dataclasses.replace(cfg, seed=_derive_seed(master_seed, idx))
            idx += 1
            try:
                rep = run_trial(trial)
                rows.append(_report_row(rep))
            except Exception as exc:
                failed = True
                stub = dataclasses.replace(trial)
                rows.append({**_report_row(None, error=str(exc)),
                             "config_id": stub.config_id,
                             "reliability": stub.reliability,
                             "seed": _fmt(stub.seed)})
    return rows, failed


def write_csv(path, rows):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def cmd_run(args) -> int:
    try:
        configs, seed, repeat = load_manifest(args.manifest)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        seed = args.seed
    if args.repeat is not None:
        repeat = args.repeat
    rows, failed = run_configs(configs, seed, repeat)
    out = pathlib.Path(args.out) / "trials.csv"
    write_csv(out, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    try:
        configs, seed, _ = load_manifest(args.manifest)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        seed = args.seed
    if args.param not in SWEEP_PARAMS:
        print(f"sweep parameter must be one of {SWEEP_PARAMS}", file=sys.stderr)
        return 2
    values = args.values
    if not values:
        print("empty sweep value list", file=sys.stderr)
        return 2
    base = configs[0]
    rows = []
    failed = False
    for v in values:
        if args.param == "nm":
            trial = dataclasses.replace(base, nm=int(v))
        elif args.param == "p":
            trial = dataclasses.replace(
                base, channel=dataclasses.replace(base.channel, p=float(v)))
        elif args.param == "offered_load":
            trial = dataclasses.replace(base, offered_load=float(v))
        else:
            trial = dataclasses.replace(base, np_workers=int(v))
        # shared seed: paired comparison across sweep values
        trial = dataclasses.replace(
            trial, seed=_derive_seed(seed, 0),
            config_id=f"{base.config_id}-{args.param}={v}")
        try:
            rows.append(_report_row(run_trial(trial)))
        except Exception as exc:
            failed = True
            rows.append({**_report_row(None, error=str(exc)),
                         "config_id": trial.config_id})
    out = pathlib.Path(args.out)
    write_csv(out / "sweep.csv", rows)
    with open(out / f"plot_{args.param}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.param, "throughput_bps", "loss_pct", "tlr",
                         "transfer_delay_s"])
        for v, row in zip(values, rows):
            writer.writerow([v, row["throughput_bps"], row["loss_pct"],
                             row["tlr"], row["transfer_delay_s"]])
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 1 if failed else 0


# -- self-test -------------------------------------------------------------

def _mul_oracle_table() -> np.ndarray:
    """Carry-less multiply-and-reduce over all pairs, no lookup tables."""
    a = np.arange(256, dtype=np.uint32)[:, None]
    b = np.arange(256, dtype=np.uint32)[None, :]
    acc = np.zeros((256, 256), dtype=np.uint32)
    shifted = np.broadcast_to(a, (256, 256)).copy()
    bb = np.broadcast_to(b, (256, 256)).copy()
    for _ in range(8):
        acc ^= np.where(bb & 1, shifted, 0)
        bb >>= 1
        shifted <<= 1
        shifted = np.where(shifted & 0x100, shifted ^ gf256.POLY, shifted)
    return acc.astype(np.uint8)


def _selftest_field():
    if not np.array_equal(gf256.MUL, _mul_oracle_table()):
        return "multiplication table differs from shift-and-reduce oracle"
    for a in range(1, 256):
        if gf256.gf_mul(a, gf256.gf_inv(a)) != 1:
            return f"inverse of {a:#x} fails"
    return None


def _selftest_codec():
    rng = random.Random(1234)
    for trial in range(20):
        packets = [harness.make_packet(i, rng.randrange(40, 400), bytes(512))
                   for i in range(rng.randrange(1, 6))]
        params = CodecParams(nr=8, lm=64, nk=1, nm=6)
        block = codec.build_block(packets, 0, 0, params)
        emissions = [e for e in codec.encode_block(block, params)
                     if not isinstance(e, codec.Pause)]
        rng.shuffle(emissions)
        state = codec.DecoderState(block.ns, block.ls)
        for e in emissions[: block.ns + 3]:
            coeffs = (np.eye(block.ns, dtype=np.uint8)[e.segn]
                      if e.kind == codec.SYSTEMATIC
                      else codec.coefficients_from_seed(e.seed, block.ns))
            state.ingest(coeffs, e.payload)
        if not state.decoded:
            continue  # unlucky erasure pattern; round-trip tested when decoded
        out = codec.reassemble_packets(codec.unpad_block(state.solved_payload()))
        if out != packets:
            return f"round-trip mismatch on trial {trial}"
    return None


def _fixture_dir():
    return importlib.resources.files("nclink") / "fixtures"


def _selftest_fixtures():
    fdir = _fixture_dir()
    manifest = yaml.safe_load((fdir / "manifest.yaml").read_text())
    for entry in manifest["fixtures"]:
        data = (fdir / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            return f"{entry['file']}: content hash changed"
        if entry["kind"] == "ack":
            tid, bid = framing.decode_ack(data)
            if [tid, bid] != entry["fields"]["ack"]:
                return f"{entry['file']}: ACK fields changed"
            continue
        meta, segment = framing.decapsulate(data)
        for name, want in entry["fields"].items():
            if getattr(meta, name) != want:
                return f"{entry['file']}: field {name}={getattr(meta, name)}, want {want}"
        if segment.hex() != entry["segment_hex"]:
            return f"{entry['file']}: segment bytes changed"
    return None


def cmd_selftest(_args=None) -> int:
    checks = [
        ("field arithmetic", _selftest_field),
        ("codec round-trip", _selftest_codec),
        ("golden wire fixtures", _selftest_fixtures),
    ]
    failed = False
    for name, fn in checks:
        try:
            err = fn()
        except Exception as exc:
            err = str(exc)
        status = "PASS" if err is None else f"FAIL ({err})"
        failed = failed or err is not None
        print(f"{name:<24} {status}")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="nclink")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a manifest of trials")
    p_run.add_argument("manifest")
    p_run.add_argument("--out", default=".")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--repeat", type=int, default=None)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one parameter")
    p_sweep.add_argument("manifest")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", nargs="+", default=[])
    p_sweep.add_argument("--out", default=".")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_self = sub.add_parser("selftest", help="codec and fixture self-checks")
    p_self.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
