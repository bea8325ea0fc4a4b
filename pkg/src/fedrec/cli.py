"""Command line entry point.

Every subcommand takes ``--config FILE`` plus any config key as a flag,
e.g. ``--fed.rounds 3`` or ``--fading=non-iid``.  Exit status is 0 on
success, 2 for configuration errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import channel as ch
from .config import config_keys, load_config
from .detectors import NumericalError, aggregate_scales, estimate_scale_ml
from .fed import centralized_train, comm_overhead, fedrec_train, noncollab_train, write_telemetry_csv
from .harness import (
    DETECTOR_KINDS,
    BerReport,
    BerRow,
    ConfigError,
    detector,
    emit_csv,
    emit_plot,
    evaluate_detectors,
    make_datasets,
    run_experiment,
    make_test_stream,
)
from .nn import load_params, param_count, save_params

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _split_overrides(extra: list[str]) -> dict[str, str]:
    known = set(config_keys())
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "unexpected argument")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            i += 1
            val = extra[i]
        key = key.replace("-", "_") if key.replace("-", "_") in known else key
        if key not in known:
            raise ConfigError(key, "unknown option")
        out[key] = val
        i += 1
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrec", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value experiment file")
        return sp

    g = common(sub.add_parser("gen-data", help="write every user's pilot dataset as CSV"))
    g.add_argument("--snr", type=float, required=True, help="SNR per bit in dB")
    g.add_argument("--out", type=Path, required=True)

    t = common(sub.add_parser("train", help="train a learned detector"))
    t.add_argument("--scheme", choices=("FedRec", "CL", "NL"), required=True)
    t.add_argument("--snr", type=float, required=True)
    t.add_argument("--data", type=Path, help="pilot CSV from gen-data (default: generate)")
    t.add_argument("--out", type=Path, required=True, help="model file; NL writes one per user")
    t.add_argument("--telemetry", type=Path, help="FedRec per-round CSV")

    e = common(sub.add_parser("eval", help="BER of one detector on the test stream"))
    e.add_argument("--detector", choices=DETECTOR_KINDS, required=True)
    e.add_argument("--snr", type=float, required=True)
    e.add_argument("--model", type=Path, nargs="+", help="model file(s) for the nn detector")
    e.add_argument("--sigma", type=float, help="Rayleigh scale for map-rayleigh")
    e.add_argument("--out", type=Path, help="BER CSV (default: print)")

    s = common(sub.add_parser("sweep", help="all schemes over the SNR grid"))
    s.add_argument("--out", type=Path, required=True, help="BER CSV")
    s.add_argument("--plot", type=Path, help="SVG plot")
    s.add_argument("--telemetry-dir", type=Path, help="FedRec per-round CSVs, one per SNR")

    o = common(sub.add_parser("overhead", help="training traffic per scheme"))
    o.add_argument("--users", type=int, nargs="+", default=[1, 2, 5])
    return p


def _nl_paths(out: Path, U: int) -> list[Path]:
    return [out.with_name(f"{out.stem}_u{u}{out.suffix}") for u in range(U)]


def _run(args, cfg, log) -> int:
    if args.cmd == "gen-data":
        c = ch.Constellation.for_snr(args.snr, cfg.order)
        ch.write_datasets_csv(make_datasets(cfg, c), args.out)
        log(f"wrote {cfg.U} x {cfg.n_local} pilots to {args.out}")
    elif args.cmd == "train":
        c = ch.Constellation.for_snr(args.snr, cfg.order)
        ds = ch.read_datasets_csv(args.data) if args.data else make_datasets(cfg, c)
        dims = cfg.fed.layer_dims
        if args.scheme == "FedRec":
            res = fedrec_train(ds, cfg.fed, cfg.master_seed, cfg.workers)
            save_params(res.params, args.out)
            if args.telemetry:
                write_telemetry_csv(res.telemetry, args.telemetry)
            log(f"wrote {args.out}")
        elif args.scheme == "CL":
            save_params(centralized_train(ds, cfg.train, cfg.master_seed, dims), args.out)
            log(f"wrote {args.out}")
        else:
            for m, path in zip(noncollab_train(ds, cfg.train, cfg.master_seed, dims), _nl_paths(args.out, len(ds))):
                save_params(m, path)
                log(f"wrote {path}")
    elif args.cmd == "eval":
        c = ch.Constellation.for_snr(args.snr, cfg.order)
        kind = args.detector
        if kind == "nn":
            if not args.model:
                raise ConfigError("model", "the nn detector needs --model")
            det = detector("nn", models=[load_params(p) for p in args.model])
        elif kind == "map-rayleigh":
            det = detector(kind, sigma=args.sigma if args.sigma is not None else cfg.iid_sigma)
        elif kind == "md-estimated":
            ds = make_datasets(cfg, c)
            det = detector(kind, sigma=aggregate_scales([estimate_scale_ml(d, c) for d in ds]))
        elif kind == "map-numeric":
            det = detector(kind, fading=cfg.fading_spec, quadrature=cfg.quadrature)
        else:
            det = detector(kind)
        errs, bits, dt = evaluate_detectors({kind: det}, make_test_stream(cfg), c, cfg.workers)[kind]
        report = BerReport([BerRow(kind, args.snr, errs, bits, errs / bits, dt)])
        if args.out:
            emit_csv(report, args.out)
        log(f"{kind} snr={args.snr:g} dB ber={errs / bits:.6f} ({errs}/{bits})")
    elif args.cmd == "sweep":
        report = run_experiment(cfg, log)
        emit_csv(report, args.out)
        if args.plot:
            emit_plot(report, args.plot, f"BER vs SNR ({cfg.fading}, U={cfg.U})")
        if args.telemetry_dir:
            args.telemetry_dir.mkdir(parents=True, exist_ok=True)
            for snr, recs in report.telemetry.items():
                write_telemetry_csv(recs, args.telemetry_dir / f"telemetry_snr{snr:g}.csv")
        log(report.format_table())
    elif args.cmd == "overhead":
        n = param_count(cfg.fed.layer_dims)
        log("scheme   U   ul_words  dl_words")
        for U in args.users:
            for scheme in ("CL", "FedRec", "NL"):
                r = comm_overhead(scheme, U, n, cfg.fed.rounds, cfg.train_size)
                log(f"{scheme:<7}{U:>3}{r.ul_words:>11}{r.dl_words:>10}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg = load_config(args.config, _split_overrides(extra))
        return _run(args, cfg, print)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
