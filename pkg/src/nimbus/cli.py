"""``nimbus`` command line.

Exit status: 0 on success, 1 for usage or validation errors, 2 for runtime
failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import FormatError, NimbusError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _config(args):
    from .experiments import load_config

    return load_config(args.config)


def _with_overrides(cfg, **sections):
    from .experiments import config_from_dict

    d = cfg.to_dict()
    for section, values in sections.items():
        if section == "seed":
            if values is not None:
                d["seed"] = values
                d["train"]["seed"] = values
                d["data"]["seed"] = values
            continue
        d[section].update({k: v for k, v in values.items() if v is not None})
    return config_from_dict(d)


def cmd_gen_data(args) -> int:
    from .experiments import run_gen_data

    cfg = _with_overrides(_config(args), seed=args.seed, data={"steps": args.steps})
    path = run_gen_data(cfg, args.out)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import run_train

    cfg = _with_overrides(
        _config(args), seed=args.seed,
        model={"variant": args.variant},
        train={"iterations": args.iterations},
        paths={"data": args.data},
    )
    print(run_train(cfg, args.out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiments import run_evaluate

    report = run_evaluate(args.run, args.leads, args.baseline, args.max_inits)
    print(f"{Path(args.run) / 'metrics.csv'}: {len(report.lead_hours)} leads x {len(report.channels)} channels")
    return EXIT_OK


def cmd_forecast(args) -> int:
    from .experiments import run_forecast

    print(run_forecast(args.run, args.init, args.steps, args.out, tuple(args.maps or ())))
    return EXIT_OK


def cmd_ic_index(args) -> int:
    from .experiments import run_ic_index

    cfg = _with_overrides(_config(args), paths={"data": args.data})
    print(run_ic_index(cfg, args.index, args.out, pgm=not args.no_pgm))
    return EXIT_OK


def cmd_cnop(args) -> int:
    from .experiments import run_cnop

    override = {k: v for k, v in {
        "xi": args.xi, "k_max": args.kmax, "memory": args.memory, "lead_steps": args.lead,
        "init_index": args.init, "seed": args.seed,
        "perturb": "both" if args.perturb_both else None,
        "smooth": False if args.no_smooth else None,
    }.items() if v is not None}
    out = run_cnop(args.run, override, args.out, maps=args.maps)
    print(json.loads((out / "summary.json").read_text()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import run_ablation

    cfg = _config(args)
    cfg = _with_overrides(cfg, ablation={"seeds": args.seeds, "variants": args.variants, "leads": args.leads,
                                         "max_inits": args.max_inits},
                          train={"iterations": args.iterations})
    res = run_ablation(cfg, args.out)
    for v, s in zip(res.variants, res.cloud_score.mean(axis=0)):
        print(f"{v:10s} cloud score {s:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nimbus", description="Cloud-microphysics forecaster, verification and CNOP tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_arg(sp):
        sp.add_argument("--config", help="experiment JSON (packaged: desk.json, full.json)")

    sp = sub.add_parser("gen-data", help="write a synthetic AVSF dataset")
    config_arg(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model variant")
    config_arg(sp)
    sp.add_argument("--variant", choices=("full", "no_ic", "no_mp_ic", "baseline"))
    sp.add_argument("--data", help="AVSF dataset (default: synthetic data from the config)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics of a trained run on its test split")
    sp.add_argument("--run", required=True)
    sp.add_argument("--leads", type=int)
    sp.add_argument("--max-inits", type=int)
    sp.add_argument("--baseline", help="metrics.csv of a reference model for NRMSE")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("forecast", help="autoregressive forecast from one test initialisation")
    sp.add_argument("--run", required=True)
    sp.add_argument("--init", type=int, default=1)
    sp.add_argument("--steps", type=int, default=4)
    sp.add_argument("--maps", nargs="*", help="channels to write as PGM, e.g. ciwc500")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("ic-index", help="icing-condition index of one state")
    config_arg(sp)
    sp.add_argument("--data", help="AVSF dataset (default: synthetic data from the config)")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--no-pgm", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ic_index)

    sp = sub.add_parser("cnop", help="optimal initial perturbation for a trained run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--xi", type=float)
    sp.add_argument("--kmax", type=int)
    sp.add_argument("--memory", type=int)
    sp.add_argument("--lead", type=int, help="lead time in steps")
    sp.add_argument("--init", type=int, help="test-split index of X_t")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--perturb-both", action="store_true", help="also perturb X_{t-1}")
    sp.add_argument("--no-smooth", action="store_true")
    sp.add_argument("--maps", action="store_true", help="write per-channel PGM maps")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cnop)

    sp = sub.add_parser("ablate", help="train and compare all variants over several seeds")
    config_arg(sp)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--variants", nargs="+", choices=("full", "no_ic", "no_mp_ic", "baseline"))
    sp.add_argument("--leads", type=int)
    sp.add_argument("--max-inits", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def _set_threads() -> None:
    n = os.environ.get("NIMBUS_THREADS")
    if n:
        import torch

        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ValidationError(f"NIMBUS_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (ValidationError, FormatError, ValueError) as exc:
        print(f"nimbus {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NimbusError, OSError, RuntimeError) as exc:
        print(f"nimbus {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
