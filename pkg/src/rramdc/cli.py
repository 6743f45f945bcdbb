"""Command-line entry point: ``rramdc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import cost as costmod
from . import harness
from .crossbar import inject_sa1, map_network, monte_carlo_eval
from .data import get_dataset
from .dropconnect import DEFAULT_P_PRIMES, POLICIES, DropConnectConfig, RecalibrationConfig, update_var
from .engine import checkpoint
from .engine.checkpoint import CheckpointError
from .engine.network import NetworkSpecError
from .topologies import BUILTIN, get_network
from .train import TrainConfig, TrainingDivergedError, train_with_drop_connect
from .transforms import PlacementPlan, WidenConfig, expand_shortcut, plan_placement, widen

logger = logging.getLogger("rramdc")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _out(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_plan(net, plan: str) -> PlacementPlan:
    if plan in ("default", "all-rram"):
        return plan_placement(net, plan)
    custom = json.loads(Path(plan).read_text())
    return plan_placement(net, "custom", custom)


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    cfg = replace(cfg, **overrides)
    net = get_network(args.net)
    data = get_dataset(args.dataset)
    dc = DropConnectConfig(p=args.dc_rate, applies_to=args.applies_to, mask_seed=args.mask_seed)
    model = train_with_drop_connect(net, data, dc, cfg).model
    checkpoint.save(model, _out(args.out))
    acc = model.accuracy(data.x_test, data.y_test)
    print(json.dumps({"checkpoint": str(args.out), "test_accuracy": acc, "params": net.num_params()}))
    return 0


def cmd_updatevar(args) -> int:
    model = checkpoint.load(args.ckpt)
    data = get_dataset(args.dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snaps = update_var(model, data, RecalibrationConfig(p_primes=args.p_prime, seed=args.seed))
    stem = Path(args.ckpt).stem
    written = {}
    for pp, snap in snaps.items():
        path = out / f"{stem}_pp{pp!r}.rrdc"
        checkpoint.save(snap, path)
        written[repr(pp)] = str(path)
    print(json.dumps(written, indent=2))
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load(args.ckpt)
    data = get_dataset(args.dataset)
    plan = _load_plan(model.spec, args.placement)
    arrays = map_network(model, plan)
    if args.save_fault_map:
        inject_sa1(arrays, args.fault_rate, args.seed, args.fault_mode).save(_out(args.save_fault_map))
    p_prime = args.p_prime
    if p_prime is None:
        p_prime = model.metadata.get("updatevar", {}).get("p_prime", args.fault_rate)
    res = monte_carlo_eval(
        model, data.x_test, data.y_test, args.fault_rate, args.crossbars, args.seed,
        arrays=arrays, p_prime=p_prime, scale_correction=not args.no_scale_correction, mode=args.fault_mode,
    )
    print(json.dumps({
        "fault_rate": args.fault_rate, "crossbars": res.n, "p_prime": p_prime,
        "mean": res.mean, "std": res.std, "min": res.min, "max": res.max,
    }))
    return 0


def cmd_transform(args) -> int:
    net = widen(get_network(args.net), WidenConfig(args.widen))
    if args.expand_shortcut:
        net = expand_shortcut(net)
    net.save(_out(args.out))
    print(json.dumps({"out": str(args.out), "params": net.num_params()}))
    return 0


def cmd_cost(args) -> int:
    net = widen(get_network(args.net), WidenConfig(args.widen))
    plan = _load_plan(net, args.plan)
    if args.calibrate:
        params = costmod.Anchor.load(args.calibrate).calibrate()
    elif args.throughput and args.power_eff:
        params = costmod.CostModelParams(args.throughput, args.power_eff, args.workload)
    else:
        raise costmod.CalibrationError("give --calibrate <anchor file> or both --throughput and --power-eff")
    rows = costmod.cost_table(net, plan, params)
    text = costmod.cost_csv(rows)
    if args.out:
        _out(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    latency, energy = costmod.estimate(net, plan, params)
    print(json.dumps({"latency": latency, "energy": energy, "macs": costmod.count_ops(net, plan).total}), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    spec = harness.SweepSpec.load(args.spec)
    records = harness.run_sweep(spec, out_dir=args.out_dir, workers=args.workers, resume=args.resume)
    for p in harness.report(records, args.out_dir):
        print(p)
    return 0


def cmd_criticality(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    res = harness.criticality_experiment(
        args.net, get_dataset(args.dataset), args.fault_rates, args.dc_rate, args.crossbars, cfg, args.seed, args.out_dir
    )
    print(json.dumps({repr(f): gap for f, gap in res.gaps().items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rramdc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    nets = f"builtin name ({', '.join(BUILTIN)}) or a network spec JSON file"

    p = sub.add_parser("train", help="train a network with drop-connect")
    p.add_argument("--net", required=True, help=nets)
    p.add_argument("--dc-rate", type=float, default=0.0, help="drop probability p")
    p.add_argument("--seed", type=int, default=None, help="initialization and shuffling seed")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--applies-to", choices=sorted(POLICIES), default="spatial")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--dataset", default="digits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("updatevar", help="recalibrate batch-norm statistics per inference fault rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--p-prime", type=_floats, default=DEFAULT_P_PRIMES, help="comma-separated list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="digits")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_updatevar)

    p = sub.add_parser("eval", help="Monte-Carlo accuracy on faulty crossbars")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fault-rate", type=float, required=True)
    p.add_argument("--crossbars", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first fault-map seed")
    p.add_argument("--p-prime", type=float, default=None, help="scale-correction rate (default: checkpoint's, else the fault rate)")
    p.add_argument("--no-scale-correction", action="store_true")
    p.add_argument("--placement", default="default", help="default, all-rram or a JSON plan file")
    p.add_argument("--fault-mode", choices=("iid", "exact"), default="iid")
    p.add_argument("--save-fault-map", help="write the first fault map to this file")
    p.add_argument("--dataset", default="digits")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transform", help="widen a network and/or expand its 1x1 shortcuts")
    p.add_argument("--net", required=True, help=nets)
    p.add_argument("--widen", type=float, default=0.0, help="fractional channel increase p")
    p.add_argument("--expand-shortcut", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("cost", help="per-layer latency/energy table as CSV")
    p.add_argument("--net", required=True, help=nets)
    p.add_argument("--widen", type=float, default=0.0)
    p.add_argument("--plan", default="default", help="default, all-rram or a JSON plan file")
    p.add_argument("--calibrate", help="anchor JSON file")
    p.add_argument("--throughput", type=float)
    p.add_argument("--power-eff", type=float)
    p.add_argument("--workload", type=float, default=1.0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="run an experiment grid")
    p.add_argument("--spec", required=True, help="sweep spec JSON file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="skip cells with provenance files")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("criticality", help="host-placed vs RRAM-placed 1x1 layers")
    p.add_argument("--net", required=True, help=nets)
    p.add_argument("--fault-rates", type=_floats, default=(0.0, 0.2))
    p.add_argument("--dc-rate", type=float, default=0.3)
    p.add_argument("--crossbars", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="first fault-map seed")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--dataset", default="digits")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_criticality)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, CheckpointError, NetworkSpecError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
