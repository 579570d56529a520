"""Command-line entry point: ``roitrack <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import tensor_core as tc
from .errors import ConfigError, StateError
from .sequences import GT_FILE, load_dataset, load_sequence, read_groundtruth, read_results, save_sequence

log = logging.getLogger("roitrack")

ABLATE_DEFAULTS = {"net.preset": "toy", "pretrain.preset": "toy", "tracker.preset": "toy"}


def _load_cfg(path) -> dict[str, str]:
    return cfgmod.read_config(path) if path else {}


def cmd_pretrain(args) -> int:
    from .pretrain import DomainDataset, pretrain_loop

    cfg = _load_cfg(args.config)
    net = cfgmod.network_config(cfg)
    pre = cfgmod.pretrain_config(cfg)
    dataset = DomainDataset(load_dataset(args.dataset))
    res = pretrain_loop(dataset, pre, net, args.seed, checkpoint_dir=args.checkpoint_dir,
                        progress=lambda k, loss: log.info("iteration %d loss %.6f", k, loss))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tc.save_checkpoint(out, res.params)
    print(f"domains={len(dataset)} iterations={len(res.domains)} flushes={res.flushes} "
          f"final_loss={res.losses[-1, 0]:.6f} checkpoint={out}")
    return 0


def cmd_track(args) -> int:
    from .tracker import run_sequence

    cfg = _load_cfg(args.config)
    net = cfgmod.network_config(cfg)
    trk = cfgmod.tracker_config(cfg)
    params = tc.load_checkpoint(args.checkpoint)
    seq = load_sequence(args.sequence)
    res = run_sequence(seq, params, net, trk, args.seed, results_path=args.out, session_path=args.session)
    print(f"frames={len(seq)} forward_passes={res.forward_passes} long_updates={len(res.long_updates)} "
          f"short_updates={len(res.short_updates)} results={args.out}")
    return 0


def cmd_eval(args) -> int:
    from .eval_harness.metrics import evaluate, format_curves

    boxes, _ = read_results(args.results)
    gt_path = Path(args.groundtruth)
    gt = read_groundtruth(gt_path / GT_FILE if gt_path.is_dir() else gt_path)
    res = evaluate(boxes, gt)
    if args.json:
        print(json.dumps(res.as_dict(), indent=1))
    else:
        print(f"frames={len(gt)}\nauc={res.auc:.6f}\nprecision_20={res.precision_20:.6f}\nmean_iou={res.ious.mean():.6f}")
        if args.curves:
            print(format_curves(res))
    return 0


def cmd_synth(args) -> int:
    from .eval_harness.synthetic import generate_sequence, tier_spec

    if args.tier:
        spec = tier_spec(args.tier, args.index, args.length)
    else:
        spec = cfgmod.synthetic_spec(_load_cfg(args.spec))
    seq = generate_sequence(spec, args.seed, name=Path(args.out).name)
    save_sequence(seq, args.out)
    print(f"frames={len(seq)} out={args.out}")
    return 0


def cmd_bench(args) -> int:
    from .eval_harness.bench import benchmark_extraction

    cfg = _load_cfg(args.config)
    net = cfgmod.network_config(cfg)
    rep = benchmark_extraction(net, args.n_rois, args.reps, seed=args.seed)
    print(rep.format())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.instances, args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _ablation_cells(cfg: dict[str, str]):
    from .eval_harness import ablation as ab

    merged = {**ABLATE_DEFAULTS, **cfg}
    base = ab.base_cell(cfgmod.network_config(merged), cfgmod.pretrain_config(merged), cfgmod.tracker_config(merged))
    named = {c.name: c for c in ab.pooling_cells(base) + ab.component_cells(base)}
    cells = []
    for name in [n for n in merged.get("cells", "roipool,roialign,adaptive,improved").split(",") if n]:
        if name not in named:
            raise ConfigError(f"unknown ablation cell {name!r}")
        cells.append(named[name])
    for key, val in merged.items():
        if key.startswith("cell."):
            parts = [p.strip() for p in val.split(",")]
            if len(parts) != 4:
                raise ConfigError(f"{key}: expected pooling,dense,iel,bbr")
            flag = lambda v: v.lower() in ("1", "true", "yes", "on")
            cells.append(base.variant(key[5:], pooling=parts[0], dense=flag(parts[1]), iel=flag(parts[2]), bbr=flag(parts[3])))
    return merged, cells


def cmd_ablate(args) -> int:
    from .eval_harness import ablation as ab
    from .eval_harness.synthetic import TIERS, standard_suite, training_domains
    from .pretrain import DomainDataset

    merged, cells = _ablation_cells(_load_cfg(args.matrix))
    seeds = [int(s) for s in merged.get("seeds", "0,1,2").split(",") if s]
    tiers = tuple(t for t in merged.get("suite.tiers", ",".join(TIERS)).split(",") if t)
    suite = standard_suite(int(merged.get("suite.per_tier", 3)), int(merged.get("suite.length", 120)), tiers)
    ckdir = args.checkpoints or merged.get("checkpoints", "checkpoints")
    if args.pretrain_missing:
        dataset = DomainDataset(training_domains(int(merged.get("domains.count", 3)), int(merged.get("domains.length", 20))))
        ab.prepare_checkpoints(cells, seeds, ckdir, dataset)
    results = ab.run_ablation(cells, seeds, ckdir, suite)
    print(ab.format_table(results))
    return 0


def cmd_defaults(args) -> int:
    print(cfgmod.synth_default_text() if args.synth else cfgmod.default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roitrack", description="Multi-domain tracker with shared-map RoI features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="offline multi-domain training")
    s.add_argument("dataset", help="directory with one sub-directory per domain")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint-dir", help="directory for periodic and diagnostic checkpoints")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("track", help="track one sequence")
    s.add_argument("checkpoint")
    s.add_argument("sequence", help="sequence directory (frames + ground truth)")
    s.add_argument("--out", required=True, help="results file (frame_index,x,y,w,h,score)")
    s.add_argument("--session", help="write the online head and box regressor to this file")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="success/precision metrics of a results file")
    s.add_argument("results")
    s.add_argument("groundtruth", help="ground-truth file or sequence directory")
    s.add_argument("--json", action="store_true")
    s.add_argument("--curves", action="store_true", help="also print both curves")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--spec", help="key=value spec file")
    s.add_argument("--tier", help="use a benchmark tier spec instead of a file")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--length", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bench", help="shared-map vs per-candidate extraction timing")
    s.add_argument("--config")
    s.add_argument("--n-rois", type=int, default=256)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="evaluate an ablation matrix on the synthetic suite")
    s.add_argument("matrix", nargs="?", help="key=value matrix file")
    s.add_argument("--checkpoints", help="checkpoint directory")
    s.add_argument("--pretrain-missing", action="store_true", help="pretrain cells without a checkpoint")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("defaults", help="print every config key with its default")
    s.add_argument("--synth", action="store_true", help="synthetic spec keys instead")
    s.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, StateError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
