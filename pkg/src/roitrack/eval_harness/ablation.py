"""Component ablations: pooling mode, dense feature map, instance loss, box regression.

Each cell fixes a network, pretraining and tracker configuration. Cells that
share the network and pretraining settings share checkpoints, which are
stored as ``<pretrain hash>-s<seed>.ckpt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import tensor_core as tc
from ..backbone import Variant
from ..errors import ConfigError
from ..network import NetworkConfig, config_hash
from ..pretrain import DomainDataset, PretrainConfig, pretrain_loop
from ..roi_extract import PoolingMode
from ..tracker import TrackerConfig, run_sequence
from .metrics import EvalResult, evaluate, merge
from .synthetic import generate_sequence, standard_suite, training_domains


@dataclass(frozen=True)
class AblationCell:
    name: str
    net: NetworkConfig
    pretrain: PretrainConfig
    tracker: TrackerConfig

    def describe(self, with_tracker: bool = True) -> dict:
        d = {"net": self.net.describe(), "pretrain": self.pretrain.describe()}
        if with_tracker:
            d["tracker"] = self.tracker.describe()
        return d

    @property
    def pretrain_hash(self) -> str:
        return config_hash(self.describe(with_tracker=False))

    @property
    def hash(self) -> str:
        return config_hash(self.describe())

    def variant(self, name: str | None = None, pooling=None, dense: bool | None = None,
                iel: bool | None = None, bbr: bool | None = None) -> "AblationCell":
        net, pre, trk = self.net, self.pretrain, self.tracker
        if pooling is not None:
            net = net.with_(pooling=PoolingMode(pooling))
        if dense is not None:
            net = net.with_(variant=Variant.DENSE if dense else Variant.ORIGINAL)
        if iel is not None:
            pre = pre.with_(alpha=0.1 if iel else 0.0)
        if bbr is not None:
            trk = trk.with_(bbr=bbr)
        return AblationCell(name or self.name, net, pre, trk)


def base_cell(net: NetworkConfig | None = None, pretrain: PretrainConfig | None = None,
              tracker: TrackerConfig | None = None) -> AblationCell:
    return AblationCell("ours", net or NetworkConfig.toy(), pretrain or PretrainConfig.toy(),
                        tracker or TrackerConfig.toy())


def pooling_cells(base: AblationCell | None = None) -> list[AblationCell]:
    """RoIPooling, RoIAlign and adaptive RoIAlign on the original backbone, then adaptive + dense."""
    base = base or base_cell()
    return [
        base.variant("roipool", pooling=PoolingMode.ROI_POOL, dense=False),
        base.variant("roialign", pooling=PoolingMode.ROI_ALIGN, dense=False),
        base.variant("adaptive", pooling=PoolingMode.ADAPTIVE, dense=False),
        base.variant("improved", pooling=PoolingMode.ADAPTIVE, dense=True),
    ]


def component_cells(base: AblationCell | None = None) -> list[AblationCell]:
    """Full model with box regression and instance loss removed one after the other."""
    base = base or base_cell()
    return [
        base.variant("ours-bbr-iel", pooling=PoolingMode.ADAPTIVE, dense=True, iel=False, bbr=False),
        base.variant("ours-bbr", pooling=PoolingMode.ADAPTIVE, dense=True, iel=True, bbr=False),
        base.variant("ours", pooling=PoolingMode.ADAPTIVE, dense=True, iel=True, bbr=True),
    ]


def checkpoint_path(directory, cell: AblationCell, seed: int) -> Path:
    return Path(directory) / f"{cell.pretrain_hash}-s{seed}.ckpt"


def prepare_checkpoints(cells, seeds, directory, dataset: DomainDataset | None = None,
                        progress=None) -> list[Path]:
    """Pretrain every (cell, seed) whose checkpoint is not on disk yet."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset = dataset or DomainDataset(training_domains())
    made = []
    for cell in cells:
        for seed in seeds:
            path = checkpoint_path(directory, cell, seed)
            if path.exists():
                continue
            res = pretrain_loop(dataset, cell.pretrain, cell.net, seed)
            tc.save_checkpoint(path, res.params)
            made.append(path)
            if progress is not None:
                progress(cell, seed, path)
    return made


@dataclass
class CellResult:
    cell: AblationCell
    per_seed: dict = field(default_factory=dict)        # seed -> pooled EvalResult
    per_sequence: dict = field(default_factory=dict)    # (seed, name) -> EvalResult

    @property
    def mean_auc(self) -> float:
        return float(np.mean([r.auc for r in self.per_seed.values()]))

    @property
    def mean_precision(self) -> float:
        return float(np.mean([r.precision_20 for r in self.per_seed.values()]))

    def sequence_auc(self, seed: int) -> float:
        """Mean over sequences of the per-sequence AUC."""
        return float(np.mean([r.auc for (s, _), r in self.per_sequence.items() if s == seed]))


def evaluate_cell(cell: AblationCell, seeds, checkpoint_dir, suite=None) -> CellResult:
    suite = suite if suite is not None else standard_suite()
    out = CellResult(cell)
    for seed in seeds:
        path = checkpoint_path(checkpoint_dir, cell, seed)
        if not path.exists():
            raise ConfigError(f"no pretrained checkpoint for cell {cell.name!r} seed {seed} ({path.name})")
        params = tc.load_checkpoint(path)
        results = []
        for name, spec, seq_seed in suite:
            seq = generate_sequence(spec, seq_seed, name)
            tr = run_sequence(seq, params, cell.net, cell.tracker, seed)
            r = evaluate(tr.boxes, seq.gt)
            out.per_sequence[(seed, name)] = r
            results.append(r)
        out.per_seed[seed] = merge(results)
    return out


def run_ablation(cells, seeds=(0, 1, 2), checkpoint_dir="checkpoints", suite=None,
                 progress=None) -> list[CellResult]:
    """Evaluate every cell on the synthetic suite for every seed.

    Raises :class:`ConfigError` if a cell lacks a pretrained checkpoint.
    """
    for cell in cells:
        for seed in seeds:
            if not checkpoint_path(checkpoint_dir, cell, seed).exists():
                raise ConfigError(f"no pretrained checkpoint for cell {cell.name!r} seed {seed}")
    results = []
    for cell in cells:
        results.append(evaluate_cell(cell, seeds, checkpoint_dir, suite))
        if progress is not None:
            progress(results[-1])
    return results


def format_table(results: list[CellResult]) -> str:
    seeds = sorted(results[0].per_seed) if results else []
    head = ["cell", "hash"] + [f"auc_s{s}" for s in seeds] + ["mean_auc", "mean_prec20"]
    rows = ["\t".join(head)]
    for r in results:
        cols = [r.cell.name, r.cell.hash] + [f"{r.per_seed[s].auc:.4f}" for s in seeds]
        cols += [f"{r.mean_auc:.4f}", f"{r.mean_precision:.4f}"]
        rows.append("\t".join(cols))
    return "\n".join(rows)


def rename(cell: AblationCell, name: str) -> AblationCell:
    return replace(cell, name=name)


__all__ = [
    "AblationCell", "CellResult", "base_cell", "pooling_cells", "component_cells", "checkpoint_path",
    "prepare_checkpoints", "evaluate_cell", "run_ablation", "format_table", "rename", "EvalResult",
]
