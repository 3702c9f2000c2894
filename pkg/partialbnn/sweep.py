"""Uncertainty placement sweep: one training run per placement, same seed."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .data import Split
from .evaluate import EvalMode, EvalResult, evaluate
from .exceptions import InvalidConfig
from .report import RecordKind, TrainRecord
from .trainer import Trainer, initial_model

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import Dataset
    from .model import ArchSpec, PlacementConfig
    from .trainer import TrainConfig

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepEntry:
    """Training curve and final verification result of one placement."""

    placement: PlacementConfig
    records: tuple[TrainRecord, ...]
    final: EvalResult
    wall_time: float = field(default=0.0, compare=False)

    def curve(self) -> list[tuple[int, float | None, float | None]]:
        """(epoch, training loss, verification accuracy) per epoch."""
        loss = {r.epoch: r.total for r in self.records if r.kind is RecordKind.EPOCH}
        accuracy = {
            r.epoch: r.verification_accuracy
            for r in self.records
            if r.kind is RecordKind.EVAL
        }
        return [(epoch, loss[epoch], accuracy.get(epoch)) for epoch in sorted(loss)]


@dataclass(frozen=True)
class SweepReport:
    """All placements trained with one config."""

    arch: ArchSpec
    config: TrainConfig
    entries: tuple[SweepEntry, ...]

    def rows(self, include_timing: bool = False) -> list[dict[str, Any]]:
        """Report rows, each tagged with its placement."""
        rows: list[dict[str, Any]] = []
        for entry in self.entries:
            label = {"placement": entry.placement.label}
            rows.extend(label | r.to_row(include_timing) for r in entry.records)
            final = entry.final.to_row(include_timing)
            if include_timing:
                final["wall_time"] = entry.wall_time
            rows.append(label | final)
        return rows

    def ranking(self) -> list[tuple[str, float]]:
        """Placements by final accuracy, best first."""
        return sorted(
            ((e.placement.label, e.final.accuracy) for e in self.entries),
            key=lambda item: -item[1],
        )


def run_placement(
    arch: ArchSpec,
    placement: PlacementConfig,
    dataset: Dataset,
    config: TrainConfig,
) -> SweepEntry:
    """Train one placement from the shared seed and evaluate it."""
    start = time.perf_counter()
    model = initial_model(arch, placement, config)
    records = Trainer(model, config).train(dataset)
    final = evaluate(model, dataset, Split.PUBLIC_TEST, EvalMode.MEAN)
    _LOGGER.info(
        "[%s] Final verification accuracy %.4f",
        placement.label,
        final.accuracy,
    )
    return SweepEntry(
        placement=placement,
        records=tuple(records),
        final=final,
        wall_time=time.perf_counter() - start,
    )


def placement_sweep(
    arch: ArchSpec,
    placements: Sequence[PlacementConfig],
    dataset: Dataset,
    config: TrainConfig,
    jobs: int = 1,
) -> SweepReport:
    """Train every placement; jobs > 1 runs them in separate processes."""
    if not placements:
        raise InvalidConfig("groups", "at least one placement is required")
    if jobs < 1:
        raise InvalidConfig("jobs", "must be at least 1")
    if jobs == 1:
        entries = [run_placement(arch, p, dataset, config) for p in placements]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(
                pool.map(
                    run_placement,
                    [arch] * len(placements),
                    placements,
                    [dataset] * len(placements),
                    [config] * len(placements),
                ),
            )
    return SweepReport(arch=arch, config=config, entries=tuple(entries))
