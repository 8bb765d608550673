"""Experiment orchestration: sum-rate comparison, generalization and timing tables.

A plan is a JSON document, for example::

    {
      "cells": [[10, 2], [20, 4]],
      "algorithms": ["ewmmse", "heuristic", "equal", "gnn"],
      "test": {"seed": 1000, "size": 200},
      "train": {"seed": 2000, "size": 2000, "val_seed": 3000, "val_size": 200,
                "epochs": 30, "optimizer": "adam", "lr": 0.003, "dual_mode": "post"},
      "models": {"gnn": {"10x2": "models/gnn_10x2.json"}},
      "datasets": {"10x2": "data/test_10x2.mcra"},
      "network": {"noise_power": 1e-4},
      "output_dir": "results",
      "generalization": {"anchor": [10, 2], "targets": [[20, 2], [10, 4]]},
      "timing": {"cells": [[30, 10]], "instances": 20, "reps": 3}
    }

Relative paths resolve against the plan file.  Learned algorithms use the
model listed under ``models`` for the cell or, if absent, one trained on the
spot from the ``train`` section.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gnn
from .baselines import equal_split_allocate, grid_search_allocate, heuristic_powers
from .channel import Dataset, NetworkConfig, generate_dataset, read_dataset
from .errors import McraError, PlanError
from .ewmmse import solve, solve_batch
from .trainer import TrainConfig, allocate, summarize, train

log = logging.getLogger(__name__)

ALGORITHMS = ("ewmmse", "heuristic", "equal", "icp", "gnn", "bruteforce")
LEARNED = {"gnn": "jcpgnn-m", "icp": "icp"}
GENERALIZATION_WARN = 102.0

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_NETWORK_KEYS = {"area_side", "d_min", "d_max", "gamma", "noise_power", "p_max"}


def cell_key(D: int, M: int) -> str:
    return f"{D}x{M}"


def _cell(c) -> tuple[int, int]:
    try:
        D, M = (int(v) for v in c)
    except (TypeError, ValueError):
        raise PlanError(f"bad cell {c!r}; expected [D, M]") from None
    return D, M


@dataclass
class ExperimentPlan:
    cells: list[tuple[int, int]]
    algorithms: list[str]
    test_seed: int = 1000
    test_size: int = 200
    train: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    datasets: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    output_dir: Path = Path("results")
    grid_levels: int = 21
    generalization: dict | None = None
    timing: dict | None = None
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.cells = [_cell(c) for c in self.cells]
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise PlanError(f"unknown algorithms {bad}; choose from {list(ALGORITHMS)}")
        extra = set(self.network) - _NETWORK_KEYS
        if extra:
            raise PlanError(f"unknown network keys {sorted(extra)}")
        extra = set(self.train) - _TRAIN_KEYS - {"size", "val_seed", "val_size"}
        if extra:
            raise PlanError(f"unknown train keys {sorted(extra)}")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike = ".") -> "ExperimentPlan":
        if not isinstance(doc, dict) or "cells" not in doc or "algorithms" not in doc:
            raise PlanError("plan needs 'cells' and 'algorithms'")
        test = doc.get("test", {})
        base = Path(base_dir)
        return cls(
            cells=doc["cells"], algorithms=list(doc["algorithms"]),
            test_seed=int(test.get("seed", 1000)), test_size=int(test.get("size", 200)),
            train=dict(doc.get("train", {})), models=dict(doc.get("models", {})),
            datasets=dict(doc.get("datasets", {})), network=dict(doc.get("network", {})),
            output_dir=base / doc.get("output_dir", "results"),
            grid_levels=int(doc.get("grid_levels", 21)),
            generalization=doc.get("generalization"), timing=doc.get("timing"), base_dir=base,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentPlan":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    def network_config(self, D: int, M: int, seed: int) -> NetworkConfig:
        return NetworkConfig(D=D, M=M, seed=seed, **self.network)

    def train_config(self, policy: str) -> TrainConfig:
        opts = {k: v for k, v in self.train.items() if k in _TRAIN_KEYS}
        opts["policy"] = policy
        return TrainConfig(**opts)


def desk_plan(output_dir: str | os.PathLike = "results") -> ExperimentPlan:
    """Laptop-scale default: D in {10, 20}, M in {2, 4}, 200 test instances."""
    return ExperimentPlan(
        cells=[(10, 2), (10, 4), (20, 2), (20, 4)],
        algorithms=["ewmmse", "heuristic", "equal", "gnn"],
        train={"size": 2000, "seed": 2000, "val_size": 200, "val_seed": 3000, "epochs": 30,
               "optimizer": "adam", "lr": 3e-3, "dual_mode": "post"},
        output_dir=Path(output_dir),
        generalization={"anchor": [10, 2], "targets": [[20, 2], [10, 4]]},
        timing={"cells": [[10, 2], [20, 4]], "instances": 20, "reps": 3},
    )


@dataclass
class Table:
    """A titled table whose cells are stored as the exact strings written to CSV.

    Columns in ``volatile`` (wall-clock times) go to a separate ``<name>_time.csv``
    so that the main CSV is reproducible byte for byte.
    """

    name: str
    title: str
    columns: tuple[str, ...]
    rows: list[tuple[str, ...]] = field(default_factory=list)
    volatile: tuple[str, ...] = ()
    key_columns: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)
    values: list[dict] = field(default_factory=list)

    def add(self, **vals) -> None:
        self.values.append(vals)
        self.rows.append(tuple(_fmt(vals[c]) for c in self.columns))

    def _write(self, path: Path, cols: tuple[str, ...]) -> None:
        idx = [self.columns.index(c) for c in cols]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.rows:
                writer.writerow([r[i] for i in idx])

    def to_csv(self, directory: str | os.PathLike) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stable = tuple(c for c in self.columns if c not in self.volatile)
        out = [directory / f"{self.name}.csv"]
        self._write(out[0], stable)
        if self.volatile:
            out.append(directory / f"{self.name}_time.csv")
            self._write(out[1], self.key_columns + self.volatile)
        return out

    def to_markdown(self) -> str:
        lines = [f"## {self.title}", ""]
        lines += [f"{n}" for n in self.notes]
        if self.notes:
            lines.append("")
        lines.append("| " + " | ".join(self.columns) + " |")
        lines.append("|" + "---|" * len(self.columns))
        lines += ["| " + " | ".join(r) + " |" for r in self.rows]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.6g}"
    return str(v)


class ModelStore:
    """Loads or trains one model per (algorithm, cell) and remembers it for the run."""

    def __init__(self, plan: ExperimentPlan, save_dir: Path | None = None):
        self.plan = plan
        self.save_dir = save_dir
        self._cache: dict[tuple[str, int, int], gnn.GnnModel] = {}

    def get(self, algo: str, D: int, M: int) -> gnn.GnnModel:
        key = (algo, D, M)
        if key not in self._cache:
            self._cache[key] = self._resolve(algo, D, M)
        return self._cache[key]

    def _resolve(self, algo: str, D: int, M: int) -> gnn.GnnModel:
        cell = cell_key(D, M)
        path = self.plan.models.get(algo, {}).get(cell)
        if path is not None:
            path = self.plan.base_dir / path
            if not path.exists():
                raise PlanError(f"cell {cell}: {algo} model {path} not found")
            try:
                return gnn.load_model(path)
            except McraError as exc:
                raise PlanError(f"cell {cell}: cannot load {algo} model: {exc}") from exc
        if not self.plan.train:
            raise PlanError(f"cell {cell}: no {algo} model listed and no 'train' section to fit one")
        t = self.plan.train
        tc = self.plan.train_config(LEARNED[algo])
        tr = generate_dataset(self.plan.network_config(D, M, int(t.get("seed", 2000))), int(t.get("size", 2000)))
        va = generate_dataset(self.plan.network_config(D, M, int(t.get("val_seed", 3000))), int(t.get("val_size", 200)))
        log.info("training %s for cell %s (%d samples, %d epochs)", algo, cell, len(tr), tc.epochs)
        model, trainlog = train(tr, va, None, tc)
        if self.save_dir is not None:
            self.save_dir.mkdir(parents=True, exist_ok=True)
            gnn.save_model(model, self.save_dir / f"{algo}_{cell}.json")
            trainlog.to_csv(self.save_dir / f"{algo}_{cell}_log.csv")
        return model


def load_test_set(plan: ExperimentPlan, D: int, M: int) -> Dataset:
    cell = cell_key(D, M)
    path = plan.datasets.get(cell)
    if path is None:
        return generate_dataset(plan.network_config(D, M, plan.test_seed), plan.test_size)
    path = plan.base_dir / path
    try:
        data = read_dataset(path)
    except OSError as exc:
        raise PlanError(f"cell {cell}: cannot read test set {path} ({exc.strerror or exc})") from exc
    except McraError as exc:
        raise PlanError(f"cell {cell}: bad test set {path}: {exc}") from exc
    if (data.config.D, data.config.M) != (D, M):
        raise PlanError(f"cell {cell}: test set {path} has D={data.config.D}, M={data.config.M}")
    return data


def run_algorithm(algo: str, data: Dataset, model: gnn.GnnModel | None = None,
                  grid_levels: int = 21) -> tuple[np.ndarray, float]:
    """Allocations ``(N, D, M)`` for a whole dataset and the elapsed wall time."""
    config = data.config
    start = time.perf_counter()
    if algo == "ewmmse":
        P, _, _ = solve_batch(data.gains, config)
    elif algo == "heuristic":
        P = heuristic_powers(data.gains, config.p_max)
    elif algo == "equal":
        P = np.stack([equal_split_allocate(inst, config).P for inst in data.samples]) if len(data) \
            else np.zeros((0, config.D, config.M))
    elif algo == "bruteforce":
        P = np.stack([grid_search_allocate(inst, config, grid_levels).P for inst in data.samples])
    elif algo in LEARNED:
        if model is None:
            raise PlanError(f"{algo} needs a trained model")
        P = allocate(model, gnn.predict(model, data.gains, config.p_max), config.p_max, LEARNED[algo])
    else:
        raise PlanError(f"unknown algorithm {algo!r}")
    return P, time.perf_counter() - start


SUMRATE_COLUMNS = ("algorithm", "D", "M", "mean_sum_rate", "std_sum_rate", "time_per_instance_s", "violations")


def run_sumrate_experiment(plan: ExperimentPlan, store: ModelStore | None = None,
                           write: bool = True) -> Table:
    """One row per (algorithm, cell), all algorithms on the same test instances.

    Per-instance detail goes to ``<output_dir>/instances/<algo>_<D>x<M>.csv``.
    """
    store = store or ModelStore(plan, plan.output_dir / "models" if write else None)
    table = Table("sumrate", "Sum rate by algorithm and cell", SUMRATE_COLUMNS,
                  volatile=("time_per_instance_s",), key_columns=("algorithm", "D", "M"))
    for D, M in plan.cells:
        data = load_test_set(plan, D, M)
        cell = cell_key(D, M)
        table.notes.append(f"- cell {cell}: {len(data)} test instances, sha256 {data.digest()}")
        for algo in plan.algorithms:
            model = store.get(algo, D, M) if algo in LEARNED else None
            try:
                P, elapsed = run_algorithm(algo, data, model, plan.grid_levels)
            except McraError as exc:
                raise type(exc)(f"cell {cell}, {algo}: {exc}") from exc
            report = summarize(data.gains, P, data.config, elapsed)
            if report.violations:
                log.warning("cell %s: %s produced %d infeasible allocations", cell, algo, report.violations)
            if write:
                (plan.output_dir / "instances").mkdir(parents=True, exist_ok=True)
                report.to_csv(plan.output_dir / "instances" / f"{algo}_{cell}.csv")
            table.add(algorithm=algo, D=D, M=M, mean_sum_rate=report.mean_sum_rate,
                      std_sum_rate=report.std_sum_rate, time_per_instance_s=report.time_per_instance,
                      violations=report.violations)
    if write:
        table.to_csv(plan.output_dir)
    return table


GENERALIZATION_COLUMNS = ("anchor", "D", "M", "transferred_sum_rate", "native_sum_rate", "percent", "warning")


def run_generalization(base_model: gnn.GnnModel, cells, plan: ExperimentPlan,
                       store: ModelStore | None = None, anchor: tuple[int, int] | None = None) -> Table:
    """Sum rate of ``base_model`` on each target cell relative to a natively trained model, in percent."""
    store = store or ModelStore(plan)
    anchor = anchor or tuple(base_model.metadata.get("dataset", {}).get(k, 0) for k in ("D", "M"))
    table = Table("generalization", "Generalization to other cells", GENERALIZATION_COLUMNS)
    for D, M in (_cell(c) for c in cells):
        data = load_test_set(plan, D, M)
        native = base_model if (D, M) == tuple(anchor) else store.get("gnn", D, M)
        moved = _mean_rate(base_model, data)
        own = moved if native is base_model else _mean_rate(native, data)
        pct = 100.0 * moved / own
        warn = pct > GENERALIZATION_WARN
        if warn:
            log.warning("cell %s: transferred model reaches %.1f%% of native; native model may be under-trained",
                        cell_key(D, M), pct)
        table.add(anchor=cell_key(*anchor), D=D, M=M, transferred_sum_rate=moved, native_sum_rate=own,
                  percent=pct, warning="under-trained native" if warn else "")
    return table


def _mean_rate(model: gnn.GnnModel, data: Dataset) -> float:
    P, elapsed = run_algorithm("gnn", data, model)
    return summarize(data.gains, P, data.config, elapsed).mean_sum_rate


TIMING_COLUMNS = ("algorithm", "D", "M", "instances", "reps", "median_s", "iqr_s", "batch_amortized_s")


def _time_one(algo: str, data: Dataset, k: int, model, grid_levels: int) -> float:
    inst, config = data[k], data.config
    start = time.perf_counter()
    if algo == "ewmmse":
        solve(inst, config)
    elif algo in LEARNED:
        allocate(model, gnn.predict(model, inst.gains, config.p_max), config.p_max, LEARNED[algo])
    elif algo == "heuristic":
        heuristic_powers(inst.gains, config.p_max)
    elif algo == "equal":
        equal_split_allocate(inst, config)
    elif algo == "bruteforce":
        grid_search_allocate(inst, config, grid_levels)
    return time.perf_counter() - start


def run_timing(plan: ExperimentPlan, reps: int | None = None, store: ModelStore | None = None,
               cells=None, instances: int | None = None) -> Table:
    """Per-instance wall time (median and IQR over instances x repetitions), one BLAS thread.

    Learned models also get a batch-amortized time: one call over all instances divided by their count.
    """
    timing = plan.timing or {}
    reps = int(reps or timing.get("reps", 3))
    n = int(instances or timing.get("instances", 20))
    cells = [_cell(c) for c in (cells or timing.get("cells") or plan.cells)]
    if reps < 1 or n < 1:
        raise PlanError("timing needs at least one repetition and one instance")
    store = store or ModelStore(plan)
    table = Table("timing", "Wall time per instance", TIMING_COLUMNS,
                  volatile=("median_s", "iqr_s", "batch_amortized_s"),
                  key_columns=("algorithm", "D", "M", "instances", "reps"))
    with threadpool_limits(limits=1):
        for D, M in cells:
            data = generate_dataset(plan.network_config(D, M, plan.test_seed), n)
            for algo in plan.algorithms:
                model = store.get(algo, D, M) if algo in LEARNED else None
                # warm-up so one-off allocation costs stay out of the first sample
                _time_one(algo, data, 0, model, plan.grid_levels)
                times = np.array([_time_one(algo, data, k, model, plan.grid_levels)
                                  for _ in range(reps) for k in range(n)])
                amortized = float("nan")
                if algo in LEARNED:
                    _, elapsed = run_algorithm(algo, data, model)
                    amortized = elapsed / n
                q1, med, q3 = np.percentile(times, [25, 50, 75])
                table.add(algorithm=algo, D=D, M=M, instances=n, reps=reps, median_s=float(med),
                          iqr_s=float(q3 - q1), batch_amortized_s=amortized)
    return table


def emit_report(tables: list[Table], path: str | os.PathLike) -> None:
    """Markdown report plus one CSV per table in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = ["# Experiment report", ""]
    for t in tables:
        t.to_csv(path.parent)
        parts.append(t.to_markdown())
    path.write_text("\n".join(parts))


def run_plan(plan: ExperimentPlan, reps: int | None = None) -> list[Table]:
    """Everything a plan asks for; writes CSVs and ``report.md`` under the output directory."""
    store = ModelStore(plan, plan.output_dir / "models")
    tables = [run_sumrate_experiment(plan, store)]
    gen = plan.generalization
    if gen:
        anchor = _cell(gen.get("anchor", plan.cells[0]))
        tables.append(run_generalization(store.get("gnn", *anchor), gen.get("targets", []), plan, store, anchor))
    if plan.timing or reps:
        tables.append(run_timing(plan, reps, store))
    emit_report(tables, plan.output_dir / "report.md")
    return tables


def read_table_csv(path: str | os.PathLike) -> Table:
    """Load a CSV written by ``Table.to_csv`` back for re-reporting."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlanError(f"{path}: empty table")
    return Table(path.stem, path.stem, tuple(rows[0]), [tuple(r) for r in rows[1:]])
