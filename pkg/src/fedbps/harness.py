"""Experiment entry points: run, gradcheck and partition preview."""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional, TextIO

import numpy as np

from . import __version__
from .config import FederationConfig, config_from_mapping
from .data import Dataset, label_histograms, load_named, partition_major_minor, synthesize
from .errors import FedBPSError
from .federation import RoundRecord, run_federation
from .nn import Batch, Conv2d, Dense, Flatten, MaxPool2d, NetworkSpec, ReLU, build_network, forward, loss_and_grad, mlp

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
CONFIG_SNAPSHOT = "config.toml"
PREVIEW_FILE = "partition_preview.csv"
CSV_COLUMNS = ("round", "client_id", "train_loss", "test_acc", "global_test_acc", "mask_churn")

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5


def load_datasets(config: FederationConfig) -> tuple[Dataset, Optional[Dataset]]:
    """``(train, test)``; synthetic data returns ``test=None`` (test shards are carved from it)."""
    if config.dataset == "synthetic":
        per_class = config.synth_per_class
        return synthesize(config.synth_classes, per_class, config.synth_shape(),
                          config.synth_separation, config.data_seed), None
    return load_named(config.dataset, config.data_root or None)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _csv_rows(record: RoundRecord):
    for cid, loss, acc, gacc in zip(record.client_ids, record.train_loss, record.test_acc,
                                    record.global_test_acc):
        yield (record.round, cid, repr(float(loss)), repr(float(acc)), repr(float(gacc)),
               repr(float(record.mask_churn)))


def write_manifest(path: Path, config: FederationConfig, extra: Optional[dict] = None) -> None:
    manifest = {
        "config": config.to_dict(),
        "versions": {
            "fedbps": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "metrics_file": METRICS_FILE,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> FederationConfig:
    """Config snapshot stored in a run manifest."""
    data = json.loads(Path(path).read_text())
    return config_from_mapping(data["config"])


def cmd_run(config: FederationConfig, out_dir: Optional[str] = None, stdout: Optional[TextIO] = None) -> int:
    """Run one federation and write manifest, config snapshot and per-round CSV."""
    stdout = stdout or sys.stdout
    out = Path(out_dir or config.output_dir)
    try:
        config.validate()
        out.mkdir(parents=True, exist_ok=True)
        manifest_path = out / MANIFEST_FILE
        write_manifest(manifest_path, config)
        (out / CONFIG_SNAPSHOT).write_text(config.to_toml())
        datasets = load_datasets(config)
        t0 = time.perf_counter()
        with open(out / METRICS_FILE, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            fh.flush()

            def on_round(record: RoundRecord) -> None:
                writer.writerows(_csv_rows(record))
                fh.flush()

            result = run_federation(config, datasets, on_round)
        elapsed = time.perf_counter() - t0
        summary = {
            "rounds_completed": len(result.history),
            "final_mean_test_acc": result.final_accuracy if result.history else None,
            "final_mean_global_test_acc": result.final_global_accuracy if result.history else None,
            "elapsed_seconds": round(elapsed, 3),
        }
        manifest = json.loads(manifest_path.read_text())
        manifest["summary"] = summary
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if result.history:
            print(f"{config.method}: final mean personalized accuracy {result.final_accuracy:.4f} "
                  f"(global model {result.final_global_accuracy:.4f}) after {len(result.history)} rounds",
                  file=stdout)
        else:
            print(f"{config.method}: 0 rounds run", file=stdout)
        return 0
    except (FedBPSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def gradcheck_spec(selector: str) -> tuple[NetworkSpec, tuple[int, ...], int]:
    """Small reference networks: ``(spec, sample shape, batch size)``."""
    if selector == "mlp":
        return mlp([4, 16, 3]), (4,), 8
    if selector == "cnn":
        spec = NetworkSpec((1, 10, 10), (
            Conv2d(1, 3, 3), ReLU(), MaxPool2d(2),
            Conv2d(3, 4, 2), ReLU(), MaxPool2d(3),
            Flatten(), Dense(4, 6), ReLU(), Dense(6, 3),
        ))
        return spec, (1, 10, 10), 4
    raise FedBPSError(f"unknown gradcheck spec {selector!r}; expected 'mlp' or 'cnn'")


def finite_difference_grad(spec: NetworkSpec, params, batch: Batch, h: float = GRADCHECK_STEP) -> np.ndarray:
    """Central differences of the mean batch loss, one element at a time."""
    base = params.flat()
    out = np.empty_like(base)
    for j in range(base.size):
        probe = base.copy()
        probe[j] = base[j] + h
        up, _ = forward(spec, params.unflatten(probe), batch)
        probe[j] = base[j] - h
        down, _ = forward(spec, params.unflatten(probe), batch)
        out[j] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def cmd_gradcheck(selector: str = "mlp", seed: int = 1, corrupt: bool = False,
                  stdout: Optional[TextIO] = None) -> tuple[int, float]:
    """Compare analytic and finite-difference gradients; exit code 1 above tolerance.

    ``corrupt`` perturbs the analytic gradient first (negative control).
    """
    stdout = stdout or sys.stdout
    spec, shape, n = gradcheck_spec(selector)
    rng = np.random.default_rng(seed)
    params = build_network(spec, seed)
    params = params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))  # nonzero biases too
    batch = Batch(rng.standard_normal((n,) + shape), rng.integers(0, spec.num_classes, n))
    _, grads = loss_and_grad(spec, params, batch)
    analytic = grads.flat()
    if corrupt:
        analytic = analytic.copy()
        analytic[0] += 1e-2 * max(1.0, abs(analytic[0]))
    numeric = finite_difference_grad(spec, params, batch)
    err = relative_error(analytic, numeric)
    worst = float(err.max())
    for name, seg in params.segments().items():
        print(f"  {name:<12} {str(params[name].shape):<16} max rel err {err[seg].max():.3e}", file=stdout)
    status = "PASS" if worst < GRADCHECK_TOLERANCE else "FAIL"
    print(f"gradcheck {selector} seed={seed}: {params.size} params, max relative error "
          f"{worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g}) {status}", file=stdout)
    return (0 if status == "PASS" else 1), worst


# ---------------------------------------------------------------------------
# partition preview
# ---------------------------------------------------------------------------

def cmd_partition_preview(config: FederationConfig, out_dir: Optional[str] = None,
                          stdout: Optional[TextIO] = None) -> int:
    """Print per-client label histograms and write them as CSV."""
    stdout = stdout or sys.stdout
    try:
        train, test = load_datasets(config)
        plan = partition_major_minor(
            train, config.n_clients, config.n_major, config.iid_share, config.data_seed,
            test_dataset=test, train_per_client=config.train_per_client,
            test_per_client=config.test_per_client, mode=config.partition_mode,
        )
    except FedBPSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    c = train.num_classes
    test_labels = (test if test is not None else train).labels
    tables = {
        "train": label_histograms(train.labels, plan.train_indices, c),
        "test": label_histograms(test_labels, plan.test_indices, c),
    }
    rows = []
    for split, hist in tables.items():
        print(f"{split} label histogram ({config.partition_mode}, s={config.iid_share}, "
              f"n_major={config.n_major})", file=stdout)
        print("client  majors   " + " ".join(f"{k:>5}" for k in range(c)) + "  total", file=stdout)
        for i, counts in enumerate(hist):
            majors = ",".join(str(m) for m in plan.major_classes[i])
            print(f"{i:>6}  {majors:<8} " + " ".join(f"{v:>5}" for v in counts) + f"  {counts.sum():>5}",
                  file=stdout)
            rows.append([split, i, majors] + [int(v) for v in counts])
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / PREVIEW_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "client_id", "major_classes"] + [f"class_{k}" for k in range(c)])
        writer.writerows(rows)
    return 0
