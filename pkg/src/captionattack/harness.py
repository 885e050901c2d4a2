"""Experiment orchestration: datasets, attack runs, sweeps, transfer.

Reports are JSON Lines: one record per attacked image followed by a single
aggregate record, all keys sorted so identical runs produce identical
bytes (wall-time fields are informational and excluded from determinism
comparisons). Adversarial images are persisted as PNG next to the report;
PNG is lossless, which is what makes transfer evaluation against a foreign
endpoint reproduce the source numbers when pointed back at the source.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pngio
from .attention import CandidateRegion, aggregate_sentence, aggregate_word, select_region, upsample
from .errors import AttackToolkitError, BudgetError, ConfigError, DataError, OracleIOError
from .metrics import METRIC_NAMES, score_all, tokenize
from .optimizer import (
    AttackOutcome,
    DEConfig,
    GradConfig,
    PSOConfig,
    run_baseline,
    run_de,
    run_gradient_attack,
    run_pso,
)
from .oracle import CaptionOracle, open_endpoint
from .raster import perturbation_norms

log = logging.getLogger(__name__)

METHODS = ("aicattack", "wordbased", "npixel", "onepixel", "pso", "fgsm", "pgd")

_ATTENTION_METHODS = ("aicattack", "wordbased", "pso", "fgsm", "pgd")

SWEEP_AXES = ("pixels", "iterations", "k", "strength", "lambda")


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    image_path: str
    references: tuple[tuple[str, ...], ...]


@dataclass
class ExperimentConfig:
    method: str = "aicattack"
    k: float = 0.5
    de: DEConfig = field(default_factory=DEConfig)
    pso: PSOConfig = field(default_factory=PSOConfig)
    grad: GradConfig = field(default_factory=GradConfig)
    oracle_spec: str = "toy"
    samples: int = 0
    seed: int = 0
    out_path: str = "report.jsonl"
    annotations: str = ""
    images_dir: str = ""
    call_budget: int | None = None
    save_images: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if not 0 < self.k <= 1:
            raise ConfigError("k must be a fraction in (0, 1]")
        if self.samples < 0:
            raise ConfigError("samples must be >= 0")
        self.de.validate()
        self.pso.validate()
        self.grad.validate()


@dataclass
class AttackReport:
    records: list[dict]
    aggregate: dict

    def to_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.write(json.dumps(self.aggregate, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "AttackReport":
        records = []
        aggregate = None
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    if obj.get("record") == "entry":
                        records.append(obj)
                    elif obj.get("record") == "aggregate":
                        aggregate = obj
        except FileNotFoundError as exc:
            raise DataError(f"report not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"unparseable report {path}: {exc}") from exc
        if aggregate is None:
            aggregate = {"record": "aggregate", "entries": len(records), "partial": True}
        return cls(records=records, aggregate=aggregate)

    def mean_deltas(self) -> dict[str, float]:
        return _mean_deltas(self.records)


def _mean_deltas(records: list[dict]) -> dict[str, float]:
    if not records:
        return {name: 0.0 for name in METRIC_NAMES}
    out = {}
    for name in METRIC_NAMES:
        out[name] = sum(rec["delta"][name] for rec in records) / len(records)
    return out


def load_dataset(annotations, images_dir) -> list[DatasetEntry]:
    """Load (image, references) pairs from COCO-caption JSON or two-column
    CSV (``image_path,caption``, one row per caption).

    Entries whose image file is missing are skipped with a logged warning;
    an annotation file that cannot be parsed at all is fatal.
    """
    annotations = Path(annotations)
    images_dir = Path(images_dir)
    if not annotations.exists():
        raise DataError(f"annotation file not found: {annotations}")
    if annotations.suffix.lower() == ".json":
        pairs = _load_coco(annotations, images_dir)
    else:
        pairs = _load_csv(annotations, images_dir)
    entries = []
    for image_id, path, captions in pairs:
        if not Path(path).exists():
            log.warning("skipping %s: image file %s missing", image_id, path)
            continue
        refs = tuple(tokenize(c) for c in captions)
        refs = tuple(r for r in refs if r)
        if not refs:
            log.warning("skipping %s: no usable reference captions", image_id)
            continue
        entries.append(DatasetEntry(image_id=image_id, image_path=str(path), references=refs))
    return entries


def _load_coco(annotations: Path, images_dir: Path):
    try:
        data = json.loads(annotations.read_text(encoding="utf-8"))
        images = {int(img["id"]): img["file_name"] for img in data["images"]}
        captions: dict[int, list[str]] = {}
        for ann in data["annotations"]:
            captions.setdefault(int(ann["image_id"]), []).append(str(ann["caption"]))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"not COCO-caption JSON: {annotations} ({exc})") from exc
    out = []
    for image_id in sorted(images):
        out.append((str(image_id), images_dir / images[image_id], captions.get(image_id, [])))
    return out


def _load_csv(annotations: Path, images_dir: Path):
    by_path: dict[str, list[str]] = {}
    try:
        with open(annotations, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip().lower() for h in header[:2]] != ["image_path", "caption"]:
                raise DataError(
                    f"{annotations}: expected CSV header 'image_path,caption'"
                )
            for row in reader:
                if not row:
                    continue
                if len(row) < 2:
                    raise DataError(f"{annotations}: row {row!r} needs two columns")
                by_path.setdefault(row[0].strip(), []).append(row[1])
    except csv.Error as exc:
        raise DataError(f"unparseable CSV {annotations}: {exc}") from exc
    out = []
    for rel in sorted(by_path):
        path = Path(rel)
        if not path.is_absolute():
            path = images_dir / rel
        out.append((rel, path, by_path[rel]))
    return out


def entry_seed(run_seed: int, image_id: str) -> int:
    """Stable per-entry RNG seed derived from the run seed and image id."""
    digest = hashlib.sha256(f"{run_seed}:{image_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _sample_entries(entries: list[DatasetEntry], samples: int, seed: int):
    if samples > len(entries):
        raise ConfigError(
            f"sample count {samples} exceeds dataset size {len(entries)}"
        )
    ordered = sorted(entries, key=lambda e: e.image_id)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ordered), size=samples, replace=False)
    return sorted((ordered[int(i)] for i in chosen), key=lambda e: e.image_id)


def _safe_filename(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id)


def _images_dir_for(out_path) -> Path:
    out_path = Path(out_path)
    return out_path.parent / (out_path.stem + "_images")


def build_region(cfg: ExperimentConfig, image, clean_result) -> tuple[CandidateRegion, list[str]]:
    """Candidate region for the configured method, with fallback warnings."""
    warnings: list[str] = []
    if cfg.method in ("npixel", "onepixel"):
        return CandidateRegion.uniform(image.width, image.height), warnings
    if clean_result.attention is None:
        warnings.append("attention unavailable; fell back to whole-image region")
        return CandidateRegion.uniform(image.width, image.height), warnings
    stack = upsample(clean_result.attention, image.width, image.height)
    if cfg.method == "wordbased":
        return aggregate_word(stack, cfg.k), warnings
    return select_region(aggregate_sentence(stack), cfg.k), warnings


def _attack_entry(cfg: ExperimentConfig, entry: DatasetEntry, endpoint: CaptionOracle) -> dict:
    started = time.perf_counter()
    image = pngio.load_png(entry.image_path)
    refs = entry.references
    label_free = False
    seed = entry_seed(cfg.seed, entry.image_id)

    caps = endpoint.capabilities()
    want_attention = cfg.method in _ATTENTION_METHODS and caps.attention
    clean_result = endpoint.caption(image, want_attention=want_attention)
    if not refs:
        refs = (clean_result.tokens,)
        label_free = True
    region, warnings = build_region(cfg, image, clean_result)

    de_cfg = replace(cfg.de, seed=seed, pixels=min(cfg.de.pixels, len(region)))
    if de_cfg.pixels != cfg.de.pixels:
        warnings.append(
            f"pixel budget reduced to region size {de_cfg.pixels}"
        )
    outcome: AttackOutcome
    if cfg.method in ("aicattack", "wordbased"):
        outcome = run_de(image, refs, region, de_cfg, endpoint, clean_result)
    elif cfg.method in ("npixel", "onepixel"):
        outcome = run_baseline(image, refs, cfg.method, de_cfg, endpoint, clean_result)
    elif cfg.method == "pso":
        outcome = run_pso(image, refs, region, cfg.pso, endpoint,
                          m=de_cfg.pixels, seed=seed, metric=de_cfg.fitness,
                          clean_result=clean_result)
    else:
        outcome = run_gradient_attack(image, refs, region, cfg.grad, cfg.method,
                                      endpoint, metric=de_cfg.fitness,
                                      clean_result=clean_result)

    adv_path = ""
    if cfg.save_images:
        img_dir = _images_dir_for(cfg.out_path)
        img_dir.mkdir(parents=True, exist_ok=True)
        filename = _safe_filename(entry.image_id) + ".png"
        pngio.save_png(outcome.adversarial, img_dir / filename)
        # relative to the report so reports are relocatable and byte-stable
        adv_path = f"{img_dir.name}/{filename}"

    linf, l2, count = perturbation_norms(outcome.perturbation)
    delta = {
        name: outcome.metrics_before[name] - outcome.metrics_after[name]
        for name in METRIC_NAMES
    }
    return {
        "record": "entry",
        "image_id": entry.image_id,
        "image_path": entry.image_path,
        "adv_image_path": adv_path,
        "method": cfg.method,
        "fitness_metric": cfg.de.fitness,
        "clean_fitness": outcome.clean_fitness,
        "adv_fitness": outcome.adv_fitness,
        "clean": outcome.metrics_before,
        "adv": outcome.metrics_after,
        "delta": delta,
        "clean_tokens": list(outcome.clean_tokens),
        "adv_tokens": list(outcome.adv_tokens),
        "references": [list(r) for r in refs],
        "perturbation": {"linf": linf, "l2": l2, "count": count},
        "region_size": len(region),
        "oracle_calls": outcome.oracle_calls + 1,
        "generations": outcome.generations_run,
        "trace": list(outcome.trace),
        "label_free": label_free,
        "truncated": outcome.truncated,
        "warnings": warnings,
        "seed": seed,
        "wall_time_s": time.perf_counter() - started,
    }


def _worker_count() -> int:
    raw = os.environ.get("ATTACK_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _aggregate_record(cfg: ExperimentConfig, records: list[dict],
                      wall: float, partial: bool = False) -> dict:
    agg = {
        "record": "aggregate",
        "method": cfg.method,
        "entries": len(records),
        "mean_delta": _mean_deltas(records),
        "annotations": str(cfg.annotations),
        "images_dir": str(cfg.images_dir),
        "oracle": cfg.oracle_spec,
        "seed": cfg.seed,
        "samples": cfg.samples,
        "k": cfg.k,
        "fitness": cfg.de.fitness,
        "de": asdict(cfg.de),
        "pso": asdict(cfg.pso),
        "grad": asdict(cfg.grad),
        "wall_time_s": wall,
    }
    if partial:
        agg["partial"] = True
    return agg


def run_experiment(cfg: ExperimentConfig, dataset: list[DatasetEntry]) -> AttackReport:
    """Attack a seeded sample of the dataset and write the JSONL report.

    Entries already present in an existing output file are reused, so an
    interrupted run can be resumed by re-running the same command. On an
    oracle outage the partial report is flushed before the error surfaces.
    """
    cfg.validate()
    started = time.perf_counter()
    plan = _sample_entries(dataset, cfg.samples, cfg.seed)

    done: dict[str, dict] = {}
    out_path = Path(cfg.out_path)
    if out_path.exists():
        previous = AttackReport.from_jsonl(out_path)
        planned_ids = {e.image_id for e in plan}
        done = {
            rec["image_id"]: rec
            for rec in previous.records
            if rec.get("image_id") in planned_ids and rec.get("method") == cfg.method
        }
        if done:
            log.info("resuming: %d of %d entries already in %s",
                     len(done), len(plan), out_path)

    todo = [e for e in plan if e.image_id not in done]
    records_by_id = dict(done)
    failure: AttackToolkitError | None = None
    with open_endpoint(cfg.oracle_spec, call_budget=cfg.call_budget) as endpoint:
        workers = _worker_count()
        try:
            if workers == 1:
                for entry in todo:
                    records_by_id[entry.image_id] = _attack_entry(cfg, entry, endpoint)
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    futures = {
                        pool.submit(_attack_entry, cfg, entry, endpoint): entry
                        for entry in todo
                    }
                    for future, entry in futures.items():
                        records_by_id[entry.image_id] = future.result()
        except (OracleIOError, BudgetError) as exc:
            failure = exc

    records = [records_by_id[e.image_id] for e in plan if e.image_id in records_by_id]
    report = AttackReport(
        records=records,
        aggregate=_aggregate_record(cfg, records, time.perf_counter() - started,
                                    partial=failure is not None),
    )
    report.to_jsonl(cfg.out_path)
    if failure is not None:
        raise failure
    return report


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir) -> list[AttackReport]:
    """One experiment per axis value under a shared seed, plus a CSV of
    (value, mean fitness-metric delta) for plotting."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg.annotations, cfg.images_dir)
    reports = []
    rows = []
    for value in values:
        run_cfg = _apply_axis(cfg, axis, value)
        run_cfg.out_path = str(out_dir / f"{axis}_{_value_tag(value)}.jsonl")
        report = run_experiment(run_cfg, dataset)
        reports.append(report)
        rows.append((value, report.mean_deltas()[cfg.de.fitness]))
    csv_path = out_dir / f"sweep_{axis}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, f"mean_{cfg.de.fitness}_delta"])
        writer.writerows(rows)
    return reports


def _value_tag(value) -> str:
    return str(value).replace(".", "p")


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    run_cfg = replace(cfg, de=replace(cfg.de), pso=replace(cfg.pso), grad=replace(cfg.grad))
    if axis == "pixels":
        run_cfg.de.pixels = int(value)
    elif axis == "iterations":
        run_cfg.de.generations = int(value)
        run_cfg.pso.iterations = int(value)
        run_cfg.grad.iterations = max(1, int(value))
    elif axis == "k":
        run_cfg.k = float(value)
    elif axis == "strength":
        run_cfg.de.strength = int(value)
        if run_cfg.de.delta_levels is not None:
            run_cfg.de.delta_levels = tuple(
                v for v in run_cfg.de.delta_levels if abs(v) <= int(value)
            )
    elif axis == "lambda":
        run_cfg.de.weight = float(value)
    return run_cfg


def evaluate_transfer(report_path, endpoint_specs, out_prefix=None) -> list[AttackReport]:
    """Re-caption a run's persisted adversarial images on foreign endpoints.

    Each endpoint gets its own report: per entry, the clean image and the
    stored adversarial image are captioned (two oracle calls) and scored
    against the original references, so deltas are relative to that
    endpoint's own clean captions.
    """
    source = AttackReport.from_jsonl(report_path)
    if not source.records:
        raise DataError(f"no entry records in {report_path}")
    report_dir = Path(report_path).parent
    prefix = Path(out_prefix) if out_prefix else Path(report_path).with_suffix("")
    reports = []
    for i, spec in enumerate(endpoint_specs):
        started = time.perf_counter()
        records = []
        with open_endpoint(spec) as endpoint:
            if not endpoint.capabilities().caption:
                raise ConfigError(f"transfer endpoint {spec!r} cannot caption")
            for rec in source.records:
                if not rec.get("adv_image_path"):
                    raise DataError(
                        f"entry {rec.get('image_id')} has no persisted adversarial "
                        "image; rerun the attack with image saving enabled"
                    )
                t0 = time.perf_counter()
                clean_img = pngio.load_png(rec["image_path"])
                adv_file = Path(rec["adv_image_path"])
                if not adv_file.is_absolute():
                    adv_file = report_dir / adv_file
                adv_img = pngio.load_png(adv_file)
                refs = [tuple(r) for r in rec["references"]]
                clean_tokens = endpoint.caption(clean_img).tokens
                adv_tokens = endpoint.caption(adv_img).tokens
                before = score_all(clean_tokens, refs)
                after = score_all(adv_tokens, refs)
                records.append({
                    "record": "entry",
                    "image_id": rec["image_id"],
                    "image_path": rec["image_path"],
                    "adv_image_path": rec["adv_image_path"],
                    "method": rec["method"],
                    "transfer_oracle": spec,
                    "clean": before,
                    "adv": after,
                    "delta": {n: before[n] - after[n] for n in METRIC_NAMES},
                    "clean_tokens": list(clean_tokens),
                    "adv_tokens": list(adv_tokens),
                    "references": rec["references"],
                    "oracle_calls": 2,
                    "wall_time_s": time.perf_counter() - t0,
                })
        report = AttackReport(
            records=records,
            aggregate={
                "record": "aggregate",
                "method": source.records[0]["method"],
                "transfer_oracle": spec,
                "entries": len(records),
                "mean_delta": _mean_deltas(records),
                "source_report": str(report_path),
                "wall_time_s": time.perf_counter() - started,
            },
        )
        report.to_jsonl(f"{prefix}.transfer{i}.jsonl")
        reports.append(report)
    return reports


@dataclass
class Summary:
    """method x metric mean-delta comparison across reports."""

    rows: list[tuple[str, dict[str, float]]]
    flags: dict[str, str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", *METRIC_NAMES])
        for method, deltas in self.rows:
            writer.writerow([method] + [f"{deltas[n]:.6f}" for n in METRIC_NAMES])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table; the best (largest) drop per metric is starred."""
        header = ["method"] + list(METRIC_NAMES)
        lines = []
        body = []
        for method, deltas in self.rows:
            cells = [method]
            for name in METRIC_NAMES:
                mark = "*" if self.flags.get(name) == method else " "
                cells.append(f"{deltas[name]:+.4f}{mark}")
            body.append(cells)
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        for row in [header] + body:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(lines)


def summarize(report_paths) -> Summary:
    """Comparison table across reports that share a dataset and seed."""
    if not report_paths:
        raise ConfigError("summarize needs at least one report")
    reports = [AttackReport.from_jsonl(p) for p in report_paths]
    keys = set()
    for path, report in zip(report_paths, reports):
        agg = report.aggregate
        keys.add((agg.get("annotations"), agg.get("seed"), agg.get("samples")))
    if len(keys) > 1:
        raise DataError(
            f"reports disagree on dataset/seed/samples: {sorted(keys)}"
        )
    rows = []
    for path, report in zip(report_paths, reports):
        method = report.aggregate.get("method", Path(path).stem)
        rows.append((method, report.mean_deltas()))
    flags = {}
    for name in METRIC_NAMES:
        best = max(rows, key=lambda row: row[1][name])
        flags[name] = best[0]
    return Summary(rows=rows, flags=flags)
