"""Run directories, evaluation and ablation grids."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics, plotting
from .backbone import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict
from .data import load_corpus
from .trainer import Models, fit, predict_volume

log = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
METRICS_NAME = "metrics.json"
CKPT_NAME = "checkpoint.sckp"


def _open_corpus(cfg: RunConfig):
    manifest, cases = load_corpus(cfg.data_dir)
    if cfg.dataset_seed is not None and manifest.dataset_seed != cfg.dataset_seed:
        raise ConfigError("dataset_seed", f"corpus was generated with seed {manifest.dataset_seed}")
    return manifest, cases


def evaluate(net, manifest, cases, window: int | None = None) -> tuple[list[dict], dict]:
    """Per-case rows for test, labeled and unlabeled phantoms, plus a summary document."""
    rows = []
    for e in manifest.entries:
        vol, gt = cases[e["id"]]
        pred = predict_volume(net, vol, window)
        rows.append(metrics.report_row(e["id"], e["role"], pred, gt))
    test = [r for r in rows if r["role"] == "test"]
    l_dice, u_dice, gap = metrics.gap_report((r["role"], r["dice"]) for r in rows)
    summary = {
        "units": "voxel",
        "test": metrics.summarize(test),
        "test_cases": [{k: r[k] for k in metrics.CSV_FIELDS} for r in test],
        "train_gap": {"l_dice": l_dice, "u_dice": u_dice, "gap": gap},
    }
    return rows, summary


def _json_dump(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def run_train(cfg: RunConfig, figures: bool = True) -> dict:
    """Train per ``cfg`` into ``cfg.out_dir``; returns the metrics summary."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    manifest, cases = _open_corpus(cfg)
    labeled, unlabeled = manifest.ids("labeled"), manifest.ids("unlabeled")
    if not labeled or not unlabeled:
        raise ConfigError("data_dir", "corpus needs labeled and unlabeled phantoms")

    torch.set_num_threads(1)
    records = []
    with open(out / LOG_NAME, "w") as fh:
        def on_step(report):
            d = report.to_dict()
            records.append(d)
            fh.write(json.dumps(d, sort_keys=True) + "\n")

        models = fit(cfg.train_config(), cases, labeled, unlabeled, on_step)

    save_checkpoint(out / CKPT_NAME, models.state())
    net = models.student if cfg.eval_model == "student" else models.teacher.net
    rows, summary = evaluate(net, manifest, cases, cfg.window)
    summary["steps"] = cfg.steps
    (out / METRICS_NAME).write_text(_json_dump(summary))
    (out / "metrics.csv").write_text(metrics.cases_to_csv(rows))
    if figures:
        plotting.loss_curves(records, out / "loss_curves.png")
    return summary


def run_eval(run_dir: str | Path, data_dir: str | None = None, model: str | None = None) -> dict:
    run_dir = Path(run_dir)
    cfg = from_dict(json.loads((run_dir / "config.json").read_text()))
    if data_dir is not None:
        cfg = cfg.replace(data_dir=data_dir)
    models = Models(cfg.train_config())
    models.load_state(load_checkpoint(run_dir / CKPT_NAME))
    manifest, cases = _open_corpus(cfg)
    which = model or cfg.eval_model
    net = models.student if which == "student" else models.teacher.net
    rows, summary = evaluate(net, manifest, cases, cfg.window)
    summary["model"] = which
    (run_dir / "eval_metrics.json").write_text(_json_dump(summary))
    (run_dir / "eval_metrics.csv").write_text(metrics.cases_to_csv(rows))
    return summary


# --- ablation grids ---------------------------------------------------------

class GridError(ValueError):
    pass


PRESETS = {
    "components": [
        ("MT", dict(use_pl=False, use_ssd=False, use_pcc=False, use_ckaf=False)),
        ("MT+PL", dict(use_pl=True, use_ssd=False, use_pcc=False, use_ckaf=False)),
        ("MT+PL+SSD", dict(use_pl=True, use_ssd=True, use_pcc=False, use_ckaf=False)),
        ("MT+PL+SSD+PCC", dict(use_pl=True, use_ssd=True, use_pcc=True, use_ckaf=False)),
        ("MT+PL+CKaF", dict(use_pl=True, use_ssd=False, use_pcc=False, use_ckaf=True)),
        ("SCKAN", dict(use_pl=True, use_ssd=True, use_pcc=True, use_ckaf=True)),
    ],
    "fusion": [(s, dict(fusion_strategy=s)) for s in ("average", "mlp", "kan")],
    "lambda_div": [(f"lambda_div={v}", dict(lambda_div=v)) for v in (0.0, 0.25, 0.5, 0.75, 1.0)],
}


def preset_grid(name: str, base: dict, seeds: Sequence[int]) -> dict:
    if name not in PRESETS:
        raise GridError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return {"name": name, "base": base, "seeds": list(seeds),
            "cells": [{"name": n, "set": s} for n, s in PRESETS[name]]}


def validate_grid(grid: dict) -> list[tuple[str, int, RunConfig]]:
    """Expand a grid document into (cell, seed, config) jobs; raises on any schema error."""
    if not isinstance(grid, dict):
        raise GridError("grid must be a JSON object")
    unknown = set(grid) - {"name", "base", "seeds", "cells", "sweep"}
    if unknown:
        raise GridError(f"unknown grid key {sorted(unknown)[0]!r}")
    cells = list(grid.get("cells") or [])
    if "sweep" in grid:
        sw = grid["sweep"]
        if not isinstance(sw, dict) or set(sw) != {"key", "values"}:
            raise GridError("sweep must be {'key': ..., 'values': [...]}")
        cells += [{"name": f"{sw['key']}={v}", "set": {sw["key"]: v}} for v in sw["values"]]
    seeds = grid.get("seeds") or [0]
    if not cells:
        raise GridError("grid has no cells")
    base = dict(grid.get("base") or {})
    names = [c.get("name") for c in cells]
    if len(set(names)) != len(names) or not all(isinstance(n, str) and n for n in names):
        raise GridError("cell names must be unique non-empty strings")
    jobs = []
    out_root = Path(base.pop("out_dir", "runs/ablate"))
    for cell in cells:
        for seed in seeds:
            doc = {**base, **cell.get("set", {}), "seed": seed,
                   "out_dir": str(out_root / _slug(cell["name"]) / f"seed{seed}")}
            try:
                jobs.append((cell["name"], seed, from_dict(doc)))
            except ConfigError as exc:
                raise GridError(f"cell {cell['name']!r}: {exc}") from None
    return jobs


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in name)


def config_key(cfg: RunConfig) -> str:
    """Hash of everything that affects a run's outputs (the output directory does not)."""
    doc = dataclasses.asdict(cfg)
    doc.pop("out_dir")
    doc["data_dir"] = str(Path(doc["data_dir"]).resolve())
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _run_job(job, cache_dir=None):
    name, seed, cfg = job
    cached = Path(cache_dir) / config_key(cfg) if cache_dir is not None else None
    try:
        if cached is not None and (cached / METRICS_NAME).exists():
            shutil.copytree(cached, cfg.out_dir, dirs_exist_ok=True)
            (Path(cfg.out_dir) / "config.json").write_text(cfg.to_json())
            return name, seed, json.loads((cached / METRICS_NAME).read_text()), None
        summary = run_train(cfg, figures=False)
        if cached is not None:
            shutil.copytree(cfg.out_dir, cached, dirs_exist_ok=True)
        return name, seed, summary, None
    except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the grid continues
        log.exception("cell %s seed %s failed", name, seed)
        return name, seed, None, f"{type(exc).__name__}: {exc}"


def _threads() -> int:
    """Grid worker count: all cores unless SCKAN_THREADS caps it. Each run itself is single-threaded."""
    cores = os.cpu_count() or 1
    try:
        return max(1, min(cores, int(os.environ.get("SCKAN_THREADS", cores))))
    except ValueError:
        return 1


REPORT_FIELDS = (
    "cell", "runs", "failed",
    "dice_mean", "dice_std", "jaccard_mean", "jaccard_std", "hd95_mean", "hd95_std", "asd_mean", "asd_std",
    "l_dice_mean", "l_dice_std", "u_dice_mean", "u_dice_std", "gap_mean", "gap_std",
)


def aggregate(results: Sequence[tuple], cell_order: Sequence[str]) -> list[dict]:
    """One row per cell: mean and std across seeds of each run's mean test metric and gap."""
    rows = []
    for cell in cell_order:
        runs = [r for r in results if r[0] == cell]
        ok = [r[2] for r in runs if r[2] is not None]
        row = {"cell": cell, "runs": len(ok), "failed": len(runs) - len(ok),
               "errors": [r[3] for r in runs if r[3]]}
        per_metric = {
            "dice": [s["test"]["dice"]["mean"] for s in ok],
            "jaccard": [s["test"]["jaccard"]["mean"] for s in ok],
            "hd95": [s["test"]["hd95"]["mean"] for s in ok],
            "asd": [s["test"]["asd"]["mean"] for s in ok],
            "l_dice": [s["train_gap"]["l_dice"] for s in ok],
            "u_dice": [s["train_gap"]["u_dice"] for s in ok],
            "gap": [s["train_gap"]["gap"] for s in ok],
        }
        for key, vals in per_metric.items():
            ms = metrics.mean_std(vals)
            row[f"{key}_mean"], row[f"{key}_std"] = ms["mean"], ms["std"]
        row["seed_dice"] = per_metric["dice"]
        rows.append(row)
    return rows


def _fmt(x, nd=4):
    return "" if x is None else f"{x:.{nd}f}"


def render_markdown(rows: Sequence[dict], title: str) -> str:
    lines = [f"# {title}", "",
             "| cell | runs | Dice | Jaccard | HD95 | ASD | L-Dice | U-Dice | L-U gap |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        pm = lambda k: f"{_fmt(r[k + '_mean'])} ± {_fmt(r[k + '_std'])}" if r[k + "_mean"] is not None else "n/a"  # noqa: E731
        lines.append(f"| {r['cell']} | {r['runs']}/{r['runs'] + r['failed']} | {pm('dice')} | {pm('jaccard')} | "
                     f"{pm('hd95')} | {pm('asd')} | {pm('l_dice')} | {pm('u_dice')} | {pm('gap')} |")
    lines += ["", "Surface distances in voxel units; mean ± std across seeds."]
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[dict]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_FIELDS})
    return buf.getvalue()


def run_grid(grid: dict, out_dir: str | Path | None = None, cache_dir: str | Path | None = None) -> list[dict]:
    """Run every (cell, seed) job and write CSV, markdown, JSON and figure reports.

    With ``cache_dir``, runs whose configuration matches an earlier cached run are copied, not retrained;
    training is deterministic, so the copy is what a rerun would produce.
    """
    grid = dict(grid)
    if out_dir is not None:
        grid["base"] = {**(grid.get("base") or {}), "out_dir": str(out_dir)}
    jobs = validate_grid(grid)
    out_root = Path((grid.get("base") or {}).get("out_dir", "runs/ablate"))
    out_root.mkdir(parents=True, exist_ok=True)
    cell_order = list(dict.fromkeys(j[0] for j in jobs))

    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs, [cache_dir] * len(jobs)))
    else:
        results = [_run_job(j, cache_dir) for j in jobs]

    rows = aggregate(results, cell_order)
    title = f"Ablation: {grid.get('name', 'grid')}"
    (out_root / "ablation.csv").write_text(render_csv(rows))
    (out_root / "ablation.md").write_text(render_markdown(rows, title))
    (out_root / "ablation.json").write_text(_json_dump({"name": grid.get("name"), "cells": rows}))
    plotting.cell_bars(rows, out_root / "ablation_dice.png")
    plotting.gap_bars(rows, out_root / "ablation_gap.png")
    sweep = grid.get("sweep")
    if sweep is None and grid.get("name") == "lambda_div":
        sweep = {"key": "lambda_div", "values": [c["set"]["lambda_div"] for c in grid["cells"]]}
    if sweep is not None and all(isinstance(v, (int, float)) for v in sweep["values"]):
        plotting.sweep_line(sweep["values"], rows, out_root / "sweep_dice.png", sweep["key"])
    return rows
