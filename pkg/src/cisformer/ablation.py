"""Ablation sweeps laid out like the four ablation tables (decoders, init, update, loss weights)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .config import config_from_dict, deep_update
from .model import InstanceSegmenter, count_parameters, load_checkpoint
from .train import build_model, evaluate_model, latest_checkpoint, load_split, train

_SCALE_LABEL = {4: "X4", 3: "X3", 2: "X2", 1: "X1"}


@dataclass
class Variant:
    columns: dict[str, str]
    delta: dict


def _scales_variant(scales: list[int]) -> Variant:
    n = len(scales)
    name = "Single-Scale (1)" if n == 1 else f"Multi-Scale ({n})"
    feats = "{" + ", ".join(_SCALE_LABEL[s] for s in scales) + "}"
    return Variant({"Models": name, "Features": feats}, {"model": {"decoder": {"scales": scales}}})


SWEEPS: dict[str, dict] = {
    "decoder_num": {
        "title": "Ablation on the number of decoders (feature scales fed to the decoder)",
        "columns": ["Models", "Features", "Parameters"],
        "variants": [_scales_variant(s) for s in ([4], [4, 3], [4, 3, 2], [4, 3, 2, 1])],
    },
    "query_init": {
        "title": "Ablation on query initialization (A = salient points, B = random)",
        "columns": ["Q_m^0", "Q_b^0"],
        "variants": [Variant({"Q_m^0": m, "Q_b^0": b}, {"model": {"init_mask": m, "init_boundary": b}})
                     for m, b in (("B", "B"), ("A", "A"), ("A", "B"), ("B", "A"))],
    },
    "queries_update": {
        "title": "Comparison of query update strategies",
        "columns": ["Models", "Backbone", "Parameters"],
        "variants": [Variant({"Models": label, "Backbone": "ToyCNN"},
                             {"model": {"decoder": {"update_strategy": strat}}})
                     for label, strat in (("Separation", "separation"), ("Sharing", "sharing"),
                                          ("Ours", "composed"))],
    },
    "loss_w": {
        "title": "Ablation of alpha and beta in the loss",
        "columns": ["alpha", "beta"],
        "variants": [Variant({"alpha": f"{a:g}", "beta": f"{b:g}"},
                             {"loss": {"weights": {"alpha": a, "beta": b}}})
                     for a, b in ((0.5, 1.0), (1.0, 1.0), (1.0, 2.0), (1.0, 3.0))],
    },
}


def _fmt_params(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def _fmt_ap(v: float) -> str:
    return f"{100 * v:.1f}"


def format_table(name: str, rows: list[dict]) -> str:
    """Markdown table: the sweep's descriptive columns followed by AP / AP50 / AP75 (in %)."""
    cols = SWEEPS[name]["columns"] + ["AP", "AP50", "AP75"]
    lines = [f"**{SWEEPS[name]['title']}**", "", "| " + " | ".join(cols) + " |",
             "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def run_variant(base: dict, variant: Variant, out_dir: Path, eval_split: str = "val") -> dict:
    cfg_dict = deep_update(base, variant.delta)
    cfg = config_from_dict(cfg_dict)
    run_dir = train(cfg, out_dir)
    model = InstanceSegmenter(cfg.model)
    load_checkpoint(latest_checkpoint(run_dir), model)
    report, _ = evaluate_model(model, load_split(cfg, eval_split), cfg)
    with open(run_dir / f"eval_{eval_split}.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    row = dict(variant.columns)
    row["Parameters"] = _fmt_params(count_parameters(model))
    row["AP"], row["AP50"], row["AP75"] = _fmt_ap(report.ap), _fmt_ap(report.ap50), _fmt_ap(report.ap75)
    row["_report"] = report.to_dict()
    row["_run_dir"] = str(run_dir)
    return row


def ablate(sweep_config: dict, out_dir: str | Path) -> dict[str, str]:
    """Run the requested sweeps; returns ``{sweep_name: markdown table}``.

    ``sweep_config`` keys: ``base`` (a run-config mapping), ``sweeps`` (names
    from :data:`SWEEPS`, default all) and optional ``eval_split``.
    """
    from .plotting import plot_loss_curves

    unknown = set(sweep_config) - {"base", "sweeps", "eval_split"}
    if unknown:
        raise ValueError(f"unknown sweep-config keys: {sorted(unknown)}")
    base = sweep_config.get("base", {})
    config_from_dict(base)  # validate before any compute
    names = sweep_config.get("sweeps") or list(SWEEPS)
    for n in names:
        if n not in SWEEPS:
            raise ValueError(f"unknown sweep {n!r}; choose from {sorted(SWEEPS)}")
    split = sweep_config.get("eval_split", "val")
    out_dir = Path(out_dir)
    tables = {}
    for name in names:
        rows = []
        for k, variant in enumerate(SWEEPS[name]["variants"]):
            rows.append(run_variant(base, variant, out_dir / name / f"variant_{k}", split))
        table = format_table(name, rows)
        tables[name] = table
        (out_dir / name / "table.md").write_text(table)
        with open(out_dir / name / "rows.json", "w") as fh:
            json.dump(rows, fh, indent=2)
        plot_loss_curves({" / ".join(r[c] for c in SWEEPS[name]["columns"] if c != "Parameters"):
                          Path(r["_run_dir"]) / "loss.csv" for r in rows},
                         out_dir / name / "loss_curves.png")
    return tables


def load_sweep_config(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if "base_config" in data:
        with open(Path(path).parent / data.pop("base_config")) as fh:
            data["base"] = deep_update(yaml.safe_load(fh) or {}, data.get("base", {}))
    return data


def parameter_counts(base: dict, name: str = "decoder_num") -> list[int]:
    return [count_parameters(build_model(config_from_dict(deep_update(base, v.delta))))
            for v in SWEEPS[name]["variants"]]
