"""Loss curves, AP bars and mask overlays for a run directory."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import read_loss_csv  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(csv_path: str | Path, out_path: str | Path) -> Path:
    logs = read_loss_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "loc_bce", "mask_bce", "mask_dice", "boundary_bce", "boundary_dice"):
        ax.plot(logs["iteration"], logs[key], label=key, lw=1.5 if key == "total" else 0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, Path(out_path))


def plot_loss_curves(curves: dict[str, Path], out_path: str | Path) -> Path:
    """Total loss of several runs on one axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in curves.items():
        logs = read_loss_csv(path)
        ax.plot(logs["iteration"], logs["total"], label=label, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    return _save(fig, Path(out_path))


def plot_ap_bars(report: dict, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    keys = ["ap", "ap50", "ap75"]
    ax.bar(["AP", "AP50", "AP75"], [100 * report[k] for k in keys], color=["#4c72b0", "#55a868", "#c44e52"])
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    return _save(fig, Path(out_path))


def overlay(image: np.ndarray, masks: list[np.ndarray], alpha: float = 0.45) -> np.ndarray:
    """Blend binary masks onto an ``[3, H, W]`` image in distinct colours; returns ``[H, W, 3]``."""
    rgb = image.transpose(1, 2, 0).astype(np.float64).copy()
    cmap = plt.get_cmap("tab10")
    for k, m in enumerate(masks):
        m = m.astype(bool)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.asarray(cmap(k % 10)[:3])
    return np.clip(rgb, 0, 1)


def plot(run_dir: str | Path, num_samples: int = 4) -> list[Path]:
    """Write ``loss_curve.png``, ``ap_<split>.png`` for each eval report, and ``overlays/*.png``."""
    from .config import load_config
    from .model import InstanceSegmenter, load_checkpoint
    from .train import latest_checkpoint, load_split, predict

    run_dir = Path(run_dir)
    csv_path = run_dir / "loss.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no loss.csv in {run_dir}")
    written = [plot_loss_curve(csv_path, run_dir / "loss_curve.png")]
    for rep in sorted(run_dir.glob("eval_*.json")):
        with open(rep) as fh:
            written.append(plot_ap_bars(json.load(fh), run_dir / f"ap_{rep.stem[5:]}.png"))
    ckpt = latest_checkpoint(run_dir)
    if ckpt is not None and (run_dir / "config.yaml").exists():
        cfg = load_config(run_dir / "config.yaml")
        model = InstanceSegmenter(cfg.model)
        load_checkpoint(ckpt, model)
        samples = load_split(cfg, "train")[:num_samples]
        preds = predict(model, samples, cfg.score_threshold, cfg.mask_threshold)
        out = run_dir / "overlays"
        out.mkdir(exist_ok=True)
        for s, p in zip(samples, preds):
            fig, axes = plt.subplots(1, 2, figsize=(6, 3))
            axes[0].imshow(overlay(s.image, list(s.masks)))
            axes[0].set_title("ground truth", fontsize=8)
            axes[1].imshow(overlay(s.image, [inst["mask"] for inst in p]))
            axes[1].set_title(f"predicted ({len(p)})", fontsize=8)
            for a in axes:
                a.axis("off")
            written.append(_save(fig, out / f"sample_{s.image_id}.png"))
    return written
