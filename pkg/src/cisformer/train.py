"""Training loop, checkpoint/resume, prediction and evaluation for a run directory."""
from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, save_config
from .data import Sample, instance_record, load_dataset, synth_generate, write_annotations
from .heads import assemble_predictions
from .losses import LossBreakdown, total_loss
from .metrics import APReport, evaluate_ap
from .model import InstanceSegmenter, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RUNS_ENV = "CISFORMER_RUNS"
CSV_FIELDS = ("iteration",) + LossBreakdown.TERMS


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def load_split(cfg: RunConfig, split: str) -> list[Sample]:
    d = cfg.data
    if d.kind == "synthetic":
        n = d.num_train if split == "train" else d.num_val
        # train and val draw from disjoint seed streams
        seed = cfg.seed * 2 + (0 if split == "train" else 1)
        return synth_generate(d.synthetic, n, seed)
    path = d.train_annotations if split == "train" else d.val_annotations
    if not path:
        raise FileNotFoundError(f"no annotation file configured for split {split!r}")
    return load_dataset(path, boundary_width=d.synthetic.boundary_width)


def to_batch(samples: list[Sample], flips: list[bool] | None = None, dtype=torch.float32):
    imgs, targets = [], []
    for k, s in enumerate(samples):
        img, masks, bnd = s.image, s.masks, s.boundaries
        if flips and flips[k]:
            img, masks, bnd = img[..., ::-1], masks[..., ::-1], bnd[..., ::-1]
        imgs.append(torch.tensor(np.ascontiguousarray(img), dtype=dtype))
        targets.append({"masks": torch.tensor(np.ascontiguousarray(masks), dtype=dtype),
                        "boundaries": torch.tensor(np.ascontiguousarray(bnd), dtype=dtype)})
    return torch.stack(imgs), targets


def build_model(cfg: RunConfig) -> InstanceSegmenter:
    torch.manual_seed(cfg.seed)
    return InstanceSegmenter(cfg.model)


class Trainer:
    """Owns the model, optimizer and every RNG stream of one run, so runs resume exactly."""

    def __init__(self, cfg: RunConfig, run_dir: str | Path):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.model = build_model(cfg)
        o = cfg.optimizer
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
        self.samples = load_split(cfg, "train")
        self.batch_gen = torch.Generator().manual_seed(cfg.seed + 101)
        self.loss_gen = torch.Generator().manual_seed(cfg.seed + 202)
        self.iteration = 0
        self._order: list[int] = []

    def _next_indices(self) -> list[int]:
        out = []
        while len(out) < self.cfg.optimizer.batch_size:
            if not self._order:
                self._order = torch.randperm(len(self.samples), generator=self.batch_gen).tolist()
            out.append(self._order.pop(0))
        return out

    def step(self) -> LossBreakdown:
        self.model.train()
        idx = self._next_indices()
        flips = None
        if self.cfg.data.flip:
            flips = (torch.rand(len(idx), generator=self.batch_gen) < 0.5).tolist()
        images, targets = to_batch([self.samples[i] for i in idx], flips)
        out = self.model(images)
        losses = total_loss(out.stages, targets, self.cfg.loss, generator=self.loss_gen)
        self.optimizer.zero_grad()
        losses.total.backward()
        if self.cfg.optimizer.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.optimizer.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        return losses

    # -- persistence ----------------------------------------------------
    def checkpoint_path(self, iteration: int) -> Path:
        return self.run_dir / f"checkpoint_{iteration:06d}.pt"

    def save(self) -> Path:
        path = self.checkpoint_path(self.iteration)
        save_checkpoint(path, self.model, {
            "iteration": self.iteration,
            "optimizer": self.optimizer.state_dict(),
            "batch_gen": self.batch_gen.get_state(),
            "loss_gen": self.loss_gen.get_state(),
            "order": list(self._order),
            "torch_rng": torch.get_rng_state(),
        })
        return path

    def resume(self, path: Path) -> None:
        payload = load_checkpoint(path, self.model)
        self.optimizer.load_state_dict(payload["optimizer"])
        self.batch_gen.set_state(payload["batch_gen"])
        self.loss_gen.set_state(payload["loss_gen"])
        self._order = list(payload["order"])
        torch.set_rng_state(payload["torch_rng"])
        self.iteration = int(payload["iteration"])


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    ckpts = sorted(Path(run_dir).glob("checkpoint_*.pt"))
    return ckpts[-1] if ckpts else None


def _format_row(iteration: int, values: dict[str, float]) -> list[str]:
    return [str(iteration)] + [repr(values[k]) for k in LossBreakdown.TERMS]


def train(cfg: RunConfig, run_dir: str | Path | None = None, progress=None) -> Path:
    """Train (or resume) a run; writes ``config.yaml``, ``loss.csv`` and checkpoints."""
    cfg.validate()
    run_dir = Path(run_dir) if run_dir else runs_root() / f"run_seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    trainer = Trainer(cfg, run_dir)
    csv_path = run_dir / "loss.csv"
    resume_from = latest_checkpoint(run_dir)
    rows: list[list[str]] = []
    if resume_from is not None:
        trainer.resume(resume_from)
        log.info("resuming %s at iteration %d", run_dir, trainer.iteration)
        if csv_path.exists():
            with open(csv_path) as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= trainer.iteration]
    o = cfg.optimizer
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        writer.writerows(rows)
        while trainer.iteration < o.iterations:
            losses = trainer.step()
            it = trainer.iteration
            if it % o.log_every == 0:
                writer.writerow(_format_row(it, losses.as_floats()))
                fh.flush()
            if it % o.checkpoint_every == 0:
                trainer.save()
            if progress is not None:
                progress(it, losses)
    if latest_checkpoint(run_dir) is None or trainer.iteration % o.checkpoint_every:
        trainer.save()
    return run_dir


def read_loss_csv(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"loss log not found: {path}")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"loss log is empty: {path}")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


@torch.no_grad()
def predict(model: InstanceSegmenter, samples: list[Sample], score_threshold: float = 0.5,
            mask_threshold: float = 0.5, batch_size: int = 8) -> list[list[dict]]:
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, _ = to_batch(chunk, dtype=next(model.parameters()).dtype)
        res = model(images)
        for i, s in enumerate(chunk):
            out.append(assemble_predictions(res.final.image(i), score_threshold, mask_threshold,
                                            image_size=tuple(s.image.shape[-2:])))
    return out


def evaluate_model(model: InstanceSegmenter, samples: list[Sample], cfg: RunConfig) -> tuple[APReport, list]:
    preds = predict(model, samples, cfg.score_threshold, cfg.mask_threshold)
    report = evaluate_ap(preds, [s.masks for s in samples])
    return report, preds


def evaluate(cfg: RunConfig, checkpoint: str | Path, split: str = "val",
             out_dir: str | Path | None = None) -> APReport:
    """Score ``checkpoint`` on ``split``; writes ``eval_<split>.json`` and ``predictions_<split>.json``."""
    model = InstanceSegmenter(cfg.model)
    load_checkpoint(checkpoint, model)
    samples = load_split(cfg, split)
    report, preds = evaluate_model(model, samples, cfg)
    out_dir = Path(out_dir) if out_dir else Path(checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"eval_{split}.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    records = []
    for s, p in zip(samples, preds):
        h, w = s.image.shape[-2:]
        records.append({"image_id": s.image_id, "file_name": s.file_name, "height": int(h), "width": int(w),
                        "instances": [instance_record(inst["mask"], inst["score"]) for inst in p]})
    write_annotations(out_dir / f"predictions_{split}.json", records)
    return report
