"""Fine-tuning on scored sentence pairs and Spearman evaluation."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from xjac.encoder import SiameseEncoder, similarity
from xjac.errors import DataError, NumericalError, UsageError

OBJECTIVES = ("dot", "cosine")


@dataclass(frozen=True)
class Pair:
    text_a: str
    text_b: str
    label: float


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.1
    warmup: float = 0.1
    objective: str = "dot"
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise UsageError(f"unknown objective {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise UsageError("lr and weight_decay must be non-negative")
        if not 0 <= self.warmup < 1:
            raise UsageError("warmup fraction must be in [0, 1)")


def _is_number(field: str) -> bool:
    try:
        float(field)
    except ValueError:
        return False
    return True


def load_dataset(path) -> list[Pair]:
    """Read ``text_a<TAB>text_b<TAB>score`` rows; a non-numeric first score is a header."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        if not pairs and lineno == 1 and not _is_number(fields[2]):
            continue
        if not _is_number(fields[2]):
            raise DataError(f"{path}:{lineno}: score {fields[2]!r} is not a number")
        label = float(fields[2])
        if not math.isfinite(label) or not 0.0 <= label <= 1.0:
            raise DataError(f"{path}:{lineno}: score {label} outside [0, 1]")
        if not fields[0].split() or not fields[1].split():
            raise DataError(f"{path}:{lineno}: empty text")
        pairs.append(Pair(fields[0], fields[1], label))
    if not pairs:
        raise DataError(f"{path}: no data rows")
    return pairs


def write_dataset(pairs: Sequence[Pair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for p in pairs:
            fh.write(f"{p.text_a}\t{p.text_b}\t{p.label!r}\n")


def predict(model: SiameseEncoder, pairs: Sequence[Pair], mode: str = "dot",
            shifted: bool | None = None) -> torch.Tensor:
    """Scores for all pairs; ``shifted`` defaults to the model's adjusted flag."""
    if shifted is None:
        shifted = model.config.adjusted
    seqs_a = [model.tokenize(p.text_a) for p in pairs]
    seqs_b = [model.tokenize(p.text_b) for p in pairs]
    ea = model.encode_batch(seqs_a, shifted=shifted)
    eb = model.encode_batch(seqs_b, shifted=shifted)
    return similarity(ea, eb, mode)


def train(model: SiameseEncoder, data: Sequence[Pair], config: TrainConfig) -> list[float]:
    """Fit ``model`` in place by MSE between predicted scores and labels.

    The dot objective scores shifted embeddings (the model must be adjusted);
    the cosine objective scores raw embeddings (the model must not be).
    AdamW with linear warmup over the first ``warmup`` fraction of steps, then
    a constant rate. Returns the mean loss of every epoch.
    """
    config.validate()
    if not data:
        raise DataError("no training data")
    adjusted = config.objective == "dot"
    if model.config.adjusted != adjusted:
        raise UsageError(
            "cosine objective needs unshifted embeddings: the shifted reference embedding is the zero "
            "vector, whose cosine is undefined"
            if config.objective == "cosine" else
            "dot objective trains the shifted (adjusted) model; set adjusted=True"
        )
    rng = random.Random(config.seed)
    seqs = [(model.tokenize(p.text_a), model.tokenize(p.text_b)) for p in data]
    labels = torch.tensor([p.label for p in data], dtype=torch.float64)

    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = math.ceil(config.warmup * total_steps)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
    )

    model.train()
    trace = []
    order = list(range(len(data)))
    for epoch in range(config.epochs):
        rng.shuffle(order)
        losses = []
        for batch_no in range(steps_per_epoch):
            idx = order[batch_no * config.batch_size:(batch_no + 1) * config.batch_size]
            ea = model.encode_batch([seqs[i][0] for i in idx], shifted=adjusted)
            eb = model.encode_batch([seqs[i][1] for i in idx], shifted=adjusted)
            pred = similarity(ea, eb, config.objective)
            loss = torch.mean((pred - labels[idx]) ** 2)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {batch_no + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    model.eval()
    return trace


def spearman(predictions, labels) -> float:
    """Rank correlation; tied values receive their average rank."""
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise DataError("spearman needs at least two observations")
    rx, ry = rankdata(x) - (len(x) + 1) / 2, rankdata(y) - (len(y) + 1) / 2
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise DataError("spearman undefined for constant input")
    return max(-1.0, min(1.0, float(rx @ ry) / denom))


def evaluate(model: SiameseEncoder, data: Sequence[Pair], mode: str = "dot") -> float:
    if not data:
        raise DataError("no evaluation data")
    with torch.no_grad():
        pred = predict(model, data, mode)
    return spearman(pred.numpy(), [p.label for p in data])


def write_loss_trace(trace: Sequence[float], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(trace, start=1):
            writer.writerow([epoch, repr(loss)])
