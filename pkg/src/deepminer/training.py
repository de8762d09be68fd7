"""Training loop, threshold ablation and the run configuration."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset, PKSampler, augment, load_dir, seed_stream, synth_dataset
from .errors import ConfigInvalid, NonFiniteInput, TrainingAborted
from .losses import CenterTable, LossConfig, total_loss
from .metrics import EvalResult, evaluate_model
from .model import DeepMiner, ModelConfig, build_model
from .optim import Adam, lr_schedule

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 120
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    warmup_start: float = 3.5e-5
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    P: int = 16
    K: int = 4
    center_weight: float = 5e-4
    epsilon: float = 0.1
    center_lr: float = 0.5
    flip_p: float = 0.5
    erase_p: float = 0.5
    seed: int = 0
    checkpoint: str | None = None
    eval_interval: int = 0  # 0: evaluate after the last epoch only
    k_max: int = 10
    # data: "synth" or a directory of <id>_c<cam>... images
    data: str = "synth"
    test_data: str | None = None
    num_ids: int = 8
    per_id: int = 16
    num_cams: int = 2
    data_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.decay_epochs = tuple(int(d) for d in self.decay_epochs)

    def validate(self) -> None:
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ConfigInvalid("decay_epochs: must be sorted")
        if min(self.base_lr, self.warmup_start, self.decay_factor) <= 0:
            raise ConfigInvalid("base_lr, warmup_start and decay_factor must be > 0")
        if self.epochs < 1 or self.warmup_epochs < 0:
            raise ConfigInvalid("epochs must be >= 1 and warmup_epochs >= 0")
        if self.P < 2 or self.K < 2:
            raise ConfigInvalid("P and K must be >= 2")
        for name in ("flip_p", "erase_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigInvalid(f"{name}: must lie in [0, 1]")
        self.model.validate()

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(num_classes, self.center_weight, self.epsilon, self.center_lr)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float  # mean total loss over the epoch's batches
    batch_losses: list[float]
    branch_losses: dict[str, dict[str, float]]
    eval: EvalResult | None = None


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord]
    model: DeepMiner
    final: EvalResult | None
    best_map: float | None
    label_map: dict[int, int]

    def loss_trace(self) -> list[float]:
        return [loss for rec in self.epochs for loss in rec.batch_losses]


def split_query_gallery(ds: Dataset) -> tuple[Dataset, Dataset]:
    """First image of each (identity, camera) becomes a query, the rest the gallery."""
    seen, q_idx, g_idx = set(), [], []
    for i, s in enumerate(ds.samples):
        key = (s.identity, s.camera)
        (g_idx if key in seen else q_idx).append(i)
        seen.add(key)
    return ds.subset(q_idx), ds.subset(g_idx)


def load_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    h, w = cfg.model.image_height, cfg.model.image_width
    if cfg.data == "synth":
        train_set = synth_dataset(cfg.num_ids, cfg.per_id, cfg.num_cams, h, w, seed=cfg.data_seed)
        test_set = synth_dataset(cfg.num_ids, cfg.per_id, cfg.num_cams, h, w, seed=cfg.data_seed + 1)
        return train_set, test_set
    train_set = load_dir(cfg.data, h, w)
    test_set = load_dir(cfg.test_data, h, w) if cfg.test_data else None
    return train_set, test_set


def evaluate_split(model: DeepMiner, test_set: Dataset | None, k_max: int) -> EvalResult | None:
    if test_set is None:
        return None
    query, gallery = split_query_gallery(test_set)
    return evaluate_model(model, query, gallery, k_max)


def train(cfg: TrainConfig, train_set: Dataset | None = None, test_set: Dataset | None = None,
          model: DeepMiner | None = None) -> TrainingHistory:
    """Run the full recipe; deterministic given ``cfg`` (single-threaded).

    Raises ``TrainingAborted`` naming the branch (and loss term) when a
    non-finite value appears.
    """
    cfg.validate()
    if train_set is None:
        train_set, loaded_test = load_datasets(cfg)
        test_set = test_set if test_set is not None else loaded_test
    label_map = {identity: i for i, identity in enumerate(train_set.id_index)}
    num_classes = len(label_map)
    if model is None:
        model = build_model(dataclasses.replace(cfg.model, num_identities=num_classes), cfg.seed)
    elif model.config.num_identities != num_classes:
        raise ConfigInvalid(f"model predicts {model.config.num_identities} identities, data has {num_classes}")

    loss_cfg = cfg.loss_config(num_classes)
    centers = CenterTable.zeros(model.config.feature_dims(), num_classes, cfg.center_lr)
    optimizer = Adam(model.parameters())
    sampler = PKSampler(train_set, cfg.P, cfg.K, cfg.seed)
    aug_rng = seed_stream(cfg.seed, "augment")
    owners = {id(p): name for name in model.branches for p in model.branch_parameters(name)}

    records: list[EpochRecord] = []
    best_map = None
    final = None
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        model.train()
        batch_losses = []
        sums: dict[str, dict[str, float]] = {}
        for batch in sampler:
            images = np.stack([augment(train_set[i].image, cfg.flip_p, cfg.erase_p, aug_rng) for i in batch])
            labels = np.array([label_map[train_set[i].identity] for i in batch])
            try:
                outputs = model(images)
                loss, breakdown = total_loss(outputs, labels, centers, loss_cfg)
                optimizer.zero_grad()
                loss.backward()
            except NonFiniteInput as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            for p in optimizer.params:
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise TrainingAborted(f"epoch {epoch}: non-finite gradient in branch {owners[id(p)]}")
            optimizer.step(lr)
            for bf in outputs:
                centers.update(bf.branch_id, bf.f.data, labels)
            batch_losses.append(loss.item())
            for branch, terms in breakdown.items():
                acc = sums.setdefault(branch, dict.fromkeys(terms, 0.0))
                for term, value in terms.items():
                    acc[term] += value
        n = len(batch_losses)
        rec = EpochRecord(epoch, lr, float(np.mean(batch_losses)), batch_losses,
                          {b: {t: v / n for t, v in terms.items()} for b, terms in sums.items()})
        last = epoch == cfg.epochs - 1
        if test_set is not None and (last or (cfg.eval_interval and (epoch + 1) % cfg.eval_interval == 0)):
            rec.eval = evaluate_split(model, test_set, cfg.k_max)
            if best_map is None or rec.eval.map > best_map:
                best_map = rec.eval.map
                if cfg.checkpoint:
                    save_checkpoint(model, cfg.checkpoint, _data_metadata(cfg))
            if last:
                final = rec.eval
        logger.info("epoch %d lr %.3g loss %.4f%s", epoch, lr, rec.loss,
                    f" mAP {rec.eval.map:.4f}" if rec.eval else "")
        records.append(rec)
    if cfg.checkpoint and test_set is None:
        save_checkpoint(model, cfg.checkpoint, _data_metadata(cfg))
    model.eval()
    return TrainingHistory(records, model, final, best_map, label_map)


def _data_metadata(cfg: TrainConfig) -> dict[str, str]:
    meta = {"data": cfg.data, "num_ids": str(cfg.num_ids), "per_id": str(cfg.per_id),
            "num_cams": str(cfg.num_cams), "data_seed": str(cfg.data_seed)}
    if cfg.test_data:
        meta["test_data"] = cfg.test_data
    return meta


def ablate_threshold(cfg: TrainConfig, taus=(0.5, 0.6, 0.7, 0.8, 0.9, 0.99)) -> list[dict]:
    """Train one single-IE-branch model per tau (same seed) and report mAP / Rank-1."""
    if len(cfg.model.ie_positions) != 1:
        raise ConfigInvalid("ie_positions: threshold ablation needs exactly one IE branch")
    train_set, test_set = load_datasets(cfg)
    if test_set is None:
        raise ConfigInvalid("test_data: ablation needs an evaluation set")
    rows = []
    for tau in taus:
        run_cfg = dataclasses.replace(cfg, checkpoint=None, model=dataclasses.replace(cfg.model, tau=float(tau)))
        hist = train(run_cfg, train_set, test_set)
        rows.append({"tau": float(tau), "mAP": hist.final.map, "Rank-1": hist.final.rank1})
    return rows


def format_ablation(rows: list[dict]) -> str:
    lines = ["tau mAP Rank-1"]
    lines += [f"{r['tau']:.2f} {r['mAP']:.6f} {r['Rank-1']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
