"""Two-phase training: main-model step, then discriminator step."""

from __future__ import annotations

import csv
import io
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .data import DatasetManifest
from .losses import LossWeights, adv_loss, combined_loss, discr_loss, semseg_loss, total_loss, vpr_loss
from .mining import DescriptorCache, MiningStats, QueryUnusable, Triplet, TripletLog, mine_triplet, refresh_cache
from .model import VPRModel
from .optim import Optimizer, make_optimizer, poly_lr
from .retrieval import DescriptorIndex, recall_at_n
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "l_vpr", "l_seg", "l_adv", "l_discr", "lr", "recall1"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Dict[str, object]):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class Batch:
    images: np.ndarray                   # 3 x C x H x W: query, positive, negative
    labels: Optional[np.ndarray] = None  # 3 x H x W
    target: Optional[np.ndarray] = None  # C x H x W, unlabelled target-domain image


@dataclass
class MainOutput:
    metrics: Dict[str, float]
    source_logits: Optional[Tensor] = None
    target_logits: Optional[Tensor] = None


@contextmanager
def frozen(params: Dict[str, Tensor]) -> Iterator[None]:
    """Temporarily stop gradients from reaching ``params``."""
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def _check_finite(metrics: Dict[str, float], step: Optional[int] = None) -> None:
    bad = {k: v for k, v in metrics.items() if not np.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"non-finite loss at step {step}: {bad}", {"step": step, "metrics": dict(metrics)})


def step_main(batch: Batch, model: VPRModel, weights: LossWeights, opt: Optimizer, lr: float,
              step: Optional[int] = None) -> MainOutput:
    """One update of encoder, attention, pooling and decoder on
    L_vpr + alpha * L_seg + beta * L_adv, with the discriminator frozen."""
    flags = model.flags
    opt.zero_grad()
    with frozen(model.discriminator_parameters()):
        fwd = model.forward(Tensor(batch.images))
        d = fwd.descriptor
        l_vpr = vpr_loss(T.index(d, 0), T.index(d, 1), T.index(d, 2), weights.margin)
        metrics = {"l_vpr": l_vpr.item()}
        out = MainOutput(metrics)

        l_seg = None
        logits = None
        if flags.semseg or flags.da:
            logits, _ = model.segment(fwd.f4, fwd.attention)
            out.source_logits = logits.detach()
        if flags.semseg:
            if batch.labels is None:
                raise ValueError("semantic segmentation is on but the batch has no labels")
            full = T.upsample_nearest(logits, batch.labels.shape[-2:])
            l_seg = semseg_loss(full, batch.labels)
            metrics["l_seg"] = l_seg.item()
        objective = combined_loss(l_vpr, l_seg, weights.alpha)

        l_adv = None
        if flags.da:
            if batch.target is None:
                raise ValueError("domain adaptation is on but the batch has no target image")
            f4_t, _ = model.encoder(Tensor(batch.target[None]))
            logits_t, _ = model.segment(f4_t, model.attention_map(f4_t))
            out.target_logits = logits_t.detach()
            _check_finite(metrics, step)
            scores = model.domain_scores(logits_t)
            if not np.all(np.isfinite(scores.data)):
                raise TrainingDiverged(f"non-finite discriminator scores at step {step}",
                                       {"step": step, "metrics": dict(metrics)})
            l_adv = adv_loss(scores)
            metrics["l_adv"] = l_adv.item()
        main, _ = total_loss(objective, l_adv, None, weights.beta, 0.0)
        _check_finite(metrics, step)
        # backward runs inside the freeze so no gradient reaches the discriminator
        if main.requires_grad:
            main.backward()
    opt.step(lr)
    return out


def step_discr(source_logits: Tensor, target_logits: Tensor, model: VPRModel, gamma: float,
               opt: Optimizer, lr: float, step: Optional[int] = None) -> Dict[str, float]:
    """One update of the discriminator on gamma * L_discr over detached features."""
    if gamma == 0:
        return {}
    ds = model.domain_scores(source_logits.detach())
    dt = model.domain_scores(target_logits.detach())
    _, objective = total_loss(None, None, discr_loss(ds, dt), 0.0, gamma)
    metrics = {"l_discr": float(objective.data) / gamma}
    _check_finite(metrics, step)
    opt.zero_grad()
    objective.backward()
    opt.step(lr)
    return metrics


# -- augmentation ----------------------------------------------------------------------------

def augment(images: np.ndarray, labels: Optional[np.ndarray], rng: np.random.Generator,
            margin: int):
    """Random crop (each side shrinks by ``margin``) and horizontal flip, applied
    identically to an image and its label map."""
    n, _, h, w = images.shape
    ch, cw = h - margin, w - margin
    out_img = np.empty(images.shape[:2] + (ch, cw))
    out_lab = None if labels is None else np.empty((n, ch, cw), dtype=labels.dtype)
    for i in range(n):
        y, x = rng.integers(0, margin + 1, size=2)
        flip = rng.random() < 0.5
        img = images[i, :, y:y + ch, x:x + cw]
        out_img[i] = img[..., ::-1] if flip else img
        if labels is not None:
            lab = labels[i, y:y + ch, x:x + cw]
            out_lab[i] = lab[..., ::-1] if flip else lab
    return out_img, out_lab


# -- fit --------------------------------------------------------------------------------------------

@dataclass
class FitResult:
    model: VPRModel
    metrics: List[Dict[str, object]]
    mining: MiningStats
    validation: Dict[int, float] = field(default_factory=dict)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.metrics:
            w.writerow(["" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in METRICS_HEADER])
        return buf.getvalue()


def source_validation(model: VPRModel, train: DatasetManifest, cache: DescriptorCache,
                      radius_m: float = 25.0) -> Dict[int, float]:
    """Leave-one-out Recall@N over the source training records: each record
    queries all the others."""
    ids = cache.ids
    vecs = cache.vectors
    coords = train.coords
    hits = {1: [], 5: [], 10: []}
    for i in range(len(ids)):
        keep = np.arange(len(ids)) != i
        index = DescriptorIndex(ids[keep], vecs[keep])
        res = recall_at_n(index, [ids[i]], vecs[i:i + 1], coords[i:i + 1], coords[keep],
                          radius_m, tuple(hits), train.convention)
        if res.num_queries:
            for n in hits:
                hits[n].append(res.recalls[n])
    return {n: float(np.mean(v)) if v else 0.0 for n, v in hits.items()}


def build_model(cfg: Config) -> VPRModel:
    seeds = np.random.SeedSequence(cfg.train.seed).spawn(3)
    return VPRModel(cfg.model_config(), np.random.default_rng(seeds[0]))


def fit(cfg: Config, manifest_source: DatasetManifest, manifest_target: Optional[DatasetManifest] = None,
        out_dir=None, triplet_log: Optional[io.TextIOBase] = None) -> FitResult:
    """Train for ``cfg.train.steps`` steps; deterministic given ``cfg.train.seed``."""
    flags = cfg.ablation
    init_seq, mine_seq, aug_seq = np.random.SeedSequence(cfg.train.seed).spawn(3)
    model = VPRModel(cfg.model_config(), np.random.default_rng(init_seq))
    mine_rng = np.random.default_rng(mine_seq)
    aug_rng = np.random.default_rng(aug_seq)
    mining_seed = int(mine_seq.generate_state(1)[0])

    train = manifest_source.select(role="train", domain="source")
    if len(train) == 0:
        raise ValueError("source manifest has no labelled training records")
    target = None
    if flags.da:
        if manifest_target is None:
            raise ValueError("domain adaptation is on but no target manifest was given")
        target = manifest_target.select(domain="target")
        if len(target) == 0:
            raise ValueError("target manifest has no target-domain records")

    weights = LossWeights(cfg.mining.margin, cfg.semseg.alpha, cfg.da.beta, cfg.da.gamma)
    oc = cfg.optimizer
    opt_main = make_optimizer(oc.kind, model.main_parameters(), momentum=oc.momentum,
                              weight_decay=oc.weight_decay, betas=oc.betas, eps=oc.eps)
    opt_disc = make_optimizer(oc.disc_kind, model.discriminator_parameters(), momentum=oc.momentum,
                              weight_decay=oc.weight_decay, betas=oc.betas, eps=oc.eps)
    policy = cfg.mining_policy()
    cache = DescriptorCache(train.ids, refresh_every=policy.cache_refresh_every)
    stats = MiningStats()
    tlog = TripletLog(triplet_log) if triplet_log is not None else None
    by_id = {r.id: r for r in train.records}
    total = cfg.train.steps
    rows: List[Dict[str, object]] = []
    validation: Dict[int, float] = {}
    order: List[int] = []

    for t in range(total):
        if cache.generation == 0 or cache.due(t):
            refresh_cache(model, train, cache)
        triplet = None
        attempts = 0
        while triplet is None:
            if not order:
                order = list(mine_rng.permutation(train.ids))
            qid = int(order.pop())
            try:
                triplet = mine_triplet(qid, train, cache, policy, mining_seed)
                stats.mined += 1
            except QueryUnusable:
                stats.unusable += 1
                stats.unusable_ids.append(qid)
                attempts += 1
                if attempts > len(train):
                    raise ValueError("no usable training query in the source manifest")
        if tlog is not None:
            tlog.write(t, triplet)
        recs = [by_id[triplet.query], by_id[triplet.positive], by_id[triplet.negative]]
        images = np.stack([train.load_image(r) for r in recs])
        labels = np.stack([train.load_labels(r, cfg.semseg.num_classes) for r in recs]) if flags.semseg else None
        if cfg.train.augment and cfg.train.crop_margin > 0:
            images, labels = augment(images, labels, aug_rng, cfg.train.crop_margin)
        tgt = None
        if flags.da:
            tgt = target.load_image(target.records[int(aug_rng.integers(len(target)))])
        lr = poly_lr(t, total, oc.lr, cfg.schedule.power)
        out = step_main(Batch(images, labels, tgt), model, weights, opt_main, lr, step=t)
        metrics = dict(out.metrics)
        if flags.da:
            d_lr = poly_lr(t, total, oc.disc_lr, cfg.schedule.power)
            metrics.update(step_discr(out.source_logits, out.target_logits, model, weights.gamma, opt_disc,
                                      d_lr, step=t))
        row: Dict[str, object] = {"step": t + 1, "lr": lr, **metrics}
        if cfg.train.eval_every and ((t + 1) % cfg.train.eval_every == 0 or t + 1 == total):
            refresh_cache(model, train, cache)
            validation = source_validation(model, train, cache, cfg.train.eval_radius_m)
            row["recall1"] = validation[1]
            log.info("step %d  l_vpr %.4f  source R@1 %.3f", t + 1, metrics["l_vpr"], validation[1])
        rows.append(row)

    result = FitResult(model, rows, stats, validation)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.vprc")
        (out / "metrics.csv").write_text(result.metrics_csv())
    return result


def evaluate(model: VPRModel, gallery: DatasetManifest, queries: DatasetManifest,
             radius_m: float = 25.0, ns: Sequence[int] = (1, 5, 10)):
    """Recall@N of ``queries`` against ``gallery`` with the model's descriptors."""
    g_vecs = model.describe(np.stack([gallery.load_image(r) for r in gallery.records]))
    q_vecs = model.describe(np.stack([queries.load_image(r) for r in queries.records]))
    index = DescriptorIndex(gallery.ids, g_vecs)
    return recall_at_n(index, queries.ids, q_vecs, queries.coords, gallery.coords, radius_m, ns,
                       gallery.convention)
