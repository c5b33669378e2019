"""Dual-network semi-supervised training loop.

Per iteration: CS forward -> argmax pseudo-labels -> one-hot + noise ->
DS forward on (x, Y_t) -> supervised, cross-pseudo and contrastive terms
-> one SGD step per network from its own total.

All randomness of epoch ``e`` comes from generators seeded by
``(seed, e)``, so resuming from an epoch checkpoint replays the exact
same draws as an uninterrupted run.
"""
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ddim
from .config import TrainConfig, config_hash, serialize
from .errors import CheckpointError, NumericError
from .evalkit import evaluate, net_predictor
from .labelprop import (MemoryBank, bank_update, contrastive_loss, mine_pairs, sample_anchors,
                        sample_candidates)
from .losses import TERMS, as_onehot, cross_pseudo_losses, supervised_losses, total_losses, \
    warmup_lambda
from .nets import build_cs, build_ds, ds_config_from
from .voldata import (SyntheticSpec, augment, crop_patch, gen_synthetic_dataset,
                      load_split_from_manifest, split_dataset)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
HISTORY_FIELDS = ("step", "epoch", "t", *TERMS, "lambda", "bank_fill")


@dataclass
class Batch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: torch.Tensor
    ids_l: list
    ids_u: list


@dataclass
class TrainState:
    config: TrainConfig
    cs: torch.nn.Module
    ds: torch.nn.Module
    opt_cs: torch.optim.Optimizer
    opt_ds: torch.optim.Optimizer
    bank: MemoryBank
    schedule: ddim.NoiseSchedule
    epoch: int = 0  # epochs completed
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def rng_state(self):
        return {"seed": self.config.seed, "next_epoch": self.epoch}


def synthetic_spec(cfg: TrainConfig, test=False):
    d = cfg.data
    return SyntheticSpec(
        grid=tuple(d.grid), count=d.test_count if test else d.count, num_classes=d.num_classes,
        noise=d.noise, blur_sigma=d.blur_sigma, radius_range=tuple(d.radius_range),
        anisotropy=d.anisotropy, contrast_range=tuple(d.contrast_range),
        bias_amplitude=d.bias_amplitude, seed=d.seed + (104729 if test else 0),
        prefix="tst" if test else "trn",
    )


def build_data(cfg: TrainConfig):
    """(DatasetSplit, test samples) from the synthetic generator or a manifest."""
    if cfg.data.source == "manifest":
        labeled = load_split_from_manifest(cfg.data.manifest, "labeled")
        unlabeled = load_split_from_manifest(cfg.data.manifest, "unlabeled")
        test = load_split_from_manifest(cfg.data.manifest, "test")
        from .voldata import DatasetSplit
        from dataclasses import replace

        held = {s.id: s.label for s in unlabeled}
        unlabeled = [replace(s, label=None) for s in unlabeled]
        return DatasetSplit(labeled, unlabeled, cfg.data.seed, held), test
    pool = gen_synthetic_dataset(synthetic_spec(cfg))
    split = split_dataset(pool, cfg.data.labeled_count, cfg.data.seed)
    test = gen_synthetic_dataset(synthetic_spec(cfg, test=True))
    return split, test


def make_optimizer(params, cfg: TrainConfig):
    o = cfg.optimizer
    return torch.optim.SGD(params, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)


def init_state(cfg: TrainConfig):
    cfg.validate()
    cs = build_cs(cfg.net, seed=cfg.seed)
    ds = build_ds(ds_config_from(cfg.net), seed=cfg.seed + 1)
    if cfg.share_projection_head:
        ds.head = cs.head
    ds_params = [p for n, p in ds.named_parameters()
                 if not (cfg.share_projection_head and n.startswith("head."))]
    return TrainState(
        config=cfg, cs=cs, ds=ds,
        opt_cs=make_optimizer(cs.parameters(), cfg),
        opt_ds=make_optimizer(ds_params, cfg),
        bank=MemoryBank(cfg.net.num_classes, cfg.net.feature_dim, cfg.labelprop.capacity,
                        cfg.labelprop.insert_cap),
        schedule=ddim.make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end),
    )


def epoch_generators(seed, epoch):
    rng = np.random.default_rng([seed, epoch])
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    return rng, gen


def iterations_per_epoch(cfg, split):
    if cfg.iters_per_epoch:
        return cfg.iters_per_epoch
    n = cfg.batch_size - cfg.labeled_per_batch
    return max(1, len(split.unlabeled) // n)


def _draw_patch(sample, cfg, rng):
    s = crop_patch(sample, cfg.patch_size, "random", seed=int(rng.integers(2 ** 31)))
    return augment(s, seed=int(rng.integers(2 ** 31)))


class BatchSampler:
    """Deterministic per-epoch stream of m labeled + n unlabeled patches."""

    def __init__(self, split, cfg, rng):
        self.split, self.cfg, self.rng = split, cfg, rng
        self.m = cfg.labeled_per_batch
        self.n = cfg.batch_size - cfg.labeled_per_batch
        self._lab, self._unl = [], []

    def _take(self, queue, pool_size, k):
        out = []
        while len(out) < k:
            if not queue:
                queue.extend(self.rng.permutation(pool_size).tolist())
            out.append(queue.pop(0))
        return out

    def next(self):
        li = self._take(self._lab, len(self.split.labeled), self.m)
        ui = self._take(self._unl, len(self.split.unlabeled), self.n)
        lab = [_draw_patch(self.split.labeled[i], self.cfg, self.rng) for i in li]
        unl = [_draw_patch(self.split.unlabeled[i], self.cfg, self.rng) for i in ui]
        return Batch(
            x_l=torch.from_numpy(np.stack([s.image for s in lab])[:, None]).float(),
            y_l=torch.from_numpy(np.stack([s.label for s in lab])).long(),
            x_u=torch.from_numpy(np.stack([s.image for s in unl])[:, None]).float(),
            ids_l=[s.id for s in lab],
            ids_u=[s.id for s in unl],
        )


def noise_labels(y0, schedule, gen, per_sample=False):
    """Forward-noise encoded labels at a uniformly drawn t (shared or per sample)."""
    B = y0.shape[0]
    if per_sample:
        t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    else:
        t = torch.randint(1, schedule.T + 1, (1,), generator=gen).expand(B)
    ab = torch.as_tensor(schedule.alpha_bar[(t - 1).numpy()], dtype=y0.dtype).view(B, 1, 1, 1, 1)
    eps = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    return ab.sqrt() * y0 + (1 - ab).sqrt() * eps, t


def _check_finite(name, value, batch, state):
    if not torch.isfinite(value).all():
        raise NumericError(
            f"non-finite {name} at epoch {state.epoch} iteration {state.iteration}; "
            f"labeled {batch.ids_l}, unlabeled {batch.ids_u}"
        )


def train_step(state: TrainState, batch: Batch, rng=None, gen=None):
    """One optimisation step of both networks. Returns (state, LossReport, info)."""
    cfg = state.config
    if rng is None or gen is None:
        rng, gen = epoch_generators(cfg.seed, state.epoch)
    C = cfg.net.num_classes
    m = batch.x_l.shape[0]
    t_warm = min(state.epoch, cfg.loss.t_max)
    state.cs.train()
    state.ds.train()

    x = torch.cat([batch.x_l, batch.x_u])
    for name, part in (("labeled input", batch.x_l), ("unlabeled input", batch.x_u)):
        _check_finite(name, part, batch, state)
    out_c = state.cs(x)
    pseudo_c = out_c.probs.detach().argmax(dim=1)
    # the DS always sees noised CS predictions, labeled half included, so the
    # supervised DS loss teaches it to rectify CS output instead of copying labels
    y0 = ddim.onehot_encode(pseudo_c, C)
    y_t, t = noise_labels(y0, state.schedule, gen, cfg.schedule.per_sample_t)
    out_d = state.ds(torch.cat([x, y_t], dim=1), t)
    pseudo_d = out_d.probs.detach().argmax(dim=1)

    y_l = as_onehot(batch.y_l, C)
    l_d_s, l_c_s = supervised_losses(out_d.probs[:m], out_c.probs[:m], y_l, cfg.loss, t_warm)
    zero = torch.zeros(())
    if cfg.use_cross_pseudo:
        l_d_p, l_c_p = cross_pseudo_losses(out_d.probs[m:], as_onehot(pseudo_c[m:], C),
                                           out_c.probs[m:], as_onehot(pseudo_d[m:], C), cfg.loss)
    else:
        l_d_p, l_c_p = zero, zero

    l_cl, skipped = zero, True
    if cfg.use_cl:
        lp = cfg.labelprop
        bank_update(state.bank, out_d.features[:m], pseudo_d[:m], batch.y_l, rng)
        anchors, missing = sample_anchors(state.bank, lp.p, rng=rng)
        if anchors:
            cand = sample_candidates(out_c.features[m:], lp.q, rng)
            pairs = mine_pairs(anchors, cand, lp.k, missing)
            l_cl, skipped = contrastive_loss(pairs, lp.tau)
    report = total_losses(
        {"L_d_s": l_d_s, "L_c_s": l_c_s, "L_d_p": l_d_p, "L_c_p": l_c_p, "L_cl": l_cl}, cfg.loss)
    for name in TERMS:
        _check_finite(name, getattr(report, name), batch, state)

    state.opt_cs.zero_grad(set_to_none=True)
    state.opt_ds.zero_grad(set_to_none=True)
    report.L_c.backward()
    report.L_d.backward()
    state.opt_cs.step()
    state.opt_ds.step()
    state.iteration += 1
    info = {"t": int(t[0]), "lambda": warmup_lambda(t_warm, cfg.loss.t_max),
            "cl_skipped": skipped, "bank_fill": list(state.bank.counts)}
    return state, report, info


def history_row(state, report, info):
    row = {"step": state.iteration, "epoch": state.epoch, "t": info["t"]}
    row.update(report.scalars())
    row["lambda"] = info["lambda"]
    row["bank_fill"] = ";".join(str(c) for c in info["bank_fill"])
    return row


def run_epoch(state, split):
    rng, gen = epoch_generators(state.config.seed, state.epoch)
    sampler = BatchSampler(split, state.config, rng)
    rows = []
    for _ in range(iterations_per_epoch(state.config, split)):
        batch = sampler.next()
        state, report, info = train_step(state, batch, rng, gen)
        rows.append(history_row(state, report, info))
    state.history.extend(rows)
    state.epoch += 1
    return rows


def write_history(rows, path):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(config: TrainConfig, out_dir=None, resume=None, data=None, epochs=None):
    """Run training to ``config.epochs`` (or ``epochs``); returns (state, history).

    With ``out_dir`` a checkpoint pair is written every ``checkpoint_every``
    epochs and history.csv is appended as epochs finish.
    """
    split, _ = data if data is not None else build_data(config)
    state = load_checkpoint(resume, config) if resume else init_state(config)
    stop = epochs if epochs is not None else config.epochs
    ckpt_dir = hist_path = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        hist_path = Path(out_dir) / "history.csv"
        if resume is None and hist_path.exists():
            hist_path.unlink()
        if resume is not None:
            # rewrite the log from the checkpointed history so it matches a straight run
            if hist_path.exists():
                hist_path.unlink()
            write_history(state.history, hist_path)
    while state.epoch < stop:
        rows = run_epoch(state, split)
        log.info("epoch %d: L_c=%.4f L_d=%.4f bank=%s", state.epoch, rows[-1]["L_c"],
                 rows[-1]["L_d"], state.bank.stats()["fill"])
        if hist_path is not None:
            write_history(rows, hist_path)
        if ckpt_dir is not None and (state.epoch % config.checkpoint_every == 0 or state.epoch == stop):
            save_checkpoint(state, ckpt_dir / f"epoch_{state.epoch:04d}.pt")
    return state, state.history


def _payload(state):
    return {
        "cs": state.cs.state_dict(),
        "ds": state.ds.state_dict(),
        "opt_cs": state.opt_cs.state_dict(),
        "opt_ds": state.opt_ds.state_dict(),
        "bank": state.bank.state_dict(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "history": state.history,
        "rng": state.rng_state,
    }


def payload_bytes(state):
    buf = io.BytesIO()
    torch.save(_payload(state), buf)
    return buf.getvalue()


def save_checkpoint(state, path, metrics=None):
    """Write ``path`` (torch payload) and ``path.json`` (manifest)."""
    path = Path(path)
    data = payload_bytes(state)
    path.write_bytes(data)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config_hash": config_hash(state.config),
        "config": serialize(state.config),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "payload_sha256": hashlib.sha256(data).hexdigest(),
        "metrics": metrics or {},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path):
    mpath = Path(str(path) + ".json")
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{mpath}: checkpoint manifest missing")
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: corrupted manifest ({exc})")
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CheckpointError(f"{mpath}: corrupted manifest (no format_version)")
    if manifest["format_version"] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{mpath}: checkpoint format {manifest['format_version']} but this build reads "
            f"format {CHECKPOINT_FORMAT}"
        )
    return manifest


def load_checkpoint(path, config=None):
    """Rebuild a TrainState. Without ``config`` the manifest's copy is used."""
    import yaml
    from .config import from_dict

    manifest = read_manifest(path)
    if config is None:
        config = from_dict(yaml.safe_load(manifest["config"])).validate()
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint payload missing")
    if hashlib.sha256(data).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload does not match manifest checksum")
    payload = torch.load(io.BytesIO(data), weights_only=False)
    state = init_state(config)
    state.cs.load_state_dict(payload["cs"])
    state.ds.load_state_dict(payload["ds"])
    state.opt_cs.load_state_dict(payload["opt_cs"])
    state.opt_ds.load_state_dict(payload["opt_ds"])
    state.bank.load_state_dict(payload["bank"])
    state.epoch = payload["epoch"]
    state.iteration = payload["iteration"]
    # pickle memoizes shared strings; interned keys keep re-saved bytes identical
    state.history = [{sys.intern(k): v for k, v in row.items()} for row in payload["history"]]
    return state


def evaluate_state(state, samples, out_dir=None):
    cfg = state.config
    return evaluate(net_predictor(state.cs), samples, cfg.net.num_classes, cfg.patch_size,
                    cfg.eval_stride, config_hash=config_hash(cfg), out_dir=out_dir)


def weights_digest(state):
    h = hashlib.sha256()
    for net in (state.cs, state.ds):
        for name, t in sorted(net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
