"""Overlap and surface-distance metrics, sliding-window inference, reports."""
import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

COLUMNS = ("Dice", "Jaccard", "95HD", "ASD")
_SIX = ndimage.generate_binary_structure(3, 1)


def overlap_metrics(pred, true):
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    inter = np.count_nonzero(pred & true)
    total = np.count_nonzero(pred) + np.count_nonzero(true)
    if total == 0:
        return 1.0, 1.0
    union = np.count_nonzero(pred | true)
    return 2.0 * inter / total, inter / union


def surface(mask):
    """Mask voxels with at least one 6-neighbour outside (grid edge counts)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def directed_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Distance from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist_to_b[sa]


def empty_sentinel(shape, spacing=(1.0, 1.0, 1.0)):
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def surface_distance_metrics(pred, true, spacing=(1.0, 1.0, 1.0)):
    """(hd95, asd, empty_flag) over the pooled directed distances of both directions.

    If either mask is empty both metrics take the volume-diagonal sentinel
    and the flag is set.
    """
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if not pred.any() or not true.any():
        s = empty_sentinel(pred.shape, spacing)
        return s, s, True
    d = np.concatenate([
        directed_surface_distances(pred, true, spacing),
        directed_surface_distances(true, pred, spacing),
    ])
    return float(np.percentile(d, 95, method="linear")), float(d.mean()), False


def window_starts(size, patch, stride):
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def aggregate_windows(predict, volume, patch_size, stride, num_classes):
    """Tile ``volume`` (ch, H, L, D) and average window logits.

    ``predict`` maps a (1, ch, *patch) tensor to (1, C, *patch) logits.
    Edge windows are shifted inward so every voxel is covered. Returns
    (mean logits (C, H, L, D), per-voxel window counts).
    """
    volume = torch.as_tensor(volume)
    if volume.ndim == 3:
        volume = volume[None]
    shape = tuple(volume.shape[1:])
    patch_size = tuple(int(p) for p in patch_size)
    stride = tuple(int(s) for s in stride)
    if any(p > n for p, n in zip(patch_size, shape)):
        raise ValueError(f"patch {patch_size} exceeds volume {shape}")
    if any(s < 1 or s > p for s, p in zip(stride, patch_size)):
        raise ValueError(f"stride {stride} must lie in [1, patch] per axis")
    acc = torch.zeros((num_classes,) + shape, dtype=torch.float64)
    counts = torch.zeros(shape, dtype=torch.float64)
    grids = [window_starts(n, p, s) for n, p, s in zip(shape, patch_size, stride)]
    with torch.no_grad():
        for a, b, c in itertools.product(*grids):
            sl = (slice(a, a + patch_size[0]), slice(b, b + patch_size[1]), slice(c, c + patch_size[2]))
            logits = predict(volume[(slice(None),) + sl][None].float())
            acc[(slice(None),) + sl] += logits[0].double()
            counts[sl] += 1.0
    return acc / counts, counts


def sliding_window_infer(predict, volume, patch_size, stride, num_classes):
    """Softmax of the window-averaged logits, shape (C, H, L, D)."""
    logits, _ = aggregate_windows(predict, volume, patch_size, stride, num_classes)
    return torch.softmax(logits, dim=0)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    config_hash: str = ""

    def aggregate(self):
        if not self.rows:
            return {c: float("nan") for c in COLUMNS}
        return {c: float(np.mean([r[c] for r in self.rows])) for c in COLUMNS}

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = ["id", *COLUMNS, "95HD_mm", "ASD_mm", "empty_mask"]
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in sorted(self.rows, key=lambda r: r["id"]):
                w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in cols})
        summary = {"config_hash": self.config_hash, "n": len(self.rows), "mean": self.aggregate(),
                   "order": list(COLUMNS), "direction": ["up", "up", "down", "down"]}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def volume_metrics(pred_labels, true_labels, num_classes, spacing=(1.0, 1.0, 1.0)):
    """Foreground-class averaged Dice/Jaccard (%) and 95HD/ASD (voxels and mm)."""
    per = {c: [] for c in ("Dice", "Jaccard", "95HD", "ASD", "95HD_mm", "ASD_mm")}
    empty = False
    for cls in range(1, num_classes):
        p, t = pred_labels == cls, true_labels == cls
        dice, jac = overlap_metrics(p, t)
        hd, asd, e = surface_distance_metrics(p, t)
        hd_mm, asd_mm, _ = surface_distance_metrics(p, t, spacing)
        empty = empty or e
        per["Dice"].append(100.0 * dice)
        per["Jaccard"].append(100.0 * jac)
        per["95HD"].append(hd)
        per["ASD"].append(asd)
        per["95HD_mm"].append(hd_mm)
        per["ASD_mm"].append(asd_mm)
    row = {k: float(np.mean(v)) for k, v in per.items()}
    row["empty_mask"] = empty
    return row


def evaluate(predict, samples, num_classes, patch_size, stride, config_hash="", out_dir=None,
             mask_dir=None):
    """Sliding-window inference + metrics for every sample with ground truth.

    ``predict`` is a callable patch -> logits (see ``net_predictor``).
    """
    report = MetricReport(config_hash=config_hash)
    for s in sorted(samples, key=lambda s: s.id):
        if s.label is None:
            raise ValueError(f"sample {s.id} has no ground truth")
        probs = sliding_window_infer(predict, s.image, patch_size, stride, num_classes)
        pred = probs.argmax(dim=0).numpy()
        row = volume_metrics(pred, s.label, num_classes, s.spacing)
        row["id"] = s.id
        report.rows.append(row)
        if mask_dir is not None:
            from .voldata import VolumeSample, save_volume

            Path(mask_dir).mkdir(parents=True, exist_ok=True)
            save_volume(VolumeSample(image=pred.astype(np.float32), id=s.id, spacing=s.spacing),
                        Path(mask_dir) / f"{s.id}_pred.nii.gz")
    if out_dir is not None:
        report.write(out_dir)
    return report


def net_predictor(net):
    """Wrap a segmentation network as a patch -> logits callable (eval mode)."""
    net.eval()

    def predict(x):
        return net(x).logits

    return predict
