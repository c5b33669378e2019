"""``diffcl`` command line: gen-data, train, eval, ablate, plot."""
import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path

from . import __version__
from .config import TrainConfig, config_hash, parse_config, serialize
from .errors import (CheckpointError, ConfigError, DiffCLError, NoDataError, NumericError,
                     VolumeIOError)
from .evalkit import COLUMNS

log = logging.getLogger("diffcl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_NODATA = 0, 2, 3, 4, 5

# rows of the ablation study: (name, cross-pseudo, HFM, contrastive)
ABLATION_ROWS = (
    ("supervised", False, False, False),
    ("+cross_pseudo", True, False, False),
    ("+cross_pseudo+hfm", True, True, False),
    ("+cross_pseudo+hfm+cl", True, True, True),
)


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_hash: str
    seed: int
    started: str
    finished: str
    version: str
    out_dir: str


def ablation_config(cfg: TrainConfig, cross_pseudo, hfm, cl):
    out = replace(cfg, net=replace(cfg.net, use_hfm=hfm), use_cross_pseudo=cross_pseudo, use_cl=cl)
    return out.validate()


def load_config(args):
    cfg = parse_config(args.config, overrides=args.overrides, preset_name=args.preset)
    env_seed = os.environ.get("DIFFCL_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError("DIFFCL_SEED", f"expected an integer, got {env_seed!r}")
    return cfg


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _prepare_run(out, command, cfg, args):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    text = serialize(cfg)
    (out / "config.yaml").write_text(text)
    return RunManifest(command=command, config_path=str(args.config or ""), config_hash=config_hash(cfg),
                       seed=cfg.seed, started=_now(), finished="", version=__version__, out_dir=str(out))


def _finish_run(manifest):
    manifest.finished = _now()
    Path(manifest.out_dir, "manifest.json").write_text(json.dumps(asdict(manifest), indent=2))


def _with_dataset(cfg, data_dir):
    if data_dir is None:
        return cfg
    path = Path(data_dir) / "dataset.json"
    if not path.exists():
        raise VolumeIOError(path, "dataset manifest not found")
    return replace(cfg, data=replace(cfg.data, source="manifest", manifest=str(path)))


def cmd_gen_data(args):
    from .trainer import build_data
    from .voldata import save_volume, write_manifest

    cfg = load_config(args)
    run = _prepare_run(args.out, "gen-data", cfg, args)
    out = Path(args.out)
    (out / "images").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    split, test = build_data(cfg)
    entries = []

    def put(sample, split_name, label, heldout=False):
        img = f"images/{sample.id}.nii.gz"
        lab = f"labels/{sample.id}_label.nii.gz" if label is not None else None
        save_volume(replace(sample, label=label), out / img, out / lab if lab else None)
        e = {"id": sample.id, "image": img, "split": split_name}
        if heldout:
            e["heldout_label"] = lab
        elif lab:
            e["label"] = lab
        entries.append(e)

    for s in split.labeled:
        put(s, "labeled", s.label)
    for s in split.unlabeled:
        put(s, "unlabeled", split.heldout_labels[s.id], heldout=True)
    for s in test:
        put(s, "test", s.label)
    write_manifest(out / "dataset.json", entries,
                   {"config_hash": config_hash(cfg), "seed": cfg.data.seed,
                    "notes": "synthetic ellipsoids; images normalized to zero mean / unit variance"})
    _finish_run(run)
    print(f"wrote {len(entries)} volumes to {out}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import build_data, evaluate_state, save_checkpoint, train

    cfg = _with_dataset(load_config(args), args.data)
    run = _prepare_run(args.out, "train", cfg, args)
    data = build_data(cfg)
    state, _ = train(cfg, out_dir=args.out, resume=args.resume, data=data)
    report = evaluate_state(state, data[1], out_dir=Path(args.out) / "eval")
    final = Path(args.out) / "checkpoints" / "final.pt"
    save_checkpoint(state, final, metrics=report.aggregate())
    _finish_run(run)
    print(json.dumps(report.aggregate()))
    return EXIT_OK


def cmd_eval(args):
    from .evalkit import evaluate, net_predictor
    from .trainer import load_checkpoint
    from .voldata import load_split_from_manifest

    if not Path(args.ckpt).exists():
        raise CheckpointError(f"{args.ckpt}: checkpoint not found")
    state = load_checkpoint(args.ckpt)
    cfg = state.config
    manifest = Path(args.data) / "dataset.json"
    samples = load_split_from_manifest(manifest, args.split)
    if not samples:
        raise NoDataError(f"no '{args.split}' volumes in {manifest}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(net_predictor(state.cs), samples, cfg.net.num_classes, cfg.patch_size,
                      cfg.eval_stride, config_hash=config_hash(cfg), out_dir=out,
                      mask_dir=out / "masks" if args.save_masks else None)
    print(json.dumps(report.aggregate()))
    return EXIT_OK


def run_ablation(cfg, out, data=None):
    """Train/evaluate the four ablation rows; returns list of result dicts."""
    from .trainer import build_data, evaluate_state, train

    data = data if data is not None else build_data(cfg)
    rows = []
    for name, cps, hfm, cl in ABLATION_ROWS:
        row_cfg = ablation_config(cfg, cps, hfm, cl)
        row_dir = Path(out) / "rows" / name.strip("+").replace("+", "_")
        state, _ = train(row_cfg, out_dir=row_dir, data=data)
        agg = evaluate_state(state, data[1], out_dir=row_dir / "eval").aggregate()
        rows.append({"config": name, **agg})
        log.info("%s: %s", name, agg)
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config", *COLUMNS])
        w.writeheader()
        for r in rows:
            w.writerow({"config": r["config"], **{c: f"{r[c]:.4f}" for c in COLUMNS}})


def cmd_ablate(args):
    cfg = _with_dataset(load_config(args), args.data)
    run = _prepare_run(args.out, "ablate", cfg, args)
    rows = run_ablation(cfg, args.out)
    write_ablation_csv(rows, Path(args.out) / "ablation.csv")
    _finish_run(run)
    for r in rows:
        print(r["config"], " ".join(f"{c}={r[c]:.2f}" for c in COLUMNS))
    return EXIT_OK


def _read_csv(path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    if not run.is_dir():
        raise VolumeIOError(run, "run directory not found")
    history = _read_csv(run / "history.csv")
    metrics = _read_csv(run / "eval" / "metrics.csv")
    ablation = _read_csv(run / "ablation.csv")
    if not (history or metrics or ablation):
        raise NoDataError(f"{run}: no history.csv, eval/metrics.csv or ablation.csv rows to plot")
    written = []
    if history:
        fig, ax = plt.subplots(figsize=(7, 4))
        steps = [int(r["step"]) for r in history]
        for term in ("L_c", "L_d", "L_c_s", "L_d_s", "L_c_p", "L_d_p", "L_cl"):
            ax.plot(steps, [float(r[term]) for r in history], label=term, lw=1)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(ncol=2, fontsize=8)
        fig.tight_layout()
        fig.savefig(run / "loss_curves.png", dpi=120)
        plt.close(fig)
        written.append("loss_curves.png")
    bars = ablation or metrics
    if bars:
        key = "config" if ablation else "id"
        fig, axes = plt.subplots(1, 4, figsize=(12, 3.5))
        for ax, col in zip(axes, COLUMNS):
            ax.bar(range(len(bars)), [float(r[col]) for r in bars])
            ax.set_xticks(range(len(bars)))
            ax.set_xticklabels([r[key] for r in bars], rotation=60, ha="right", fontsize=7)
            ax.set_title(col)
        fig.tight_layout()
        fig.savefig(run / "metrics.png", dpi=120)
        plt.close(fig)
        written.append("metrics.png")
    print("wrote " + ", ".join(written))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="diffcl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--preset", help="named preset (e.g. desk, la-8-72)")
        sp.add_argument("--set", dest="set_overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field (dotted path)")
        sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    with_config(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train CS and DS")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory written by gen-data")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint's CS network")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--save-masks", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the four-row ablation grid")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory written by gen-data")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="render loss curves and metric bars")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # bare --a.b=value flags are treated as config overrides
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    if extra and not hasattr(args, "set_overrides"):
        parser.error(f"{args.command} takes no config overrides")
    if hasattr(args, "set_overrides"):
        args.overrides = list(args.set_overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoDataError as exc:
        print(f"no data: {exc}", file=sys.stderr)
        return EXIT_NODATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolumeIOError, CheckpointError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DiffCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
