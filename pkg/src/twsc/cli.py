"""Command line front end.

Subcommands: ``fetch-data`` (download the digit corpus, or render the
synthetic stand-in), ``train``, ``eval``, ``plot``, and ``reproduce``
(the full grid plus figures and a summary). The dataset directory comes
from ``--data-dir`` or the ``TWSC_DATA_DIR`` environment variable.
"""

import argparse
import datetime as _dt
import json
import os
import sys
import urllib.request
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, config_hash, load_config
from .data import (TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
                   Dataset, ingest_mnist, write_synthetic_corpus)
from .errors import TwscError
from .metrics import (MetricTable, evaluate_sweep, read_metric_csv,
                      write_metric_csv, write_metric_json)
from .training import train_system, weight_reciprocity_report
from .transceiver import NetArch, Node, load_node_checkpoint

DATA_DIR_ENV = "TWSC_DATA_DIR"
DOWNLOAD_BASE = "https://storage.googleapis.com/cvdf-datasets/mnist/"

SMOKE_EPOCHS = 5
SMOKE_EVAL_IMAGES = 2000
SMOKE_SNRS = (0.0, 10.0, 20.0)
FULL_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0)


def _utc_stamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")


def _data_dir(args) -> Path:
    raw = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if not raw:
        raise TwscError(
            f"no dataset directory: pass --data-dir or set {DATA_DIR_ENV}; "
            f"populate one with 'twsc fetch-data'")
    return Path(raw)


def _load_dataset(args) -> Dataset:
    path = _data_dir(args)
    try:
        return ingest_mnist(path)
    except TwscError as exc:
        raise TwscError(
            f"{exc}\nhint: populate {path} with 'twsc fetch-data --out {path}' "
            f"(add --synthetic where the network is unavailable)") from exc


def cmd_fetch_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        write_synthetic_corpus(out, n_train=args.train_count,
                               n_test=args.test_count, seed=args.seed)
        print(f"wrote synthetic corpus to {out}")
        return 0
    names = (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)
    for name in names:
        target = out / name
        if target.exists():
            print(f"{name}: already present")
            continue
        url = args.base_url.rstrip("/") + "/" + name + ".gz"
        print(f"downloading {url}")
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                blob = resp.read()
        except OSError as exc:
            raise TwscError(
                f"download failed for {url}: {exc}\n"
                f"hint: retry with --synthetic to render the offline corpus") from exc
        (out / (name + ".gz")).write_bytes(blob)
    print(f"corpus ready in {out}")
    return 0


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    for field, attr in (("system_kind", "system"), ("channel_kind", "channel"),
                        ("seed", "seed"), ("epochs", "epochs"),
                        ("batch_size", "batch_size"), ("train_subset", "subset"),
                        ("epoch_eval_images", "eval_images")):
        value = getattr(args, attr, None)
        if value is not None:
            changes[field] = value
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args)
    dataset = _load_dataset(args)
    run_id = args.run_id or f"{cfg.system_kind}-{cfg.channel_kind}-s{cfg.seed}"
    out_dir = Path(args.runs_root) / run_id
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise TwscError(f"run directory {out_dir} already exists; pass --force to reuse")
    print(f"training {cfg.system_kind} on {cfg.channel_kind}, seed {cfg.seed}, "
          f"{cfg.epochs} epochs -> {out_dir}")
    run = train_system(cfg, dataset, out_dir=out_dir, run_id=run_id, log=print)
    if run.two_way:
        report = weight_reciprocity_report(run)
        print(f"weight reciprocity: max |A-B| = {report['max_abs_diff']:.3e}")
    print(f"done: {out_dir}")
    return 0


def _latest_epoch(node_dir: Path) -> int:
    epochs = [int(p.stem) for p in node_dir.glob("*.ckpt")]
    if not epochs:
        raise TwscError(f"no checkpoints under {node_dir}")
    return max(epochs)


def load_trained_nodes(run_dir: Path, epoch: int | None = None):
    """Rebuild nodes from a run directory at a checkpointed epoch."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    raw = dict(meta["config"])
    raw["train_snr_range_db"] = tuple(raw["train_snr_range_db"])
    raw["eval_snr_list_db"] = tuple(raw["eval_snr_list_db"])
    cfg = ExperimentConfig(**raw)
    arch = NetArch()
    node_a = Node(arch, "A", cfg.seed, lr=cfg.learning_rate)
    epoch = epoch if epoch is not None else _latest_epoch(run_dir / "A")
    load_node_checkpoint(run_dir / "A" / f"{epoch}.ckpt", node_a,
                         expect_config_hash=config_hash(cfg))
    if cfg.system_kind == "jscc":
        node_b = node_a
    else:
        node_b = Node(arch, "B", cfg.seed, lr=cfg.learning_rate)
        load_node_checkpoint(run_dir / "B" / f"{epoch}.ckpt", node_b,
                             expect_config_hash=config_hash(cfg))
    return cfg, node_a, node_b, epoch


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, node_a, node_b, epoch = load_trained_nodes(run_dir, args.epoch)
    dataset = _load_dataset(args)
    images = dataset.test_images
    if args.images and args.images < images.shape[0]:
        images = images[: args.images]
    snr_list = [float(s) for s in args.snr.split(",")] if args.snr \
        else list(cfg.eval_snr_list_db)
    eval_channel = args.eval_channel or cfg.channel_kind
    directions = ("a2b",) if cfg.system_kind == "jscc" else ("a2b", "b2a")
    table = evaluate_sweep(node_a, node_b, images, eval_channel, snr_list,
                           eval_seed=args.eval_seed, directions=directions,
                           system_kind=cfg.system_kind,
                           train_channel=cfg.channel_kind)
    stamp = _utc_stamp()
    base = run_dir / "eval" / f"{eval_channel}-e{epoch}-s{args.eval_seed}-{stamp}"
    write_metric_csv(base.with_suffix(".csv"), table)
    write_metric_json(base.with_suffix(".json"), table, meta={
        "run": str(run_dir), "epoch": epoch, "eval_seed": args.eval_seed,
        "eval_channel": eval_channel, "snr_list": snr_list,
        "n_images": int(images.shape[0]), "tool_version": __version__,
    })
    for row in table.rows:
        print(f"{row.direction:>4} snr {row.snr_db:5.1f} dB: "
              f"psnr {row.psnr_db:6.2f} dB  ssim {row.ssim:.4f}")
    print(f"wrote {base.with_suffix('.csv')}")
    return 0


def _plot_series(ax, xs, ys, label):
    ax.plot(xs, ys, marker="o", label=label)


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    fig, ax = plt.subplots(figsize=(6, 4))
    sidecar_rows = []
    if args.x == "snr":
        eval_dir = run_dir / "eval"
        files = sorted(eval_dir.glob("*.csv")) if eval_dir.is_dir() else []
        if args.eval_file:
            files = [Path(args.eval_file)]
        if not files:
            raise TwscError(f"no eval CSVs under {eval_dir}; run 'twsc eval' first")
        table = read_metric_csv(files[-1])
        for direction in sorted({r.direction for r in table.rows}):
            rows = [r for r in table.rows if r.direction == direction]
            rows.sort(key=lambda r: r.snr_db)
            xs = [r.snr_db for r in rows]
            ys = [getattr(r, "psnr_db" if args.metric == "psnr" else "ssim")
                  for r in rows]
            _plot_series(ax, xs, ys, direction)
            sidecar_rows += [(direction, x, y) for x, y in zip(xs, ys)]
        ax.set_xlabel("SNR (dB)")
    else:
        import csv as _csv
        with open(run_dir / "metrics.csv", newline="", encoding="utf-8") as fh:
            records = [r for r in _csv.DictReader(fh) if r["mode"] == "epoch"]
        col = {"psnr": "psnr", "ssim": "ssim", "loss": "loss"}[args.metric]
        for direction in sorted({r["direction"] for r in records}):
            rows = [r for r in records if r["direction"] == direction and r[col]]
            xs = [int(r["epoch"]) for r in rows]
            ys = [float(r[col]) for r in rows]
            _plot_series(ax, xs, ys, direction)
            sidecar_rows += [(direction, x, y) for x, y in zip(xs, ys)]
        ax.set_xlabel("epoch")
    ax.set_ylabel({"psnr": "PSNR (dB)", "ssim": "SSIM", "loss": "loss"}[args.metric])
    ax.grid(True, alpha=0.4)
    ax.legend()
    out = Path(args.out) if args.out else run_dir / "plots" / f"{args.metric}-vs-{args.x}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    sidecar = out.with_suffix(".csv")
    with open(sidecar, "w", encoding="utf-8") as fh:
        fh.write(f"series,{args.x},{args.metric}\n")
        for direction, x, y in sidecar_rows:
            fh.write(f"{direction},{x},{y!r}\n")
    print(f"wrote {out} and {sidecar}")
    return 0


def cmd_reproduce(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dataset = _load_dataset(args)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    full = args.scale == "full"
    epochs = args.epochs or (100 if full else SMOKE_EPOCHS)
    eval_images = dataset.test_images.shape[0] if full else SMOKE_EVAL_IMAGES
    snrs = FULL_SNRS if full else SMOKE_SNRS
    subset = args.subset if args.subset is not None else 0
    base = ExperimentConfig().replace(epochs=epochs, seed=args.seed,
                                      train_subset=subset,
                                      batch_size=args.batch_size)

    summary = {"scale": args.scale, "epochs": epochs, "seed": args.seed,
               "eval_images": eval_images, "snrs": list(snrs), "grid": {}}
    tables: dict = {}
    for channel in ("awgn", "rayleigh"):
        for system in ("twsc", "jscc", "gansc"):
            cfg = base.replace(system_kind=system, channel_kind=channel)
            run_id = f"{system}-{channel}-s{args.seed}"
            run_dir = out_root / run_id
            print(f"[reproduce] training {run_id} ({epochs} epochs)")
            run = train_system(cfg, dataset, out_dir=run_dir, run_id=run_id, log=print)
            directions = ("a2b",) if system == "jscc" else ("a2b", "b2a")
            table = evaluate_sweep(run.node_a, run.node_b,
                                   dataset.test_images[:eval_images],
                                   channel, snrs, eval_seed=args.seed,
                                   directions=directions, system_kind=system,
                                   train_channel=channel)
            write_metric_csv(run_dir / "eval" / "final.csv", table)
            tables[(system, channel)] = table
            entry = {}
            for snr in snrs:
                row = table.single(direction="avg", snr_db=float(snr))
                entry[str(snr)] = {"psnr_db": row.psnr_db, "ssim": row.ssim}
            summary["grid"][run_id] = entry
            if system in ("twsc", "gansc"):
                summary["grid"][run_id]["reciprocity_max_abs_diff"] = \
                    weight_reciprocity_report(run)["max_abs_diff"]
                summary["grid"][run_id]["audits"] = run.audits()

    figures = out_root / "figures"
    figures.mkdir(exist_ok=True)
    fig_no = 0
    for metric in ("psnr", "ssim"):
        for channel in ("awgn", "rayleigh"):
            fig_no += 1
            fig, ax = plt.subplots(figsize=(6, 4))
            for system in ("twsc", "jscc", "gansc"):
                table = tables[(system, channel)]
                rows = sorted(table.filtered(direction="avg").rows,
                              key=lambda r: r.snr_db)
                xs = [r.snr_db for r in rows]
                ys = [r.psnr_db if metric == "psnr" else r.ssim for r in rows]
                ax.plot(xs, ys, marker="o", label=system)
            ax.set_xlabel("SNR (dB)")
            ax.set_ylabel("PSNR (dB)" if metric == "psnr" else "SSIM")
            ax.set_title(f"{channel} channel")
            ax.grid(True, alpha=0.4)
            ax.legend()
            fig.tight_layout()
            fig.savefig(figures / f"fig{fig_no}-{metric}-vs-snr-{channel}.png", dpi=120)
            plt.close(fig)

    # Convergence figure: per-epoch SSIM of the two-way system.
    fig, ax = plt.subplots(figsize=(6, 4))
    import csv as _csv
    for channel in ("awgn", "rayleigh"):
        path = out_root / f"twsc-{channel}-s{args.seed}" / "metrics.csv"
        with open(path, newline="", encoding="utf-8") as fh:
            records = [r for r in _csv.DictReader(fh)
                       if r["mode"] == "epoch" and r["direction"] == "avg" and r["ssim"]]
        ax.plot([int(r["epoch"]) for r in records],
                [float(r["ssim"]) for r in records], marker="o", label=channel)
    ax.set_xlabel("epoch")
    ax.set_ylabel("SSIM")
    ax.grid(True, alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(figures / "fig5-ssim-vs-epoch-twsc.png", dpi=120)
    plt.close(fig)

    (out_root / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_reproduce_report(out_root, summary, snrs)
    print(f"[reproduce] artifacts in {out_root}")
    return 0


def _write_reproduce_report(out_root: Path, summary: dict, snrs) -> None:
    lines = [f"reproduction report (scale={summary['scale']}, "
             f"epochs={summary['epochs']}, seed={summary['seed']})", ""]
    grid = summary["grid"]
    seed = summary["seed"]
    for channel, metric in (("awgn", "psnr_db"), ("rayleigh", "ssim")):
        lines.append(f"ordering on {channel} ({metric}):")
        for snr in snrs:
            key = str(snr)
            vals = {s: grid[f"{s}-{channel}-s{seed}"][key][metric]
                    for s in ("twsc", "jscc", "gansc")}
            slack = 0.5 if metric == "psnr_db" else 0.01
            ok = (vals["jscc"] >= vals["twsc"] - slack
                  and vals["twsc"] >= vals["gansc"])
            lines.append(
                f"  snr {snr:>5}: jscc {vals['jscc']:.4f}  twsc {vals['twsc']:.4f}  "
                f"gansc {vals['gansc']:.4f}  -> {'OK' if ok else 'VIOLATED'}")
        lines.append("")
    (out_root / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twsc",
                                     description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"twsc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download or synthesize the digit corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", action="store_true",
                   help="render the procedural offline corpus instead of downloading")
    p.add_argument("--train-count", type=int, default=60000)
    p.add_argument("--test-count", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-url", default=DOWNLOAD_BASE)
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("train", help="train one system")
    p.add_argument("--system", choices=("twsc", "jscc", "gansc"))
    p.add_argument("--channel", choices=("awgn", "rayleigh"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--subset", type=int, help="restrict to the first N training images")
    p.add_argument("--eval-images", type=int, help="per-epoch eval subset size")
    p.add_argument("--run-id")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--data-dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run over the real channel")
    p.add_argument("--run", required=True, help="run directory (runs/<id>)")
    p.add_argument("--eval-channel", choices=("awgn", "rayleigh"))
    p.add_argument("--snr", help="comma-separated SNR list in dB")
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--epoch", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="plot metrics from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--metric", choices=("psnr", "ssim", "loss"), default="psnr")
    p.add_argument("--x", choices=("snr", "epoch"), default="snr")
    p.add_argument("--out")
    p.add_argument("--eval-file")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("reproduce", help="train the full grid and emit figures")
    p.add_argument("--scale", choices=("smoke", "full"), default="smoke")
    p.add_argument("--out", default="runs/reproduce")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir")
    p.add_argument("--epochs", type=int, help="override the scale's epoch count")
    p.add_argument("--subset", type=int, help="restrict training images (CI budgets)")
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TwscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
