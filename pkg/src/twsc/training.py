"""Training orchestration for the three systems.

The two-way system trains in two stages that interleave within every
batch. Stage 1 works on real channel output: both nodes transmit the
shared batch over the reciprocal channel (forward only, through the
link barrier), then each receiving node updates its channel surrogate
on (pilot, received) pairs and its receiver nets on reconstruction MSE.
Stage 2 is purely local: each node pushes the same batch through its
own transmitter, the frozen surrogate, and its own frozen receiver, and
updates only the transmitter. No gradient, weight, or feedback payload
ever crosses the link; the audit counters prove it.

Reciprocity by construction: both nodes start from identical seeds, see
the same batch schedule, the same SNR draws, the same fading
realization, and (in this deterministic implementation) identically
seeded per-direction noise and surrogate-noise streams. Every update
they apply is therefore the same floating-point computation, so their
weight vectors stay bitwise equal without any exchange. That equality
is what lets a node's own receiver stand in for the remote one during
stage 2.

The one-way baseline trains all four nets jointly through a
differentiable channel (no barrier; that is the point of comparison).
The unconditioned baseline runs the identical two-stage pipeline with a
surrogate that ignores the pilot.

Divergence policy: a step is bad when its reconstruction loss is
non-finite or more than 10x the best loss seen so far; 50 consecutive
bad steps abort the run, keeping the last epoch checkpoint on disk.
"""

import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import (ChannelRealization, LinkAudit, awgn_realization,
                      link_transmit, sample_reciprocal_rayleigh)
from .config import ExperimentConfig, config_hash
from .data import BatchSchedule, Dataset, batch_schedule
from .errors import ContractError, TrainingDivergedError, ValidationError
from .metrics import evaluate_sweep
from .rng import numpy_stream, stream_seed, torch_stream
from .surrogate import ChannelSurrogate, ConditionInput, SurrogateArch, frozen
from .transceiver import NetArch, Node, save_node_checkpoint

DIVERGENCE_STREAK = 50
DIVERGENCE_FACTOR = 10.0

METRIC_COLUMNS = ("epoch", "step", "mode", "direction", "loss", "psnr",
                  "ssim", "snr_db", "lr", "forward_payload_count")


def lr_at(cfg: ExperimentConfig, step: int) -> float:
    """Inverse-time decay evaluated at a global step count."""
    return cfg.learning_rate / (1.0 + cfg.lr_decay * step)


def code_version() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unversioned"


@dataclass
class LogRow:
    epoch: int
    step: int
    mode: str
    direction: str
    loss: float | None
    psnr: float | None
    ssim: float | None
    snr_db: float | None
    lr: float | None
    forward_payload_count: int | None

    def rendered(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            value = getattr(self, name)
            if value is None:
                out.append("")
            elif isinstance(value, float):
                out.append(repr(value))
            else:
                out.append(str(value))
        return out


def write_log_csv(path, rows: list[LogRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRIC_COLUMNS)]
    lines += [",".join(row.rendered()) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class TrainRun:
    """Everything live about one training run."""

    cfg: ExperimentConfig
    arch: NetArch
    dataset: Dataset
    node_a: Node
    node_b: Node
    surrogate_a: ChannelSurrogate | None
    surrogate_b: ChannelSurrogate | None
    audit_ab: LinkAudit
    audit_ba: LinkAudit
    snr_stream: np.random.Generator
    stage2_snr_stream: np.random.Generator
    fading_stream: torch.Generator
    noise_ab: torch.Generator
    noise_ba: torch.Generator
    gan_z_a: torch.Generator
    gan_z_b: torch.Generator
    stage2_z_a: torch.Generator
    stage2_z_b: torch.Generator
    config_digest: str
    out_dir: Path | None = None
    step: int = 0
    epoch: int = 0
    rows: list = field(default_factory=list)
    best_loss: float | None = None
    bad_streak: int = 0
    last_checkpoints: list = field(default_factory=list)

    @property
    def two_way(self) -> bool:
        return self.cfg.system_kind in ("twsc", "gansc")

    def directions(self) -> tuple[str, ...]:
        return ("a2b", "b2a") if self.two_way else ("a2b",)

    def audits(self) -> dict:
        return {"a2b": self.audit_ab.as_dict(), "b2a": self.audit_ba.as_dict()}


def init_run(cfg: ExperimentConfig, dataset: Dataset,
             arch: NetArch | None = None, out_dir=None) -> TrainRun:
    cfg.validate()
    arch = arch or NetArch()
    if arch.symbol_count != cfg.symbol_count:
        raise ValidationError(
            f"config symbol_count {cfg.symbol_count} does not match the "
            f"architecture's {arch.symbol_count}")
    seed = cfg.seed
    lr0 = cfg.learning_rate
    node_a = Node(arch, "A", seed, lr=lr0)
    node_b = Node(arch, "B", seed, lr=lr0)
    surrogate_a = surrogate_b = None
    if cfg.system_kind in ("twsc", "gansc"):
        sarch = SurrogateArch(symbol_count=arch.symbol_count,
                              noise_dim=cfg.noise_dim,
                              conditioned_on_pilot=(cfg.system_kind == "twsc"))
        surrogate_a = ChannelSurrogate(sarch, seed, lr=lr0, loss_mode=cfg.loss_mode)
        surrogate_b = ChannelSurrogate(sarch, seed, lr=lr0, loss_mode=cfg.loss_mode)
    run = TrainRun(
        cfg=cfg, arch=arch, dataset=dataset,
        node_a=node_a, node_b=node_b,
        surrogate_a=surrogate_a, surrogate_b=surrogate_b,
        audit_ab=LinkAudit("A", "B"), audit_ba=LinkAudit("B", "A"),
        snr_stream=numpy_stream(seed, "train-snr"),
        stage2_snr_stream=numpy_stream(seed, "stage2-snr"),
        fading_stream=torch_stream(seed, "fading"),
        # Both link directions and both nodes' surrogate-noise streams
        # are seeded identically on purpose: with shared data and
        # identical init this makes reciprocity exact, not approximate.
        noise_ab=torch_stream(seed, "link-noise"),
        noise_ba=torch_stream(seed, "link-noise"),
        gan_z_a=torch_stream(seed, "gan-noise"),
        gan_z_b=torch_stream(seed, "gan-noise"),
        stage2_z_a=torch_stream(seed, "stage2-noise"),
        stage2_z_b=torch_stream(seed, "stage2-noise"),
        config_digest=config_hash(cfg),
        out_dir=Path(out_dir) if out_dir is not None else None,
    )
    return run


def draw_realization(run: TrainRun, batch_size: int, snr_db: float) -> ChannelRealization:
    if run.cfg.channel_kind == "rayleigh":
        return sample_reciprocal_rayleigh(run.fading_stream, batch_size, snr_db)
    return awgn_realization(batch_size, snr_db)


@dataclass
class Stage1Record:
    rx_loss_ab: float
    rx_loss_ba: float
    gan_g_a: float
    gan_d_a: float
    gan_g_b: float
    gan_d_b: float


def stage1_step(run: TrainRun, batch: torch.Tensor, snr_db: float,
                batch_b: torch.Tensor | None = None) -> Stage1Record:
    """Real-channel stage: surrogate and receiver updates at both nodes.

    ``batch_b`` exists only for reciprocity negative controls; nominal
    operation has both nodes transmit the same shared batch.
    """
    batch_a = batch
    if batch_b is None:
        batch_b = batch
    realization = draw_realization(run, batch_a.shape[0], snr_db)

    with torch.no_grad():
        x_a = run.node_a.encode(batch_a)
        x_b = run.node_b.encode(batch_b)
    y_at_b = link_transmit(run.audit_ab, x_a, realization, run.noise_ab)
    y_at_a = link_transmit(run.audit_ba, x_b, realization, run.noise_ba)

    # The pilot at each node is its own transmit block for the shared
    # batch; under reciprocity it equals what the remote actually sent.
    rec_b = run.surrogate_b.train_step(x_b, y_at_b, snr_db, run.gan_z_b, f"step {run.step}")
    rec_a = run.surrogate_a.train_step(x_a, y_at_a, snr_db, run.gan_z_a, f"step {run.step}")

    losses = {}
    for node, received, target, key in ((run.node_b, y_at_b, batch_a, "a2b"),
                                        (run.node_a, y_at_a, batch_b, "b2a")):
        recon = node.decode(received)
        loss = torch.nn.functional.mse_loss(recon, target.to(recon.dtype))
        node.opt_rx.zero_grad(set_to_none=True)
        loss.backward()
        node.opt_rx.step()
        losses[key] = loss.item()

    return Stage1Record(rx_loss_ab=losses["a2b"], rx_loss_ba=losses["b2a"],
                        gan_g_a=rec_a.generator_loss, gan_d_a=rec_a.discriminator_loss,
                        gan_g_b=rec_b.generator_loss, gan_d_b=rec_b.discriminator_loss)


def stage2_step(run: TrainRun, batch: torch.Tensor, node: Node,
                surr: ChannelSurrogate, z_stream: torch.Generator,
                snr_db: float) -> float:
    """Local stage: transmitter update through the frozen surrogate."""
    before = (run.audit_ab.forward_payload_count, run.audit_ba.forward_payload_count)
    with frozen(node.channel_decoder, node.semantic_decoder,
                surr.generator, surr.disc_convs, surr.disc_head):
        x = node.encode(batch)
        y_hat = surr.generate(ConditionInput(x, snr_db, z_stream))
        recon = node.decode(y_hat)
        loss = torch.nn.functional.mse_loss(recon, batch.to(recon.dtype))
        if loss.requires_grad:
            node.opt_tx.zero_grad(set_to_none=True)
            loss.backward()
            node.opt_tx.step()
        # A pilot-blind surrogate passes no transmitter gradient; the
        # update is exactly zero, so the step degenerates to a no-op.
    after = (run.audit_ab.forward_payload_count, run.audit_ba.forward_payload_count)
    if before != after:
        raise ContractError("stage 2 touched the physical link; it must stay local")
    return loss.item()


def jscc_step(run: TrainRun, batch: torch.Tensor, snr_db: float) -> float:
    """End-to-end baseline step: gradient flows through the channel."""
    from .channel import apply_channel
    realization = draw_realization(run, batch.shape[0], snr_db)
    node = run.node_a
    x = node.encode(batch)
    y = apply_channel(x, realization, run.noise_ab)
    recon = node.decode(y)
    loss = torch.nn.functional.mse_loss(recon, batch.to(recon.dtype))
    node.opt_tx.zero_grad(set_to_none=True)
    node.opt_rx.zero_grad(set_to_none=True)
    loss.backward()
    node.opt_tx.step()
    node.opt_rx.step()
    return loss.item()


def _set_lr(run: TrainRun, lr: float) -> None:
    run.node_a.set_lr(lr)
    run.node_b.set_lr(lr)
    for surr in (run.surrogate_a, run.surrogate_b):
        if surr is not None:
            surr.set_lr(lr)


def train_batch(run: TrainRun, batch: torch.Tensor) -> dict:
    """One global step of whichever system the run is configured for."""
    cfg = run.cfg
    lo, hi = cfg.train_snr_range_db
    snr_db = float(run.snr_stream.uniform(lo, hi))
    lr = lr_at(cfg, run.step)
    _set_lr(run, lr)

    rows: list[LogRow] = []
    if cfg.system_kind == "jscc":
        loss = jscc_step(run, batch, snr_db)
        recon_losses = {"a2b": loss}
        rows.append(LogRow(run.epoch, run.step, "jscc", "a2b", loss,
                           None, None, snr_db, lr, None))
    else:
        rec = stage1_step(run, batch, snr_db)
        snr2 = float(run.stage2_snr_stream.uniform(lo, hi))
        loss2_a = stage2_step(run, batch, run.node_a, run.surrogate_a,
                              run.stage2_z_a, snr2)
        loss2_b = stage2_step(run, batch, run.node_b, run.surrogate_b,
                              run.stage2_z_b, snr2)
        recon_losses = {"a2b": rec.rx_loss_ab, "b2a": rec.rx_loss_ba,
                        "tx_a": loss2_a, "tx_b": loss2_b}
        fwd = {"a2b": run.audit_ab.forward_payload_count,
               "b2a": run.audit_ba.forward_payload_count}
        rows += [
            LogRow(run.epoch, run.step, "stage1_rx", "a2b", rec.rx_loss_ab,
                   None, None, snr_db, lr, fwd["a2b"]),
            LogRow(run.epoch, run.step, "stage1_rx", "b2a", rec.rx_loss_ba,
                   None, None, snr_db, lr, fwd["b2a"]),
            LogRow(run.epoch, run.step, "gan_g", "a2b", rec.gan_g_b,
                   None, None, snr_db, lr, None),
            LogRow(run.epoch, run.step, "gan_g", "b2a", rec.gan_g_a,
                   None, None, snr_db, lr, None),
            LogRow(run.epoch, run.step, "gan_d", "a2b", rec.gan_d_b,
                   None, None, snr_db, lr, None),
            LogRow(run.epoch, run.step, "gan_d", "b2a", rec.gan_d_a,
                   None, None, snr_db, lr, None),
            LogRow(run.epoch, run.step, "stage2_tx", "a2b", loss2_a,
                   None, None, snr2, lr, fwd["a2b"]),
            LogRow(run.epoch, run.step, "stage2_tx", "b2a", loss2_b,
                   None, None, snr2, lr, fwd["b2a"]),
        ]
    run.rows += rows
    run.step += 1
    _update_divergence(run, recon_losses)
    return recon_losses


def _update_divergence(run: TrainRun, losses: dict) -> None:
    total = sum(losses.values())
    finite = math.isfinite(total)
    bad = not finite
    if finite:
        if run.best_loss is not None and total > DIVERGENCE_FACTOR * run.best_loss:
            bad = True
        run.best_loss = total if run.best_loss is None else min(run.best_loss, total)
    run.bad_streak = run.bad_streak + 1 if bad else 0
    if run.bad_streak >= DIVERGENCE_STREAK:
        raise TrainingDivergedError(
            f"loss was non-finite or regressed >{DIVERGENCE_FACTOR}x for "
            f"{run.bad_streak} consecutive steps (step {run.step})",
            last_good_checkpoint=list(run.last_checkpoints))


def _epoch_eval(run: TrainRun, epoch: int) -> dict:
    cfg = run.cfg
    count = min(cfg.epoch_eval_images, run.dataset.test_images.shape[0])
    images = run.dataset.test_images[:count]
    table = evaluate_sweep(
        run.node_a, run.node_b, images,
        eval_channel=cfg.channel_kind, snr_list=[cfg.epoch_eval_snr_db],
        eval_seed=stream_seed(cfg.seed, "epoch-eval"),
        directions=run.directions(), system_kind=cfg.system_kind,
        train_channel=cfg.channel_kind)
    out = {}
    for direction in run.directions() + ("avg",):
        row = table.single(direction=direction, snr_db=cfg.epoch_eval_snr_db)
        out[direction] = (row.psnr_db, row.ssim)
    return out


def run_epoch(run: TrainRun, epoch: int, log=None) -> None:
    cfg = run.cfg
    run.epoch = epoch
    schedule = batch_schedule(run.dataset, cfg.seed, cfg.batch_size, epoch,
                              split="train", subset=cfg.train_subset)
    if len(schedule) == 0:
        available = run.dataset.train_images.shape[0]
        if cfg.train_subset > 0:
            available = min(available, cfg.train_subset)
        raise ValidationError(
            f"batch size {cfg.batch_size} exceeds the {available} available training images")
    sums: dict = {}
    for batch in schedule:
        losses = train_batch(run, batch)
        for key, value in losses.items():
            sums[key] = sums.get(key, 0.0) + value
    means = {k: v / len(schedule) for k, v in sums.items()}

    lr = lr_at(cfg, run.step)
    fwd = {"a2b": run.audit_ab.forward_payload_count,
           "b2a": run.audit_ba.forward_payload_count}
    eval_scores = _epoch_eval(run, epoch) if cfg.epoch_eval_images > 0 else {}
    for direction in run.directions():
        psnr_db, ssim_val = eval_scores.get(direction, (None, None))
        run.rows.append(LogRow(epoch, run.step, "epoch", direction,
                               means.get(direction), psnr_db, ssim_val,
                               cfg.epoch_eval_snr_db, lr, fwd[direction]))
    psnr_db, ssim_val = eval_scores.get("avg", (None, None))
    avg_loss = float(np.mean([means[d] for d in run.directions()]))
    run.rows.append(LogRow(epoch, run.step, "epoch", "avg", avg_loss,
                           psnr_db, ssim_val, cfg.epoch_eval_snr_db, lr,
                           fwd["a2b"] + fwd["b2a"]))

    if run.out_dir is not None:
        _write_epoch_artifacts(run, epoch)
    if log is not None:
        scores = eval_scores.get("avg", (None, None))
        log(f"epoch {epoch}: loss {avg_loss:.5f}"
            + (f" psnr {scores[0]:.2f} ssim {scores[1]:.4f}" if scores[0] is not None else ""))


def _write_epoch_artifacts(run: TrainRun, epoch: int) -> None:
    out = run.out_dir
    write_log_csv(out / "metrics.csv", run.rows)
    (out / "audits.json").write_text(
        json.dumps({"epoch": epoch, "links": run.audits()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    ckpts = []
    nodes = [("A", run.node_a, run.surrogate_a)]
    if run.two_way:
        nodes.append(("B", run.node_b, run.surrogate_b))
    for name, node, surr in nodes:
        path = out / name / f"{epoch}.ckpt"
        save_node_checkpoint(path, node, epoch, run.config_digest, surrogate=surr)
        ckpts.append(str(path))
    run.last_checkpoints = ckpts


def write_run_config(run: TrainRun, run_id: str) -> None:
    payload = {
        "run_id": run_id,
        "config": run.cfg.to_dict(),
        "config_hash": run.config_digest,
        "dataset_checksum": run.dataset.checksum,
        "code_version": code_version(),
    }
    (run.out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_system(cfg: ExperimentConfig, dataset: Dataset, out_dir=None,
                 run_id: str = "run", arch: NetArch | None = None,
                 log=None) -> TrainRun:
    """Train one system end to end and return the live run."""
    run = init_run(cfg, dataset, arch=arch, out_dir=out_dir)
    if run.out_dir is not None:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(run, run_id)
    for epoch in range(1, cfg.epochs + 1):
        run_epoch(run, epoch, log=log)
    return run


def weight_reciprocity_report(run: TrainRun) -> dict:
    """Max absolute elementwise difference between the two nodes' full
    weight vectors, per component and overall. Zero means bitwise equal."""
    if not run.two_way:
        raise ContractError("reciprocity is defined for two-node systems only")
    pairs = list(zip(run.node_a.nets().items(),
                     run.node_b.nets().values()))
    pairs = [(name, mod_a, mod_b) for (name, mod_a), mod_b in pairs]
    pairs += [
        ("surrogate_generator", run.surrogate_a.generator, run.surrogate_b.generator),
        ("surrogate_disc_convs", run.surrogate_a.disc_convs, run.surrogate_b.disc_convs),
        ("surrogate_disc_head", run.surrogate_a.disc_head, run.surrogate_b.disc_head),
    ]
    per_net = {}
    with torch.no_grad():
        for name, mod_a, mod_b in pairs:
            diffs = [float((pa - pb).abs().max())
                     for pa, pb in zip(mod_a.parameters(), mod_b.parameters())]
            per_net[name] = max(diffs)
    return {"max_abs_diff": max(per_net.values()), "per_net": per_net,
            "audits": run.audits()}
