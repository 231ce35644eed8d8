"""Command-line entry point: ``daedkit <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis as A
from . import diffusion as D
from . import schedule as S
from .daed import (
    DaedModel,
    NoiseLevelError,
    container_kind,
    daed_sample,
    load_daed,
    load_ddgm,
    save_daed,
    save_ddgm,
)
from .data import DatasetSpec, IdxError, export_images, load_dataset, load_idx, quantize, write_idx_images
from .metrics import MetricReport
from .network import CheckpointError, Topology, build_from_topology
from .numerics import Rng
from .training import LossLedger, TrainConfig, train_daed, train_ddgm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _channels(text: str) -> tuple[int, ...]:
    return tuple(int(c) for c in text.split(","))


def _floats(text: str) -> list[float]:
    return [float(c) for c in text.split(",")]


def _dataset_spec(args, split: str = "train", source: str | None = None, count: int | None = None) -> DatasetSpec:
    src = source or args.dataset
    if src in ("blobs", "stripes"):
        src = f"synthetic:{src}"
    return DatasetSpec(source=src, size=args.size, channels=args.channels_in, count=count or args.count,
                       seed=args.data_seed, split=split)


def _add_data_flags(p):
    p.add_argument("--dataset", default="blobs", help="blobs | stripes | idx:<images>[,<labels>]")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels-in", type=int, default=1)
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--data-seed", type=int, default=0)


def _add_schedule_flags(p, default_T=50):
    p.add_argument("--schedule", "--kind", dest="schedule", choices=("linear", "cosine"), default="linear")
    p.add_argument("--T", type=int, default=default_T)
    p.add_argument("--beta-start", type=float, default=None, help="linear only; default 1e-4 scaled by 1000/T")
    p.add_argument("--beta-end", type=float, default=None, help="linear only; default 0.02 scaled by 1000/T")
    p.add_argument("--cosine-offset", type=float, default=S.DEFAULT_COSINE_OFFSET)


def _build_schedule(kind: str, T: int, args) -> S.NoiseSchedule:
    if kind == "cosine":
        return S.build_cosine(T, args.cosine_offset)
    if args.beta_start is None and args.beta_end is None:
        return S.build_linear_scaled(T)
    scale = 1000.0 / T
    start = args.beta_start if args.beta_start is not None else 1e-4 * scale
    end = args.beta_end if args.beta_end is not None else min(0.02 * scale, S.MAX_BETA)
    return S.build_linear(T, start, end)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="daedkit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=None, help="cap on torch CPU threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a diffusion model or a DAED")
    t.add_argument("--model", choices=("ddgm", "daed"), default="ddgm")
    t.add_argument("--objective", choices=("vlb", "simple"), default="simple")
    t.add_argument("--sampler", choices=("uniform", "beta_weighted"), default="uniform")
    _add_schedule_flags(t)
    t.add_argument("--beta1", type=float, default=0.1)
    t.add_argument("--T-tail", dest="T_tail", type=int, default=None, help="DAED tail length (default: T)")
    _add_data_flags(t)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--levels", type=int, default=2)
    t.add_argument("--channels", type=_channels, default=(16, 32))
    t.add_argument("--time-dim", type=int, default=32)
    t.add_argument("--dropout", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model container path")
    t.add_argument("--log", default=None, help="training log CSV (default: <out>.log.csv)")

    s = sub.add_parser("sample", help="draw samples from a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=16, help="output image side length")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sheet", action="store_true", help="tile all samples into one image")
    s.add_argument("--variance-mode", choices=("beta", "beta_tilde"), default="beta")

    a = sub.add_parser("analyze", help="analysis reports")
    asub = a.add_subparsers(dest="report", required=True, parser_class=_Parser)
    snr = asub.add_parser("snr")
    _add_schedule_flags(snr, 1000)
    _add_data_flags(snr)
    snr.add_argument("--csv", required=True)

    rec = asub.add_parser("recon")
    rec.add_argument("--ckpt", required=True)
    _add_data_flags(rec)
    rec.add_argument("--n", type=int, default=128)
    rec.add_argument("--t-max-fraction", type=float, default=0.2)
    rec.add_argument("--stride", type=int, default=1)
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--variance-mode", choices=("beta", "beta_tilde"), default="beta")
    rec.add_argument("--csv", required=True)

    tr = asub.add_parser("transfer")
    tr.add_argument("--ckpt", required=True, help="diffusion model container")
    tr.add_argument("--dae-ckpt", default=None, help="DAED container whose denoiser is compared")
    _add_data_flags(tr)
    tr.add_argument("--targets", default="blobs,stripes")
    tr.add_argument("--n", type=int, default=128)
    tr.add_argument("--beta", type=float, default=0.1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--variance-mode", choices=("beta", "beta_tilde"), default="beta")
    tr.add_argument("--csv", required=True)

    sw = asub.add_parser("switch")
    sw.add_argument("--ckpt", required=True)
    _add_data_flags(sw)
    sw.add_argument("--targets", type=_floats, default=[0.001, 0.025, 0.1, 0.2])
    sw.add_argument("--dae-steps", type=int, default=500)
    sw.add_argument("--n", type=int, default=256)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--csv", required=True)

    ld = asub.add_parser("loss-dynamics")
    ld.add_argument("--ledger", required=True, help="ledger CSV written by train")
    ld.add_argument("--csv", required=True)

    sc = sub.add_parser("schedule", help="noise schedule tools")
    scsub = sc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ex = scsub.add_parser("export")
    _add_schedule_flags(ex, 1000)
    ex.add_argument("--x0-ms", type=float, default=1.0, help="dataset mean of x0^2 for the log-SNR columns")
    ex.add_argument("--csv", default=None, help="output path (default: stdout)")

    ds = sub.add_parser("dataset", help="dataset tools")
    dsub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = dsub.add_parser("gen")
    _add_data_flags(g)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--out-dir", required=True)
    ins = dsub.add_parser("inspect")
    ins.add_argument("--images", required=True)
    ins.add_argument("--labels", default=None)
    return p


# --- ledger files ------------------------------------------------------------------------


def write_ledger(ledger: LossLedger, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        snaps = ledger.snapshots
        w.writerow(["t", "sum", "count"] + [c for f, _, _ in snaps for c in (f"sum@{f:g}", f"count@{f:g}")])
        for i in range(ledger.T):
            extra = [v for _, s, c in snaps for v in (repr(float(s[i])), int(c[i]))]
            w.writerow([i + 1, repr(float(ledger.sums[i])), int(ledger.counts[i])] + extra)
    return path


def read_ledger(path: Path) -> LossLedger:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ledger = LossLedger(len(body))
    ledger.sums = np.array([float(r[1]) for r in body])
    ledger.counts = np.array([int(r[2]) for r in body], dtype=np.int64)
    for j in range(3, len(header), 2):
        frac = float(header[j].split("@")[1])
        ledger.snapshots.append((frac, np.array([float(r[j]) for r in body]),
                                 np.array([int(r[j + 1]) for r in body], dtype=np.int64)))
    return ledger


# --- commands -----------------------------------------------------------------------------


def _topology(args, kind: str, in_channels: int) -> Topology:
    return Topology(kind=kind, levels=args.levels, channels=args.channels,
                    time_dim=args.time_dim if kind == "eps" else 0, in_channels=in_channels, dropout=args.dropout)


def cmd_train(args) -> int:
    data = load_dataset(_dataset_spec(args)).tensor
    cfg = TrainConfig(objective=args.objective, sampler=args.sampler, batch_size=args.batch, steps=args.steps,
                      lr=args.lr, weight_decay=args.weight_decay, seed=args.seed, model=args.model)
    rng = Rng(args.seed)
    eps_net = build_from_topology(_topology(args, "eps", data.shape[1]), seed=args.seed)
    out = Path(args.out)
    if args.model == "ddgm":
        s = _build_schedule(args.schedule, args.T, args)
        state = train_ddgm(cfg, s, eps_net, data, rng)
        save_ddgm(out, s, eps_net)
    else:
        tail = _build_schedule(args.schedule, args.T_tail or args.T, args)
        dae = build_from_topology(_topology(args, "dae", data.shape[1]), seed=args.seed + 1)
        state = train_daed(cfg, tail, dae, eps_net, data, rng, args.beta1)
        save_daed(out, DaedModel(args.beta1, tail, dae, eps_net))
    if not all(math.isfinite(r["loss"]) for r in state.log):
        raise NumericFailure("non-finite training loss")
    state.write_log(args.log or out.with_suffix(out.suffix + ".log.csv"))
    write_ledger(state.ledger, out.with_suffix(out.suffix + ".ledger.csv"))
    first, last = state.running_loss(100, end=min(100, len(state.log))), state.running_loss(100)
    print(f"trained {args.model} for {state.updates} updates; running loss {first:.4g} -> {last:.4g}; saved {out}")
    for e in state.events[-5:]:
        print(f"event: {e}")
    return EXIT_OK


def _load_model(path: str):
    kind = container_kind(path)
    if kind == "DDGM":
        return kind, load_ddgm(path)
    if kind == "DAED":
        return kind, load_daed(path)
    raise CheckpointError(f"{path}: container kind {kind!r} is not a model")


def cmd_sample(args) -> int:
    kind, model = _load_model(args.ckpt)
    rng = Rng(args.seed)
    kernel = D.ReverseKernelConfig(args.variance_mode)
    if kind == "DDGM":
        s, net = model
        shape = (args.n, net.topo.in_channels, args.size, args.size)
        x = D.ancestral_sample(s, kernel, net, shape, rng)
    else:
        shape = (args.n, model.dae.topo.in_channels, args.size, args.size)
        x = daed_sample(model, shape, rng, kernel)
    if not torch.isfinite(x).all():
        raise NumericFailure("non-finite samples")
    paths = export_images(x, args.out_dir, sheet=args.sheet, prefix="sample")
    print(f"wrote {len(paths)} file(s) to {args.out_dir}")
    return EXIT_OK


def _eval_data(args, source=None, n=None):
    return load_dataset(_dataset_spec(args, "eval", source, n)).tensor


def cmd_analyze(args) -> int:
    if args.report == "snr":
        s = _build_schedule(args.schedule, args.T, args)
        spec = _dataset_spec(args)
        report = A.snr_report(s, load_dataset(spec).tensor, spec.dataset_id)
    elif args.report == "recon":
        s, net = load_ddgm(args.ckpt)
        report = A.recon_sweep(s, D.ReverseKernelConfig(args.variance_mode), net, _eval_data(args, n=args.n),
                               args.t_max_fraction, args.stride, args.seed, args.dataset)
    elif args.report == "transfer":
        s, net = load_ddgm(args.ckpt)
        dae = load_daed(args.dae_ckpt).dae if args.dae_ckpt else None
        targets = {name: _eval_data(args, name, args.n) for name in args.targets.split(",")}
        report = A.transfer_recon(s, D.ReverseKernelConfig(args.variance_mode), net, targets, args.beta,
                                  args.seed, dae)
    elif args.report == "switch":
        s, net = load_ddgm(args.ckpt)
        data = load_dataset(_dataset_spec(args)).tensor
        held = _eval_data(args, n=max(args.n, 2))
        report = A.switch_sweep(s, net, TrainConfig(steps=args.dae_steps, seed=args.seed), args.targets,
                                data, held, args.seed, args.n)
    else:
        report = A.loss_dynamics_report(read_ledger(Path(args.ledger)))
    report.metadata["cli_config"] = _config_json(args)
    report.metadata["config_hash"] = MetricReport("cli", 0.0, config=vars(args)).config_hash
    report.to_csv(args.csv)
    print(f"wrote {args.report} report ({len(report.rows)} rows) to {args.csv}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    s = _build_schedule(args.schedule, args.T, args)
    if args.csv:
        S.export_csv(s, args.csv, args.x0_ms)
    else:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            sys.stdout.write(S.export_csv(s, Path(tmp) / "s.csv", args.x0_ms).read_text())
    return EXIT_OK


def cmd_dataset(args) -> int:
    if args.action == "gen":
        spec = _dataset_spec(args, args.split)
        batch = load_dataset(spec)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        q = quantize(batch.tensor.numpy())
        if q.shape[1] == 1:
            write_idx_images(out / "images.idx", q[:, 0])
        export_images(batch.tensor[:64], out, sheet=True, prefix="preview")
        print(f"generated {len(batch)} images ({spec.dataset_id}) in {out}")
    else:
        batch, labels = load_idx(args.images, args.labels)
        x = batch.tensor
        print(json.dumps({"count": len(batch), "shape": list(x.shape[1:]), "min": float(x.min()),
                          "max": float(x.max()), "mean_square": S.mean_square(x),
                          "labels": None if labels is None else int(labels.numel())}))
    return EXIT_OK


def _config_json(args) -> str:
    return json.dumps(dict(sorted(vars(args).items())), default=str)


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "analyze": cmd_analyze,
            "schedule": cmd_schedule, "dataset": cmd_dataset}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.threads:
        torch.set_num_threads(args.threads)
    print("config: " + _config_json(args), file=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, (IdxError, NoiseLevelError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def cli_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_main()
