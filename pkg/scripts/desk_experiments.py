"""Run every analysis at desk scale and write the reports to one directory.

    python3 scripts/desk_experiments.py --out runs/desk --steps 2000

Produces snr_{linear,cosine}.csv, recon.csv, transfer.csv, switch.csv,
loss_dynamics.csv (each with a .manifest sidecar), the trained model
containers and a sample sheet. About 5 minutes on one CPU core.
"""

import argparse
import time
from pathlib import Path

import torch

from daedkit import analysis as A
from daedkit import diffusion as D
from daedkit import schedule as S
from daedkit import training as TR
from daedkit.daed import save_ddgm
from daedkit.data import DatasetSpec, export_images, gen_synthetic
from daedkit.metrics import gaussian_frechet
from daedkit.network import build_unet
from daedkit.numerics import Rng


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--T", type=int, default=50)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--dae-steps", type=int, default=1000)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def log(msg):
        print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", flush=True)

    train = gen_synthetic(DatasetSpec("synthetic:blobs", count=2048)).tensor
    blobs = gen_synthetic(DatasetSpec("synthetic:blobs", count=256, split="eval")).tensor
    stripes = gen_synthetic(DatasetSpec("synthetic:stripes", count=256, split="eval")).tensor
    s = S.build_linear_scaled(args.T)
    kernel = D.ReverseKernelConfig("beta")

    for name, sched in (("linear", S.build_linear(1000)), ("cosine", S.build_cosine(1000))):
        rep = A.snr_report(sched, train, "synthetic:blobs/train")
        rep.to_csv(out / f"snr_{name}.csv")
        log(f"snr {name}: zero crossing at {rep.metadata['zero_crossing_fraction']:.3f} T")

    net = build_unet(seed=1)
    state = TR.train_ddgm(TR.TrainConfig(steps=args.steps), s, net, train, Rng(0))
    save_ddgm(out / "ddgm_simple.ckpt", s, net)
    state.write_log(out / "ddgm_simple.log.csv")
    log(f"simple DDGM: running loss {state.running_loss(100, end=100):.4f} -> {state.running_loss(100):.4f}")
    samples = D.ancestral_sample(s, kernel, net, (256, 1, 16, 16), Rng(9))
    export_images(samples[:64], out, sheet=True, prefix="ddgm_samples")
    log(f"simple DDGM: Frechet proxy vs held-out {gaussian_frechet(samples, blobs):.3f}")

    vnet = build_unet(seed=2)
    vstate = TR.train_ddgm(TR.TrainConfig(objective="vlb", steps=args.steps), s, vnet, train, Rng(1))
    dyn = A.loss_dynamics_report(vstate.ledger, since=0.5)
    dyn.to_csv(out / "loss_dynamics.csv")
    log(f"VLB DDGM: head 10% share {dyn.metadata['head_10pct_share']:.3f}, "
        f"step-1 share {dyn.metadata['first_step_share']:.3f}")

    rec = A.recon_sweep(s, kernel, net, blobs[:128], t_max_fraction=0.4, seed=3, dataset_id="blobs/eval")
    rec.to_csv(out / "recon.csv")
    log(f"recon: MAE nondecreasing={A.mae_nondecreasing(rec)}, "
        f"MAE>0.1 from t={rec.metadata['first_step_mae_above_0.1']}")

    dae = build_unet(kind="dae", time_dim=0, seed=3)
    TR.train_dae(TR.TrainConfig(steps=args.dae_steps), dae, train, Rng(4), 0.1)
    tr = A.transfer_recon(s, kernel, net, {"blobs": blobs, "stripes": stripes}, 0.1, 7, dae)
    tr.to_csv(out / "transfer.csv")
    for r in tr.rows:
        log(f"transfer {r[0]:8s} {r[1]}: MAE {r[4]:.4f}")

    sw = A.switch_sweep(s, net, TR.TrainConfig(steps=args.dae_steps // 2), [0.001, 0.025, 0.1, 0.2],
                        train, blobs, seed=5)
    sw.to_csv(out / "switch.csv")
    for r in sw.rows:
        log(f"switch beta1={r[2]:.4f} (k={r[1]}, log-SNR {r[4]:.2f}): Frechet {r[5]:.3f}")
    log(f"reports written to {out}")


if __name__ == "__main__":
    main()
