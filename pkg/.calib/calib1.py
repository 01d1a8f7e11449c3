import time, numpy as np
from previewlab.diffusion import DiffusionModel, NoiseSchedule, train_diffusion, sample_ancestral, save_checkpoint
from previewlab.dit import DiTConfig
from previewlab.distill import distill_consistency, sample_onestep, save_consistency
from previewlab.decoder import ToyLossConfig, train_toy_mb, toy_mb_branch_samples, save_decoder
from previewlab.metrics import dot_count_report
import previewlab.worlds as W

for variant in ["motion_only", "motion_position"]:
    t_start = time.time()
    videos = W.gen_dot_dataset(W.DotSpec(variant=variant))
    cfg = DiTConfig(frames=4, height=7, width=7, channels=1, dim=64, n_blocks=4, heads=4)
    m = DiffusionModel(cfg, NoiseSchedule.linear(1000), seed=0)
    train_diffusion(m, videos, 1200, 1e-3, 0, batch=8)
    losses = train_diffusion(m, videos, 500, 3e-4, 10, batch=8)
    save_checkpoint(f".calib/{variant}/dit", m)
    t_train = time.time()
    print(f"[{variant}] trained tail={np.mean(losses[-50:]):.4f} ({t_train-t_start:.0f}s)", flush=True)
    s1k, x0tr = sample_ancestral(m, 1000, 123, 64, capture_x0=True)
    r1k = dot_count_report(s1k)
    rprev = dot_count_report(x0tr[800])
    s20, _ = sample_ancestral(m, 20, 123, 64)
    r20 = dot_count_report(s20)
    print(f"[{variant}] DDPM-1K {r1k.mean:.2f}/{r1k.std:.2f}  200Prev {rprev.mean:.2f}/{rprev.std:.2f}  DDPM-20 {r20.mean:.2f}/{r20.std:.2f} ({time.time()-t_train:.0f}s)", flush=True)
    t_cd = time.time()
    student, cdl = distill_consistency(m, videos, 400, 1e-3, 0, batch=8)
    save_consistency(f".calib/{variant}/cd", student)
    cd_samples = sample_onestep(student, 123, 64)
    rcd = dot_count_report(cd_samples)
    print(f"[{variant}] CD tail={np.mean(cdl[-50:]):.4f} 1-NFE {rcd.mean:.2f}/{rcd.std:.2f} ({time.time()-t_cd:.0f}s)", flush=True)
    t_mb = time.time()
    mb, mbl = train_toy_mb(m, videos, 4, 350, 2e-3, 0, batch=6)
    save_decoder(f".calib/{variant}/toy_mb", mb, extra={"tap_block": 2})
    bs = toy_mb_branch_samples(m, mb, 123, 64)
    reps = [dot_count_report(bs[:, i]) for i in range(4)]
    bmean = np.mean([r.mean for r in reps]); bstd = np.mean([r.std for r in reps])
    exact4 = np.mean([c == 4 for r in reps for c in r.counts])
    print(f"[{variant}] MB tail={np.mean(mbl[-50:]):.4f} branch-avg {bmean:.2f}/{bstd:.2f} frac==4 {exact4:.2f} ({time.time()-t_mb:.0f}s)", flush=True)
    print(f"[{variant}] TOTAL {time.time()-t_start:.0f}s", flush=True)
