"""Generate the toy dataset and train the joint autoencoder + latent diffusion model.

Takes about five minutes on one core. Writes to ./toy-run/.
"""

import sys
import time

from mdemu.config import toy_config
from mdemu.data import generate_synthetic, save_dataset
from mdemu.training import train_loop

out = sys.argv[1] if len(sys.argv) > 1 else "toy-run"
cfg = toy_config(seed=0)
ds = generate_synthetic(cfg.model, cfg.data)
save_dataset(ds, f"{out}/data")
print(f"{ds.n_months} months, channels {ds.prognostic}, planted SST sensitivity {ds.planted}")


def show(e):
    if e["epoch"] == 1 or e["epoch"] % 10 == 0:
        print(f"epoch {e['epoch']:3d}  total {e['train_total']:.3f}  rec {e['train_rec']:.3f}  "
              f"diff {e['train_diff']:.3f}  kl {e['train_kl']:.2f}  val {e['val_total']:.3f}", flush=True)


t0 = time.perf_counter()
res = train_loop(ds, cfg, checkpoint_dir=f"{out}/ckpt", callback=show)
print(f"done in {time.perf_counter() - t0:.0f}s, best epoch {res.best_epoch} (val {res.best_val:.4f})")
