"""Full toy run: synthesize data, pretrain all networks, and compare pipeline variants.

Variants: the detector alone on blurred frames (FA), with the deblurrer but
no structure channel (FA+SMD), the full loop with predicted structure
(FA+SMD+SP), and the loop fed ground-truth structure (FA+SMD+GT). Takes
roughly fifteen minutes on one CPU core.

    python demos/toy_ablation.py
"""
import logging
import time

from fab.experiment import VARIANTS, ToyConfig, run_toy_experiment

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
start = time.perf_counter()
cfg = ToyConfig()
data, models, result = run_toy_experiment(cfg)
print(f"\ntotal time {time.perf_counter() - start:.0f} s; training seconds "
      f"{ {k: round(v) for k, v in models.seconds.items()} }")
print(f"held-out sequences: {len(data.test)}, scored frames per variant: {len(result.per_frame_nme['FA'])}\n")
print(f"{'variant':>10} {'mean NME':>9}")
for v in VARIANTS:
    print(f"{v:>10} {result.nme[v]:9.4f}")
print(f"{'sharp':>10} {result.sharp_nme:9.4f}  (detector on the sharp targets)\n")
print(f"{'input':>18} {'PSNR dB':>8} {'SSIM':>6}")
for k in result.psnr:
    print(f"{k:>18} {result.psnr[k]:8.2f} {result.ssim[k]:6.3f}")
