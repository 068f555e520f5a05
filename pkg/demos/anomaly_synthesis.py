"""Image-level anomaly simulation on a synthetic grain kernel.

Renders a healthy kernel, pastes a texture into it under a noise mask, and
saves the ``(I_x, I_a, M'_b, I_n)`` quadruple.
"""

import sys
from pathlib import Path

import numpy as np

from grain_ad import data, imagesynth
from grain_ad.image import Image, from_uint8, write_mask_png, write_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthesis")
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(0)
r = data.render_sample(256, rng)
i_x = Image(from_uint8(r.pixels), r.foreground)

cfg = imagesynth.SynthConfig(max_area_ratio=0.2)
for k in range(4):
    res = imagesynth.synthesize_with_retries(i_x, cfg, rng)
    share = res.mask.sum() / i_x.foreground.sum()
    print(f"sample {k}: beta={res.beta:.2f}, mask covers {share:.3f} of the kernel")
    write_png(out / f"{k}_x.png", i_x.pixels)
    write_png(out / f"{k}_a.png", res.source.pixels)
    write_mask_png(out / f"{k}_mask.png", res.mask)
    write_png(out / f"{k}_n.png", res.image.pixels)

# The blend itself, on a tiny hand-made case.
x = Image(np.full((1, 2, 3), 0.2, np.float32))
a = Image(np.full((1, 2, 3), 0.8, np.float32))
blended = imagesynth.blend_anomaly(x, a, np.array([[True, False]]), beta=0.5)
print("masked pixel:", blended.pixels[0, 0, 0], "unmasked pixel:", blended.pixels[0, 1, 0])
print("wrote", out)
