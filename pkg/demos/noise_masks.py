"""Gradient noise fields and the masks cut from them.

Run with ``python demos/noise_masks.py [out_dir]``; writes a few PNGs.
"""

import sys
from pathlib import Path

import numpy as np

from grain_ad import noisegen
from grain_ad.image import write_mask_png, write_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/noise")
out.mkdir(parents=True, exist_ok=True)

# A field is zero on its lattice and stays inside [-1, 1].
field = noisegen.perlin_field(256, 256, grid_period=16, seed=7)
print("value at lattice point (0, 0):", field.values[0, 0])
print("range: [%.3f, %.3f]" % (field.values.min(), field.values.max()))
write_png(out / "field.png", (field.values + 1) / 2)

# Thresholding gives the raw mask; about a tenth of the image at 0.4.
m_b = noisegen.binary_mask_from_field(field, 0.4)
print("raw mask area: %.1f%%" % (100 * m_b.mean()))
write_mask_png(out / "mask_raw.png", m_b)

# Restrict to an elliptical foreground and cap the area at r = 0.2 of it.
yy, xx = np.mgrid[:256, :256]
fg = ((yy - 128) / 70.0) ** 2 + ((xx - 128) / 110.0) ** 2 < 1
for r in (0.2, 0.05, 0.0):
    m = noisegen.constrain_mask(m_b, noisegen.MaskConstraint(r, fg), field)
    print("r = %.2f -> mask covers %.3f of the foreground" % (r, m.sum() / fg.sum()))
    write_mask_png(out / f"mask_r{r:.2f}.png", m)

# More octaves add finer detail and keep the base lattice at zero.
fine = noisegen.perlin_field(256, 256, 16, seed=7, octaves=3)
write_png(out / "field_3oct.png", (fine.values + 1) / 2)
print("wrote", out)
