# %% [markdown]
# # Where does the detector look?
#
# Smooth-GradCAM++ gives a heat map per detected instance.  Thresholding it at
# nine falling levels yields nested masks that always contain the instance.
# Keeping only the inside of a mask at the first stage shows how much of the
# surrounding context the detection needs.

# %%
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from ctxbias import cam
from ctxbias import interventions as iv
from ctxbias.cli.config import PINNED_SCENE
from ctxbias.detector import TinyDetector, TrainConfig, train
from ctxbias.synthbench import generate, scene_spec_from_dict

spec = scene_spec_from_dict(dict(PINNED_SCENE, seed=0))
ckpt = Path("runs/notebooks/detector")
if (ckpt / "index.json").exists():
    model = TinyDetector.load(ckpt)
else:
    model, _ = train(generate(spec, 500, "source"), TrainConfig(epochs=25, learning_rate=2e-3))
    model.save(ckpt)
data = generate(spec, 40, "source")

# %%
base = iv.baseline_true_positives(model, data)
idx, tps = next((i, t) for i, t in enumerate(base) if t)
iid, det = sorted(tps.items())[0]
img = data.images[idx]
heat = cam.smooth_gradcam(model, img.pixels, det, "stage4", n_samples=8, min_confidence=0.5)
mask = next(a.instance_mask for a in img.instances if a.instance_id == iid)
ladder = cam.bin_ladder(heat, mask)

fig, axes = plt.subplots(1, 4, figsize=(10, 3))
axes[0].imshow(img.pixels)
axes[1].imshow(heat.heat)
for ax, k in zip(axes[2:], (1, 9)):
    ax.imshow(ladder[k - 1].mask)
    ax.set_title(f"bin {k}")
for ax in axes:
    ax.axis("off")

# %%
print(cam.hit_ratio([b.mask for b in ladder], [mask] * 9))

# %% [markdown]
# Drop rate per bin: small CAM regions lose most detections, the full image
# loses none.

# %%
res = iv.run_q2_cam_bins(model, data, bins=[1, 3, 5, 7, 9], confidence=0.6, n_samples=4)
print({k: round(v, 3) for k, v in res["per_bin"].items() if v is not None})
