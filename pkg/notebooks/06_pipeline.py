# %% [markdown]
# # The full pipeline from the command line
#
# Each stage reads the previous stage's artifacts from one output directory.
# This notebook runs a reduced configuration in about a minute; dropping
# `--config` runs the pinned benchmark instead (a few minutes on one core).

# %%
import json
import subprocess
from pathlib import Path

import yaml

out = Path("runs/notebook_small")
cfg = Path("runs/notebook_small.yaml")
cfg.parent.mkdir(parents=True, exist_ok=True)
cfg.write_text(yaml.safe_dump({
    "data": {"n_train": 250, "n_eval": 80, "n_bg_pool": 4},
    "train": {"epochs": 15, "learning_rate": 0.004},
    "q1_image": {"n_trials": 2},
    "q1_feature": {"n_trials": 3},
    "q2_cam": {"bins": [1, 5, 9], "n_samples": 2, "confidence": 0.5, "max_images": 20},
    "q3": {"n_trials": 3, "n_resamples": 3, "min_support": 1, "min_features": 2},
}))

# %%
for cmd in ("synth", "train", "eval", "q1-image", "q1-feature", "q2-cam",
            "q3-gradient", "q3-crossdomain", "report"):
    code = subprocess.run(["ctxbias", cmd, "--config", str(cfg), "--output-dir", str(out)]).returncode
    print(cmd, code)

# %%
report = json.loads((out / "report.json").read_text())
for name, rows in report["tables"].items():
    print(name)
    for row in rows[:4]:
        print("   ", row)
print(report["plots"])
