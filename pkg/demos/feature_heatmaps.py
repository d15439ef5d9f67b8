"""Quick look at what the reuse branches and the BiCA junction see.

    python demos/feature_heatmaps.py <run dir> <data dir> [out dir]

Writes one PGM per tap for the middle slice of the first test case. Any image
viewer that reads netpbm shows them.
"""
import sys
from pathlib import Path

import numpy as np

from mfpnet.heatmap import export_heatmap
from mfpnet.model import forward
from mfpnet.phantom import load_case, normalize, read_manifest
from mfpnet.tensor import Tensor
from mfpnet.trainer import load_checkpoint

run, data = Path(sys.argv[1]), Path(sys.argv[2])
out = Path(sys.argv[3] if len(sys.argv) > 3 else "heatmaps")
out.mkdir(parents=True, exist_ok=True)

ck = load_checkpoint(run / "best.ckpt")
case = read_manifest(data / "manifest.csv")["test"][0]
image, _ = load_case(data, case)
z = image.shape[0] // 2

taps = {}
forward(ck.spec, ck.params, Tensor(normalize(image[z])[None, None]), taps=taps)
for name, t in sorted(taps.items()):
    fmap = t.data[0]
    export_heatmap(np.asarray(fmap.mean(axis=0)), out / f"{case}_{name}.pgm")
    print(f"{name:12s} {fmap.shape[0]:4d} ch  {fmap.shape[1]}x{fmap.shape[2]}")
