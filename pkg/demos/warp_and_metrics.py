"""Small sanity tour: a flow warp shifting a ramp, and Dice/MSD on a shifted cube.

    python demos/warp_and_metrics.py
"""
import numpy as np

from mfpnet import bica
from mfpnet.metrics import LabelVolume, dice_volumetric, msd
from mfpnet.tensor import Tensor

ramp = np.arange(20.0).reshape(1, 1, 4, 5)
flow = np.zeros((1, 4, 5, 2))
flow[..., 1] = 2.0 / 4  # one pixel in normalized units
print("ramp\n", ramp[0, 0])
print("sampled one column to the right\n", bica.flow_warp(Tensor(ramp), Tensor(flow)).data[0, 0])

a = np.zeros((12, 12, 12), np.uint8)
a[3:9, 3:9, 3:9] = 1
b = np.roll(a, 2, axis=2)
A, B = LabelVolume(a, (3.0, 1.5, 1.5)), LabelVolume(b, (3.0, 1.5, 1.5))
print(f"cube shifted by 2 voxels: Dice {dice_volumetric(A, B, 1):.3f}, MSD {msd(A, B, 1):.3f} mm")
