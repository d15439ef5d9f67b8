"""Train all five variants on a small phantom set and print the comparison table.

    python demos/desk_comparison.py [workdir] [epochs]

Uses the same settings as the acceptance run. Expect 2-6 minutes per variant on
one core at 30 epochs.
"""
import logging
import sys
from pathlib import Path

from mfpnet.experiment import desk_table
from mfpnet.trainer import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

work = Path(sys.argv[1] if len(sys.argv) > 1 else "desk")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
cfg = TrainConfig(base_channels=8, batch_size=8, epochs=epochs, seed=0, threads=4)
table = desk_table(work / "data", work / "runs", config=cfg, cases=12, dims=(16, 64, 64))

print(table.to_csv())
for name, r in table.results.items():
    last = r.log.records[-1]
    print(f"{name:9s} {r.params:>9,d} params  final loss {last.train_loss:.3f}  "
          f"test Dice {r.mean_dice:.3f}  {r.train_seconds / 60:.1f} min")
