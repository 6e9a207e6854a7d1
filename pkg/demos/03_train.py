"""Train the fusion model on a small synthetic corpus and save a checkpoint.

Sizes are kept small so this finishes in a few seconds; raise n,
image_size and max_epochs for a stronger model.
"""

import sys
import tempfile
from pathlib import Path

from aqfusion import ModelConfig, TrainConfig, fit, generate_synthetic, stratified_split

corpus = stratified_split(generate_synthetic(600, image_size=32, seed=42))
model = ModelConfig(image_size=32)
config = TrainConfig(max_epochs=15, patience=5, batch_size=16, lr=2e-3)


def report(epoch, params, rec):
    print(f"epoch {epoch:2d}  lr {rec['lr']:.2e}  train {rec['train_loss']:9.2f}  "
          f"val RMSE {rec['val_rmse']:7.2f}  val acc {rec['val_acc']:.2f}")


ckpt = fit(corpus, model, config, on_epoch_end=report)
print(f"kept epoch {ckpt.epoch} (val loss {ckpt.best_val_loss:.2f})")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="aqfusion_train_"))
path = ckpt.save(out / "checkpoint.bin")
print(f"saved {path}")
