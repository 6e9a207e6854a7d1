"""Generate a synthetic hazy-scene corpus, split it, and write it to disk.

Each scene has sky, a skyline and ground.  Haze opacity follows the true
PM2.5 level, while the sensor readings carry their own noise, so the image
holds information the readings alone do not.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from aqfusion.data import (AqiClass, by_split, class_histogram, haze_opacity, load_manifest,
                           stratified_split, generate_synthetic, write_manifest)

samples = stratified_split(generate_synthetic(120, image_size=32, seed=1))

print("class histogram:")
for cls, count in zip(AqiClass, class_histogram(samples)):
    print(f"  {cls.label:<32s}{count:4d}")
for split in ("train", "val", "test"):
    print(f"{split:>5s}: {len(by_split(samples, split))} samples")

s = samples[0]
print(f"\nfirst sample {s.id}: AQI {s.aqi:.1f}, readings {np.round(s.sensors, 1)}")
print(f"opacity implied by PM2.5 100: {haze_opacity(100.0):.2f}")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="aqfusion_corpus_"))
manifest = write_manifest(samples, out)
back, report = load_manifest(manifest, image_size=32)
print(f"\nwrote {manifest}; reloaded {len(back)} samples, {report.skipped} rows skipped")
