"""Where does the model look?  Grad-CAM on probes whose haze covers one half.

Writes a grayscale map and a colour overlay for the first probe and prints
how often the hazed half receives more heatmap mass than the clear half.
"""

import sys
import tempfile
from pathlib import Path

from aqfusion import ModelConfig, TrainConfig, fit, generate_synthetic, grad_cam, stratified_split
from aqfusion.data import half_haze_probes, half_region, normalize_image, to_arrays
from aqfusion.explain import export_heatmap, half_mass

size = 32
corpus = stratified_split(generate_synthetic(600, image_size=size, seed=42))
ckpt = fit(corpus, ModelConfig(image_size=size), TrainConfig(max_epochs=15, patience=5, batch_size=16, lr=2e-3))

probes = half_haze_probes(20, image_size=size, half="top")
arrays = to_arrays(probes, ckpt.scalers)
region = half_region("top", size)

wins = 0
maps = []
for i, p in enumerate(probes):
    hm = grad_cam(ckpt.params, ckpt.model_config, normalize_image(arrays.images[i], ckpt.scalers),
                  arrays.sensors[i], "aqi", sample_id=p.id)
    hazed, clear = half_mass(hm.values, region)
    wins += hazed > clear
    maps.append(hm)
print(f"hazed half wins on {wins}/{len(probes)} probes")

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="aqfusion_cam_"))
pgm, ppm = export_heatmap(maps[0], probes[0].image, out)
print(f"wrote {pgm} and {ppm}")
