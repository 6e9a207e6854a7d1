"""Score a freshly trained model, then hide sensor readings and watch it cope.

Strategy "zero" puts the training mean in place of a missing reading.
Strategy "head" uses the model's own image-based estimate of it.
"""

from aqfusion import ModelConfig, TrainConfig, evaluate, fit, generate_synthetic, robustness_sweep, stratified_split
from aqfusion.data import by_split, to_arrays

corpus = stratified_split(generate_synthetic(600, image_size=32, seed=42))
ckpt = fit(corpus, ModelConfig(image_size=32), TrainConfig(max_epochs=15, patience=5, batch_size=16, lr=2e-3))
test = to_arrays(by_split(corpus, "test"), ckpt.scalers)

report, _ = evaluate(ckpt.params, ckpt.model_config, test, ckpt.scalers, bootstrap=500)
print(f"test RMSE {report.rmse:.2f}  95% CI [{report.rmse_ci[0]:.2f}, {report.rmse_ci[1]:.2f}]")
print(f"accuracy {report.accuracy:.3f}  macro AUC {report.macro_auc:.3f}")
print(report.se_table())

print(" k   zero-fill RMSE   head-fill RMSE")
rows = robustness_sweep(ckpt.params, ckpt.model_config, test, ckpt.scalers, draws=3)
by_k = {}
for r in rows:
    by_k.setdefault(r.k, {})[r.strategy] = r.rmse
for k, v in sorted(by_k.items()):
    print(f"{k:2d}   {v['zero']:14.2f}   {v['head']:14.2f}")
