#!/usr/bin/env python3
"""Train the forecasting model, quantize it, and run integer-only inference."""

import dataclasses

import numpy as np

from mixprec import (
    BitwidthCombination,
    ModelConfig,
    TrainConfig,
    forward_float,
    forward_integer,
    init,
    quantize_model,
    train,
    train_qat,
)
from mixprec.data import bundled_synthetic_csv, ingest, rmse, window

# The bundled synthetic series has two periodic features plus the target.
series = ingest(bundled_synthetic_csv(), target_column="target")
dataset = window(series, n=12, split=0.1)
print(f"{dataset.train_count} training pairs, {len(dataset.test_X)} test pairs")

config = ModelConfig(seq_len=12, input_dim=3, d_model=16)
cfg = TrainConfig(epochs=20, patience=20, batch_size=256, lr=0.002, seed=42)

model, report = train(init(config, 42), dataset, cfg)
print(f"float training: best epoch {report.best_epoch}, val loss {report.best_val_loss:.5f}")
pred, _ = forward_float(model, dataset.test_X)
float_rmse = rmse(pred[:, 0], dataset.test_y, dataset)
print(f"float RMSE on the test split: {float_rmse:.4f}")

# Post-training quantization: calibrate activation grids on training windows,
# then run the integer-only path.
for bits in (8, 6, 4):
    combo = BitwidthCombination.uniform(bits)
    qm = quantize_model(model, combo, calibration_data=dataset.train_X[-256:])
    pred_q = forward_integer(qm, qm.quantize_input(dataset.test_X))
    q_rmse = rmse(pred_q[:, 0], dataset.test_y, dataset)
    print(f"PTQ uniform {bits}-bit integer RMSE: {q_rmse:.4f} ({q_rmse / float_rmse:.2f}x float)")

# Quantization-aware training simulates the integer grids during training
# (straight-through gradients) and tracks activation ranges by moving
# average; those frozen ranges then calibrate the final integer model.
combo = BitwidthCombination.parse("8,8,6,8,6,4,8,8,8,8")
qat_cfg = dataclasses.replace(cfg, qat=combo)
qat_model, qat_report, ranges = train_qat(init(config, 42), dataset, qat_cfg)
qm = quantize_model(qat_model, combo, ranges=ranges)
pred_q = forward_integer(qm, qm.quantize_input(dataset.test_X))
q_rmse = rmse(pred_q[:, 0], dataset.test_y, dataset)
print(f"QAT {combo} integer RMSE: {q_rmse:.4f} ({q_rmse / float_rmse:.2f}x float)")

# The integer path is exactly reproducible: same inputs, same bits out.
again = forward_integer(qm, qm.quantize_input(dataset.test_X))
print("integer inference bit-identical across runs:", np.array_equal(pred_q, again))
