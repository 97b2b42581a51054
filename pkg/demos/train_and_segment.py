"""Train a small model on synthetic scenes, then segment a larger mosaic with tiling and TTA.

Run with an argument to change the number of training steps (default 120, about a minute per 100 steps).
"""
import sys
import time

import numpy as np

from uegan import ModelConfig, TrainConfig, synth_dataset, train, validate
from uegan.inference import predict_image, select_threshold
from uegan.metrics import evaluate
from uegan.training import predict_probs

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120
data = synth_dataset(250, 64, seed=0)
train_set, val_set = data[:200], data[200:]
model = ModelConfig()


class Progress:
    def write(self, line):
        if '"step": ' in line and int(line.split('"step": ')[1].split(",")[0]) % 20 == 0:
            print(line.strip())


start = time.perf_counter()
result = train(train_set, model, train_config=TrainConfig(steps=steps), report_stream=Progress())
print(f"trained {steps} steps in {time.perf_counter() - start:.0f}s")

plain = validate(val_set, result.gen_params, model, tta=False, threshold=0.5)
tta = validate(val_set, result.gen_params, model, tta=True, threshold="auto")
print(f"validation IoU at 0.5 without TTA: {plain['iou']:.3f}")
print(f"validation IoU with TTA and auto threshold {tta['threshold']}: {tta['iou']:.3f}")

# stitch four validation scenes into a 128x128 mosaic and segment it in overlapping 64px tiles
mosaic = np.block([[val_set[0].image, val_set[1].image], [val_set[2].image, val_set[3].image]])
truth = np.block([[val_set[0].mask, val_set[1].mask], [val_set[2].mask, val_set[3].mask]])
threshold = select_threshold(predict_probs(val_set, result.gen_params, model), [s.mask for s in val_set])
probs = predict_image(mosaic[None], [result.gen_params], model, tile=64, overlap=0.5, tta=True)[0, 0]
scores = evaluate(probs >= threshold, truth)
print("mosaic:", {k: round(scores[k], 3) for k in ("iou", "relaxed_f1", "object_f1")})
