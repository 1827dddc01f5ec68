"""Fit the desk-sized model to one synthetic triplet and watch PSNR climb.

Runs for about a minute and a half on a laptop CPU.
"""

from tsain.data import synth_triplet, to_tensor
from tsain.losses import LossWeights, total_loss
from tsain.metrics import psnr, quantize
from tsain.model import ModelConfig, count_parameters, init_params, tsain_forward
from tsain.numerics import adam_step, no_grad

triplet, _ = synth_triplet(0, 32, motion=(0.0, 2.0))
i0, i1, i2 = (to_tensor([f]) for f in triplet.frames)
params = init_params(ModelConfig.desk(), seed=0)
print(f"model has {count_parameters(params)} parameters")
print(f"copying frame 0 scores {psnr(triplet.frames[0], triplet.frames[1]):.2f} dB")

for step in range(1, 501):
    loss = total_loss(tsain_forward(i0, i2, params), i1, None, LossWeights(1.0, 0.0, 0.0))
    loss.backward()
    adam_step(params.store, 1e-3)
    if step % 100 == 0:
        with no_grad():
            pred = quantize(tsain_forward(i0, i2, params))
        print(f"step {step:3d}  loss {loss.item():.5f}  PSNR {psnr(pred, triplet.frames[1]):.2f} dB")
