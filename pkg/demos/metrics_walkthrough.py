"""Image-quality metrics on a few hand-made cases."""

import numpy as np

from tsain.metrics import interpolation_error, psnr, ssim

rng = np.random.default_rng(1)
img = rng.integers(0, 200, size=(64, 64), dtype=np.uint8)

print("identical images:", psnr(img, img), ssim(img, img), interpolation_error(img, img))
brighter = img + 16
print(f"uniform +16 offset: PSNR {psnr(img, brighter):.4f} dB, IE {interpolation_error(img, brighter)}, "
      f"SSIM {ssim(img, brighter):.4f}")
noisy = np.clip(img + rng.normal(0, 8, img.shape), 0, 255).astype(np.uint8)
print(f"gaussian noise s=8: PSNR {psnr(img, noisy):.4f} dB, IE {interpolation_error(img, noisy):.3f}, "
      f"SSIM {ssim(img, noisy):.4f}")
