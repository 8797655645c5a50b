"""CatNet music source separation: differentiable STFT, UNet/WavUNet branches, mix-audio training."""

__version__ = "0.1.0"
