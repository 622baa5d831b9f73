"""Mixed-precision 4/8-bit quantization toolkit with a runtime-adjustable
4-bit channel ratio: channel-wise quantization, effective-bit extraction,
evolutionary channel selection, bit-exact mixed kernels, layout
optimization, and an inference-serving simulator."""

__version__ = "0.1.0"
