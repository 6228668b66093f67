import torch

# Single-threaded math keeps floating-point reductions identical across runs.
torch.set_num_threads(1)
