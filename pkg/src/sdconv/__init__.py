from sdconv.kernels import BACKEND
