"""camsplat: camera-guided latent video diffusion with feed-forward
Gaussian-splat reconstruction, sized for a single CPU."""

__version__ = "0.1.0"
