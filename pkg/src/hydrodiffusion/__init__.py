"""HydroDiffusion - diffusion-based probabilistic streamflow forecasting with S4D-FT and LSTM denoisers."""

__version__ = "1.0.0"
