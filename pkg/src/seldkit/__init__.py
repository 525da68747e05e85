"""Non-neural building blocks for sound event localization and detection."""

from seldkit.events import Event, cart_to_sph, sph_to_cart

__version__ = "0.1.0"

__all__ = ["Event", "cart_to_sph", "sph_to_cart", "__version__"]
