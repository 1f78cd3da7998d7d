"""Camera pose regression from single images, trained on rendered synthetic scenes."""

__version__ = "0.1.0"
