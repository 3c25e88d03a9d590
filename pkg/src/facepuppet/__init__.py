"""Photo-collection face puppetry: average faces, deformation transfer and expression-dependent textures."""

__version__ = "0.1.0"
