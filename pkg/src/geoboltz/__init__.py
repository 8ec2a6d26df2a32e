"""Transport on 2-D Riemannian disks: forward solver, albedo data, recovery."""

__version__ = "0.1.0"
