"""Neural Galerkin time stepping with conserved quantities."""
import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
