"""Coupled-flow imitation learning at desk scale.

Importing the package switches JAX to 64-bit floats. The legacy XLA CPU
runtime is requested because its per-op overhead is much lower for the
tiny networks used here; an explicit ``XLA_FLAGS`` setting wins.
"""

import os

if "xla_cpu_use_thunk_runtime" not in os.environ.get("XLA_FLAGS", ""):
    os.environ["XLA_FLAGS"] = (
        os.environ.get("XLA_FLAGS", "") + " --xla_cpu_use_thunk_runtime=false"
    ).strip()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
