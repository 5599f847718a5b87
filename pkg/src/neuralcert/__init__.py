"""neuralcert: learned certificate functions for control-affine systems.

Learns Lyapunov / control-Lyapunov / control-barrier functions and
contraction metrics as small networks, derives QP controllers from them,
simulates the closed loop, and checks the certificates by sampling,
Lipschitz gridding, and interval bound propagation.
"""

__version__ = "0.1.0"
