"""latentplan: goal-conditioned control by gradient-descent planning in a
learned latent space, trained end-to-end from demonstrations, with the
learned latent metric reusable as a dense reward for reinforcement learning.
"""

__version__ = "0.1.0"
