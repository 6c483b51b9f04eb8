"""Generative goal rewards for image-based reinforcement learning on a small grid world.

A video diffusion model proposes a goal clip, a frame scorer picks the goal
image, and a forward-backward representation turns it into a dense reward
that is mixed with the environment reward on a fixed interval.
"""

__version__ = "0.1.0"
