"""Subject-conditioned video generation at desk scale.

A rectified-flow diffusion transformer over toy video latents, conditioned
on text prompts and reference images of the subjects that must appear.
Everything runs on a small float64 autodiff substrate so training and
sampling are bit-reproducible per seed.
"""

__version__ = "0.1.0"
