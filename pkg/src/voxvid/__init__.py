"""voxvid: a self-contained latent diffusion toolkit for audio-driven
portrait video, built on a minimal numpy autodiff core.

Subpackages cover the tensor library (:mod:`voxvid.tensor`), diffusion math
(:mod:`voxvid.diffusion`), the spatio-temporal transformer backbone
(:mod:`voxvid.backbone`), condition fusion (:mod:`voxvid.fusion`), audio
features (:mod:`voxvid.audio`), latent codecs (:mod:`voxvid.codec`),
training (:mod:`voxvid.training`), metrics (:mod:`voxvid.metrics`), and the
run pipeline plus CLI (:mod:`voxvid.pipeline`, :mod:`voxvid.cli`).
"""

__version__ = "0.1.0"
