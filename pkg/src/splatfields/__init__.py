"""splatfields: continuous-field representation, generative modeling, and
discretization of 3D Gaussian splats.

A splat is disentangled into three fields over [-1, 1]^3 — Gaussian center
probability, color, and transform — fitted either directly per shape or
through a latent VAE paired with a DDPM over the latent space. Generated
fields are discretized back into splats of any requested Gaussian count by
octree-guided sampling plus gradient refinement.
"""

from .splats import (Gaussian, GaussianSplat, NormalizationTransform,
                     clip_scales, density_at, normalize)
from .ply import load_ply, save_ply, PlyIOReport
from .fields_gt import (FieldSampleSet, GroundTruthField, SpatialIndex,
                        TruncationConfig, attr_gt, build_index, gaupf_gt,
                        label_queries, load_sample_set, sample_training_queries,
                        save_sample_set)
from .neural_field import (FieldHeads, FitConfig, NeuralField, Triplane,
                           eval_attrs, eval_pf, fit_field, grad_position,
                           interpolate, load_field, save_field)
from .vae import (GSEncoder, LatentCode, TriplaneDecoder, VAEConfig, VAEModel,
                  decode, encode, kl_divergence, load_vae, save_vae, train_vae,
                  vae_loss)
from .diffusion import (ConditionEmbedding, Denoiser, LDMConfig, LDMModel,
                        NoiseSchedule, embed_partial, ldm_loss, load_condition_file,
                        load_ldm, make_partial, p_sample_batch, p_sample_loop,
                        q_sample, save_condition_file, save_ldm, train_ldm)
from .extraction import (CellSet, ExtractionStats, OctreeConfig, ProxyPoints,
                         allocate_proxies, extract_attributes, extract_splat,
                         octree_sample, optimize_proxies)
from .metrics import MetricReport, attr_error, chamfer, field_l1
from .config import PipelineConfig, stage_seed
from .errors import (DataError, EmptyFieldError, FormatError, NumericalError,
                     SplatFieldsError)

__version__ = "0.1.0"
