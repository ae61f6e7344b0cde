"""Renal VERDICT diffusion-MRI modelling.

Three-compartment signal models, a self-supervised network fitter with
ADC/IVIM baselines, dual-network protocol subsampling, synthetic phantoms
with a Monte Carlo sphere oracle, and ROI statistics.
"""
__version__ = "0.1.0"

from .acquisition import (AcquisitionPoint, AcquisitionScheme, VoxelTable, kidney_protocol,
                          normalize_and_average, read_scheme, write_scheme)
from .feature_select import (ProtocolSelector, ScoreReport, SelectionConfig, evaluate_reduced,
                             extract_protocol, train_selector)
from .fitting import (ADCFit, FitResult, IVIMFit, SelfSupervisedVerdict, SsFitConfig,
                      VerdictLeastSquares, compare_vascular_variants, fit_adc, fit_ivim,
                      fit_verdict_lsq, fit_verdict_ss, goodness_of_fit)
from .models import FixedDiffusivities, TissueParams, sphere_gpd_signal, verdict_signal
from .phantom import PhantomSpec, add_rician_noise, generate_phantom, mc_sphere_signal
from .stats import RoiMask, roi_summary, wilcoxon_signed_rank
from .volume_io import VolumeContainer, read_volume, volume_to_table, write_volume
