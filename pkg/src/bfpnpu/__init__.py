"""Bit-accurate BFP NPU model with fault injection and BFP-aware error detection."""

from .bfp_core import (BF16, FP16, FP32, FP64, MATRIX_WISE, ROW_COLUMN_WISE, BfpBlock, BfpMatrix,
                       BlockingStrategy, FpFormat, FpScalar, bfp_dot_reference, decompose,
                       dequantize_block, leading_zero_count, quantize_block, quantize_matrix)
from .converters import Bfp2FpConverter, Fp2BfpConverter, bfp_to_fp, fp_to_bfp
from .errors import *  # noqa: F401,F403
from .exponent_path import EuArray, ExponentVectors, compute_exponent_matrix
from .fault_injection import (FaultKind, FaultSite, FaultSpec, InjectionPlan, Manifest,
                              interpose_read, sample_plan)
from .protection import (Checker, Classification, CoverageRecord, DetectionEvent, Outcome,
                         classify_events, fp_e2e_baseline_check)
from .system import NpuConfig, NpuSystem, enumerate_sites, reference_gemm, run_gemm
from .systolic_sim import ArrayConfig, SystolicArray

__version__ = "0.1.0"
