"""Bilevel force-closure grasp synthesis with batched lower-level QPs."""
from .assets import ObjectModel, load_object, primitive_object
from .contact import ContactFrame, build_frame, contact_wrench_matrix, grasp_matrix
from .energy import TaskWrenchSet, force_closure_directions, grasp_energy, q1_metric, qp_baseline_energy
from .evaluation import EvalConfig, EvalResult, first_variance_ratio, quasi_static_check, roc_auc
from .hand import GraspConfig, HandModel, builtin_hand, forward_kinematics, load_hand
from .pipeline import StageConfig, SynthesisConfig, SynthesisResult, squeeze_pose, synthesize
from .qpsolve import AdmmSettings, QpProblem, QpSolution, admm_solve
from .records import GraspRecord, read_records, write_records

__version__ = "0.1.0"

__all__ = [
    "AdmmSettings", "ContactFrame", "EvalConfig", "EvalResult", "GraspConfig", "GraspRecord", "HandModel",
    "ObjectModel", "QpProblem", "QpSolution", "StageConfig", "SynthesisConfig", "SynthesisResult",
    "TaskWrenchSet", "admm_solve", "build_frame", "builtin_hand", "contact_wrench_matrix",
    "first_variance_ratio", "force_closure_directions", "forward_kinematics", "grasp_energy",
    "grasp_matrix", "load_hand", "load_object", "primitive_object", "q1_metric", "qp_baseline_energy",
    "quasi_static_check", "read_records", "roc_auc", "squeeze_pose", "synthesize", "write_records",
]
