"""Exchangeable neural ODEs: equivariant dynamics, set flows, and a
continuous-time VAE for temporal sets, on a self-contained autodiff core."""

__version__ = "0.1.0"

from .autodiff import Graph, Params, backward, forward, grad_check
from .cnf import SetCnf, TraceConfig, log_likelihood, sample, train_cnf
from .classifier import ClassifierModel, classify_forward, predict, train_classifier
from .layers import (ConcatSquashLayer, DeepSetLayer, EquivariantNet,
                     NetDynamics, SetAttentionLayer, build_equivariant_net)
from .ode import (GraphDynamics, OdeResult, SolverConfig, adjoint_grad,
                  integrate, rk4_backprop_grads, rk4_chain, roundtrip)
from .rng import make_rng

__all__ = [
    "Graph", "Params", "forward", "backward", "grad_check",
    "SolverConfig", "OdeResult", "GraphDynamics", "integrate", "roundtrip",
    "adjoint_grad", "rk4_chain", "rk4_backprop_grads",
    "DeepSetLayer", "SetAttentionLayer", "ConcatSquashLayer",
    "EquivariantNet", "NetDynamics", "build_equivariant_net",
    "SetCnf", "TraceConfig", "log_likelihood", "sample", "train_cnf",
    "ClassifierModel", "classify_forward", "predict", "train_classifier",
    "make_rng",
]
