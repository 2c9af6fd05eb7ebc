"""
Worked fused-data frameworks.

Importing this package registers every framework kind in ``FRAMEWORKS``.
"""

from fusion.frameworks.base import (
    FRAMEWORKS,
    BaseFramework,
    FrameworkConfig,
    FrameworkResult,
    create_framework,
    register_framework,
)
from fusion.frameworks.demo import DemoReport, naive_vs_obedient_demo
from fusion.frameworks.generic_ub import (
    GenericUBFullFramework,
    GenericUBPointFramework,
    UBLayout,
    generic_ub_eif_discrete,
    generic_ub_full_if,
    generic_ub_if,
    reconstruct_joint,
    ub_alignment,
)
from fusion.frameworks.prevalence import PrevalenceFramework, if_prevalence, mq, phi_prevalence
from fusion.frameworks.transport import (
    CaseControlDesign,
    TransportAxes,
    TransportI,
    TransportII,
    TransportIIIa,
    TransportIIIb,
    aipw_ideal_if,
    case_control_design,
    ate_transport_phi,
    transport_if,
)
from fusion.frameworks.tsiv import (
    TsivAxes,
    TsivFramework,
    TsivInfluence,
    tsiv_eif,
    tsiv_if,
    tsiv_solve,
)

__all__ = [
    "FRAMEWORKS",
    "CaseControlDesign",
    "BaseFramework",
    "DemoReport",
    "FrameworkConfig",
    "FrameworkResult",
    "GenericUBFullFramework",
    "GenericUBPointFramework",
    "PrevalenceFramework",
    "TransportAxes",
    "TransportI",
    "TransportII",
    "TransportIIIa",
    "TransportIIIb",
    "TsivAxes",
    "TsivFramework",
    "TsivInfluence",
    "UBLayout",
    "aipw_ideal_if",
    "case_control_design",
    "ate_transport_phi",
    "create_framework",
    "generic_ub_eif_discrete",
    "generic_ub_full_if",
    "generic_ub_if",
    "if_prevalence",
    "mq",
    "naive_vs_obedient_demo",
    "phi_prevalence",
    "reconstruct_joint",
    "register_framework",
    "transport_if",
    "tsiv_eif",
    "tsiv_if",
    "tsiv_solve",
    "ub_alignment",
]
