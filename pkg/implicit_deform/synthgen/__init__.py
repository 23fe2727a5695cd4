"""
Synthetic ground-truth data: bending paddles, hanging chains, dataset IO.
"""

from .chain import (ChainSpec, DeformedChainShape, build_chain_object, gen_chain_trajectory, solve_catenary_parameter,
                    solve_chain)
from .dataset import (ChainGeneratorConfig, Dataset, GeneratorConfig, ObjectRecord, Trajectory, Transition,
                      decode_blob, encode_blob, read_dataset, structurally_equal, write_dataset)
from .generator import generate_dataset
from .occlusion import BottomFraction, BoxRegion, apply_occlusion, front_facing
from .paddle import (BentPaddleShape, PaddleSpec, beam_deflection, build_paddle_object, gen_paddle_trajectory,
                     paddle_wrench)

__all__ = [
    'BentPaddleShape', 'BottomFraction', 'BoxRegion', 'ChainGeneratorConfig', 'ChainSpec', 'Dataset',
    'DeformedChainShape', 'GeneratorConfig', 'ObjectRecord', 'PaddleSpec', 'Trajectory', 'Transition',
    'apply_occlusion', 'beam_deflection', 'build_chain_object', 'build_paddle_object', 'decode_blob',
    'encode_blob', 'front_facing', 'gen_chain_trajectory', 'gen_paddle_trajectory', 'generate_dataset',
    'paddle_wrench', 'read_dataset', 'solve_catenary_parameter', 'solve_chain', 'structurally_equal',
    'write_dataset',
]
