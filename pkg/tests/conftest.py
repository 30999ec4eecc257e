import numpy as np
import pytest

from psvq import defaults
from psvq.physics import (AuxParams, PoolConfig, ProtocolSchedule,
                          PulseShape, SaturationBlock, TissueParams)
from psvq.posterior import ParameterBounds


@pytest.fixture
def pools2():
    return defaults.SSMT_POOLS


@pytest.fixture
def pools3():
    return defaults.APT_POOLS


@pytest.fixture
def aux():
    return AuxParams(t1_water=1.2, t2_water=0.08, b0_shift=0.05,
                     b1_scale=0.95)


@pytest.fixture
def aux3():
    return AuxParams(t1_water=1.2, t2_water=0.08, b0_shift=0.05,
                     b1_scale=0.95,
                     fixed_pools=((defaults.SEMISOLID_POOL,
                                   TissueParams(f=0.1, k=30.0)),))


@pytest.fixture
def theta():
    return TissueParams(f=0.1, k=40.0)


@pytest.fixture
def schedule_cw():
    blocks = tuple(
        SaturationBlock(b1_nominal=b1, freq_offset=off, sat_duration=1.0,
                        recovery_duration=0.8)
        for b1, off in [(1.5, 8.0), (4.0, 6.0), (0.8, 12.0), (3.0, 10.0),
                        (5.5, 8.0), (2.2, 14.0)])
    return ProtocolSchedule(blocks=blocks, field_strength=7.0)


@pytest.fixture
def schedule_pulsed():
    shape = PulseShape(kind="pulsed", pulse_ms=100.0, duty=0.5)
    blocks = tuple(
        SaturationBlock(b1_nominal=b1, freq_offset=3.5, sat_duration=0.6,
                        recovery_duration=1.0, pulse_shape=shape)
        for b1 in (1.0, 2.5, 3.5))
    return ProtocolSchedule(blocks=blocks, field_strength=7.0)


@pytest.fixture
def bounds():
    return ParameterBounds(f=(0.001, 0.3), k=(1.0, 100.0))


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.Philox(1234))
