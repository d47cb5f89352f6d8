"""Seedable simulation of ultrasonic FHSS indoor localization.

The pipeline: synthesize a frequency-hopping ranging burst (`signals`),
propagate it through a room-acoustic channel with multipath, Doppler and
noise (`channel`), recover per-beacon distance and radial velocity and fuse
them with a Kalman filter (`estimation`), solve positions and dilution of
precision (`localization`), and orchestrate whole flights and Monte-Carlo
campaigns (`scenario`, `harness`).  The `echoloc` command drives it all
from the shell.
"""

from .channel import (ChannelConfig, PathSet, SoundSpeed, apply_channel,
                      beam_visible, calibrate_sound_speed,
                      image_method_paths, sound_speed_from_temperature)
from .errors import (ArgumentError, ConfigurationError, DomainError,
                     EchoInconsistencyError, EcholocError, GeometryError,
                     NoSignalError, ParseError, ValidationError)
from .estimation import (DopplerResult, KalmanState, RangePipelineConfig,
                         RangeTrack, ToaResult, cross_correlate,
                         estimate_doppler, estimate_toa, kalman_update,
                         run_range_pipeline)
from .harness import (CampaignResult, CampaignSpec, RunResult,
                      emit_campaign, emit_dop_grid, emit_results,
                      load_campaign_spec, run_campaign, run_once,
                      scenario_digest, trial_seed)
from .localization import (BeaconSet, DopGrid, DopValues, HeightMeasurement,
                           PositionFix, Stage, categorize_dop, compute_dop,
                           dop_grid, fuse_height, height_from_echo,
                           trilaterate)
from .scenario import (CloverConfig, RoomScenario, Trajectory,
                       TrajectorySource, default_scenario, load_scenario,
                       radial_state, random_trajectory, save_scenario,
                       scenario_to_dict, validate_scenario)
from .signals import (BitSequence, HopPlan, SignalFrame, make_hop_plan,
                      random_bits, reference_copy, samples_per_bit,
                      synthesize_fhss)

__version__ = "0.1.0"
