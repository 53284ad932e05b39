"""Extrinsic calibration from marker observations, and nearest-timestamp stream matching."""

import numpy as np

from hoannot.calibration import CalibrationObservation, TimestampStream, match_streams, solve_extrinsic
from hoannot.geometry import RigidTransform
from hoannot.synth import camera_ring

rng = np.random.default_rng(1)

# %% A camera from the default ring sees 12 markers spread through a 1 m cube
cam = camera_ring()[3]
markers = rng.uniform(-0.5, 0.5, size=(12, 3))
pixels = cam.project(markers) + rng.normal(size=(12, 2)) * 0.5  # half-pixel detector noise
obs = [CalibrationObservation(tuple(X), tuple(x)) for X, x in zip(markers, pixels)]

# the solver ignores the extrinsic of the intrinsic model it is given
T, reproj = solve_extrinsic(cam.with_extrinsic(RigidTransform.identity()), obs)
print(f"mean reprojection error: {reproj:.3f} px")
print(f"camera centre error: {1000 * np.linalg.norm(-T.rotation.T @ T.translation - cam.center):.2f} mm")

# %% Cameras at 30 Hz, mocap at 120 Hz with a 3 ms clock offset and a dropout
cams = TimestampStream("cameras", np.arange(10) * 1000 / 30.0)
mocap_t = np.arange(40) * 1000 / 120.0 + 3.0
mocap = TimestampStream("mocap", np.delete(mocap_t, np.arange(16, 28)))  # a 100 ms dropout
for m in match_streams(cams, mocap, max_gap=17.0):
    print(f"camera frame {m.ref_index} -> mocap sample {m.other_index} (dt {m.dt:+.2f} ms)")
# frames inside the dropout have no sample within 17 ms and are left unmatched
