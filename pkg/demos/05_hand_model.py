"""The parametric hand model: shape blend, skinning, joint regression and analytic gradients."""

import numpy as np

from hoannot.hand_model import HandPoseParams, PoseCache, forward, mirrored, synthetic_model

model = synthetic_model()  # a MANO-layout stand-in: 16 kinematic joints, 21 output joints
print("vertices", model.num_vertices, "faces", len(model.faces))

# %% Rest pose reproduces the template; pose and shape move vertices and joints together
rest = forward(model, HandPoseParams.rest())
print("rest pose matches template:", np.abs(rest.vertices - model.template).max() == 0)
rng = np.random.default_rng(5)
p = HandPoseParams(rng.normal(size=48) * 0.3, rng.normal(size=10) * 0.5, np.array([0.0, 0.0, 0.5]))
posed = forward(model, p)
print("fingertip positions (m):\n", posed.joints[16:].round(4))

# %% Batched evaluation keeps the skinning intermediates for vector-Jacobian products
theta = rng.normal(size=(4, 48)) * 0.3
cache = PoseCache(model, theta, np.zeros((4, 3)), p.beta)
g_theta, g_t = cache.vjp(None, np.ones_like(cache.joints))  # gradient of the summed joint coordinates
h = 1e-6
e = np.zeros(48)
e[5] = h
fd = (PoseCache(model, theta[:1] + e, np.zeros((1, 3)), p.beta).joints.sum()
      - PoseCache(model, theta[:1] - e, np.zeros((1, 3)), p.beta).joints.sum()) / (2 * h)
print(f"d(sum joints)/d theta_5: analytic {g_theta[0, 5]:.8f}, finite difference {fd:.8f}")

# %% The left hand is the mirror image of the right
left = mirrored(model)
print("left template is mirrored:", np.allclose(left.template, model.template * [-1, 1, 1]))
