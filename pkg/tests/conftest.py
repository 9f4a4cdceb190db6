import numpy as np
import pytest

from wholebody import kinematics as K


@pytest.fixture(scope="session")
def r1():
    return K.load_r1_model()


def planar_arm(lengths, prefix="link"):
    """Planar n-link arm in the x-y plane, revolute about z, links along +x."""
    joints = [K.Joint("root", None, K.FIXED)]
    parent = "root"
    names = []
    for i, ell in enumerate(lengths):
        name = f"{prefix}{i + 1}"
        xyz = np.array([0.0 if i == 0 else lengths[i - 1], 0.0, 0.0])
        joints.append(
            K.Joint(name, parent, K.REVOLUTE, np.array([0.0, 0.0, 1.0]), xyz,
                    limits=(-np.pi, np.pi))
        )
        names.append(name)
        parent = name
    joints.append(
        K.Joint("tip", parent, K.FIXED, xyz=np.array([lengths[-1], 0.0, 0.0]))
    )
    return K.RobotModel(joints, {"arms": names}, {"tip": "tip"}, name="planar")


@pytest.fixture
def arm2r():
    return planar_arm([0.4, 0.4])


def random_state(model, rng, margin=0.2):
    """Random in-limit state; unbounded dofs drawn from [-1, 1]."""
    lo, hi = model.limits_vector()
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    span = hi - lo
    q = lo + span * (margin + (1 - 2 * margin) * rng.random(model.total_dof))
    return K.JointState.from_vector(model, q)
