"""Physical constants for the benchmark tasks.

Cart Pole, Acrobot and Mountain Car follow the Gym classic-control sources
(CartPole-v1, Acrobot-v1 "book" dynamics, MountainCar-v0). Hand Mass values
are chosen for this repository; the original task description does not
publish them.
"""
import math

# gym/envs/classic_control/cartpole.py (CartPole-v1, euler integrator)
CARTPOLE = {
    "gravity": 9.8,
    "masscart": 1.0,
    "masspole": 0.1,
    "length": 0.5,  # half the pole length
    "force_mag": 10.0,
    "tau": 0.02,
    "theta_threshold": 12 * 2 * math.pi / 360,
    "x_threshold": 2.4,
    "init_range": 0.05,
    "horizon": 500,
    "solve_threshold": 495.0,
}

# gym/envs/classic_control/acrobot.py (Acrobot-v1, book_or_nips="book", one RK4 step per dt)
ACROBOT = {
    "dt": 0.2,
    "link_length_1": 1.0,
    "link_mass_1": 1.0,
    "link_mass_2": 1.0,
    "link_com_pos_1": 0.5,
    "link_com_pos_2": 0.5,
    "link_moi": 1.0,
    "gravity": 9.8,
    "max_vel_1": 4 * math.pi,
    "max_vel_2": 9 * math.pi,
    "torques": (-1.0, 0.0, 1.0),
    "init_range": 0.1,
    "horizon": 500,
    "solve_threshold": -105.0,
}

# gym/envs/classic_control/mountain_car.py (MountainCar-v0)
MOUNTAINCAR = {
    "min_position": -1.2,
    "max_position": 0.6,
    "max_speed": 0.07,
    "goal_position": 0.5,
    "goal_velocity": 0.0,
    "force": 0.001,
    "gravity": 0.0025,
    "init_low": -0.6,
    "init_high": -0.4,
    "horizon": 200,
}

# repository choice: unit spring and mass, light damping, hand moves in 4 directions
HANDMASS = {
    "spring_k": 1.0,
    "mass": 1.0,
    "damping": 0.1,
    "hand_step": 0.05,
    "dt": 0.05,
    "target": (1.0, 1.0),
    "horizon": 100,
}

ALL = {
    "cartpole": CARTPOLE,
    "acrobot": ACROBOT,
    "mountaincar": MOUNTAINCAR,
    "handmass": HANDMASS,
}
