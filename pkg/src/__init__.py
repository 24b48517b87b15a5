"""
Active object recognition on a rotating gripper: belief fusion, the
joint classification / action-value network, the environment, the
Q-learning agent, evaluation and the command line.
"""
