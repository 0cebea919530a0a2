"""gcsim: simulation of logical key hierarchy and complete subtree group key schemes, and of what a corrupted member gives away

"""
from .lkh import RekeyPolicy, setup, register, join, leave, member_rekey, current_group_key
from .stateless import CoverMode, REVOKED, cs_init, broadcast, receiver_decrypt, steiner_cover
from .adversary import TrafficTape, corrupt, reveal, recover_closure, forward_recover, stateless_recover, replay
from .scenario import Scenario, load_scenario, parse_scenario, run, compare_runs
