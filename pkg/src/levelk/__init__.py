"""Level-k curriculum for learning merges in dense two-lane traffic."""
from .curriculum import CurriculumConfig, PolicyRegistry, populate_environment, run_curriculum, warm_start
from .evaluation import CellMetrics, cross_matrix, evaluate_cell
from .qnet import NetworkConfig, NetworkWeights, forward, init_weights, load_weights, save_weights
from .sim import InitialSceneParams, MergeEnv, RewardWeights, SimConfig, generate_initial_scene, run_episode
from .traffic import Action, RoadGeometry, Scene, VehicleState, decode_action, encode_action
from .train import TrainConfig, train_level

__version__ = "0.1.0"
