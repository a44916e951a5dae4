from .network import Network, NetworkConfig, log_softmax, softmax
from .optim import Adam

__all__ = ["Adam", "Network", "NetworkConfig", "log_softmax", "softmax"]
