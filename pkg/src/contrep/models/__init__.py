from .encoder import (ContinualModel, CosineHead, EncoderConfig, FrozenSnapshot, ProjectorConfig, build_mlp,
                      load_checkpoint, save_checkpoint, snapshot)
from .resnet import BACKBONES, ResNet, resnet18
