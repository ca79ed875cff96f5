"""Named desk-scale configurations: scene, dataset protocol, network and training."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DomainError
from .evalkit import ViewConfig
from .fields import NetworkConfig
from .media import HomogeneousField, SceneDescription, single_field_scene
from .oracle import PathTracerConfig
from .renderer import MarchConfig
from .trainer import TrainConfig

UNIT_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class Preset:
    name: str
    albedo: float
    background: tuple = (0.0, 0.0, 0.0)
    counts: tuple = (20, 2, 5)
    mode: str = "point"
    oracle: PathTracerConfig = field(default_factory=lambda: PathTracerConfig(spp=512))
    view: ViewConfig = field(default_factory=ViewConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    render: MarchConfig = field(default_factory=MarchConfig)

    def scene(self) -> SceneDescription:
        fld = HomogeneousField(2.0, (self.albedo,) * 3, 0.0, UNIT_BOX, "sphere")
        return single_field_scene(fld, background=self.background)


def _desk_network(l_max):
    return NetworkConfig(bounds=UNIT_BOX, l_max=l_max, feature_width=64, feature_depth=4,
                         prop_width=64, sh_width=64, sh_depth=3, vis_width=64, vis_depth=3,
                         pos_band=4)


def _desk_train(iters):
    return TrainConfig(batch_rays=192, total_iters=iters, mu=0.1, checkpoint_every=1000,
                       log_every=100, vis_pairs=1024, vis_steps=24, lr0=3e-3, lr1=1e-4,
                       march=MarchConfig(n_samples=32, k_dirs=32, env_dirs=16))


_DESK_RENDER = MarchConfig(n_samples=64, k_dirs=64, env_dirs=32)

PRESETS = {
    "sphere-desk": Preset("sphere-desk", 0.8, (1.0, 1.0, 1.0), network=_desk_network(5), train=_desk_train(5000),
                          render=_DESK_RENDER),
    "scatter-desk": Preset("scatter-desk", 0.95, network=_desk_network(5), train=_desk_train(5000),
                           render=_DESK_RENDER),
    "scatter-desk-nosh": Preset("scatter-desk-nosh", 0.95, network=_desk_network(None),
                                train=_desk_train(5000), render=_DESK_RENDER),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
