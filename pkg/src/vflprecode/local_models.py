"""Per-vehicle model: one extractor per available modality plus an integration net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .airlink import eta
from .nn import AdamState, Concat, LayerSpec, ShapeError, adam_step, build_sequential
from .sensing import GPS_DIM, RGB_DIM, SensingBundle

# global concatenation order; absent blocks are simply skipped
BRANCH_ORDER = ("gps", "rgb", "lidar", "pilot")


@dataclass(frozen=True)
class BranchConfig:
    l_g: int = 256
    l_r: int = 256
    l_l: int = 512
    l_s: int = 128
    n_antennas: int = 128
    l_p: int = 8
    bev_shape: tuple[int, int] = (32, 32)
    l_z: int = 8
    integration_hidden: int = 512
    conv_channels: int = 8

    def __post_init__(self):
        if min(self.l_g, self.l_r, self.l_l, self.l_s, self.n_antennas, self.l_p, self.integration_hidden) < 1:
            raise ValueError("branch sizes must be positive")

    @property
    def output_dim(self) -> int:
        return 2 * self.n_antennas

    def feature_size(self, branch: str) -> int:
        return {"gps": self.l_g, "rgb": self.l_r, "lidar": self.l_l, "pilot": self.l_s}[branch]

    def input_shape(self, branch: str) -> tuple:
        return {
            "gps": (GPS_DIM,),
            "rgb": (RGB_DIM,),
            "lidar": (1,) + tuple(self.bev_shape),
            "pilot": (2 * self.l_p,),
        }[branch]


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _branch_specs(branch: str, dims: BranchConfig, seeds):
    out = dims.feature_size(branch)
    if branch == "lidar":
        c = dims.conv_channels
        return [
            LayerSpec("conv2d", (c, 3, 2, 1), next(seeds)),
            LayerSpec("relu"),
            LayerSpec("conv2d", (c, 3, 2, 1), next(seeds)),
            LayerSpec("relu"),
            LayerSpec("flatten"),
            LayerSpec("dense", (out,), next(seeds)),
        ]
    hidden = 2 * out
    return [
        LayerSpec("dense", (hidden,), next(seeds)),
        LayerSpec("relu"),
        LayerSpec("dense", (hidden,), next(seeds)),
        LayerSpec("relu"),
        LayerSpec("dense", (out,), next(seeds)),
    ]


class LocalModel:
    def __init__(self, vehicle_id: int, sensor_mask, dims: BranchConfig, branches: dict, integration, seed: int):
        self.vehicle_id = vehicle_id
        self.sensor_mask = frozenset(sensor_mask)
        self.dims = dims
        self.branches = branches
        self.integration = integration
        self.seed = seed
        self.concat = Concat([dims.feature_size(b) for b in branches])

    @property
    def modules(self):
        return {**self.branches, "integration": self.integration}

    @property
    def integration_width(self) -> int:
        return self.integration.in_shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, net in self.modules.items() for k, v in net.parameters().items()}

    def load_parameters(self, blocks: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(blocks) != set(params):
            raise ValueError(f"vehicle {self.vehicle_id}: parameter names do not match checkpoint")
        for k, v in blocks.items():
            if params[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {params[k].shape}")
            params[k][...] = v
        self._bump()

    def apply_gradients(self, grads: dict, state: AdamState) -> None:
        adam_step(self.parameters(), grads, state)
        self._bump()

    def _bump(self):
        for net in self.modules.values():
            net.version += 1


def build_local_model(sensor_mask, dims: BranchConfig, seed: int, vehicle_id: int = 0, zero_final: bool = False) -> LocalModel:
    mask = frozenset(sensor_mask) | {"pilot"}
    unknown = mask - set(BRANCH_ORDER)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    branches = {}
    for idx, branch in enumerate(BRANCH_ORDER):
        if branch not in mask:
            continue
        seeds = (_seed(seed, vehicle_id, idx, j) for j in range(16))
        net = build_sequential(_branch_specs(branch, dims, seeds), dims.input_shape(branch), name=f"v{vehicle_id}.{branch}")
        if net.out_shape != (dims.feature_size(branch),):
            raise ShapeError(f"{branch} branch maps to {net.out_shape}")
        branches[branch] = net
    width = sum(dims.feature_size(b) for b in branches)
    idx = len(BRANCH_ORDER)
    integration = build_sequential(
        [
            LayerSpec("dense", (dims.integration_hidden,), _seed(seed, vehicle_id, idx, 0)),
            LayerSpec("relu"),
            LayerSpec("dense", (dims.output_dim,), _seed(seed, vehicle_id, idx, 1), "zeros" if zero_final else "uniform"),
        ],
        (width,),
        name=f"v{vehicle_id}.integration",
    )
    return LocalModel(vehicle_id, mask - {"pilot"}, dims, branches, integration, seed)


def bundles_to_inputs(bundles) -> dict[str, np.ndarray]:
    """Stack a list of SensingBundles into batch arrays keyed by modality."""
    if isinstance(bundles, SensingBundle):
        bundles = [bundles]
    first = bundles[0].mask
    if any(b.mask != first for b in bundles):
        raise ValueError("all bundles in a batch must carry the same modalities")
    out = {"pilot": np.stack([b.pilot_real for b in bundles])}
    for name in ("gps", "rgb", "lidar"):
        if name in first:
            out[name] = np.stack([getattr(b, name) for b in bundles]).astype(float)
    return out


@dataclass
class LocalCache:
    branches: dict
    integration: object


def local_forward(model: LocalModel, inputs) -> tuple[np.ndarray, LocalCache]:
    """Precoding vectors (B, N) for a batch of this vehicle's observations."""
    if isinstance(inputs, (SensingBundle, list, tuple)):
        inputs = bundles_to_inputs(inputs)
    given = set(inputs)
    wanted = set(model.branches)
    if given != wanted:
        missing, extra = sorted(wanted - given), sorted(given - wanted)
        raise ValueError(f"vehicle {model.vehicle_id}: inputs missing {missing}, unexpected {extra}")
    feats, caches = [], {}
    for name, net in model.branches.items():
        x = np.asarray(inputs[name], dtype=float)
        if name == "lidar":
            x = (x / model.dims.l_z)[:, None, :, :]
        f, caches[name] = net.forward(x)
        feats.append(f)
    m, _ = model.concat.forward(feats)
    out, icache = model.integration.forward(m)
    return eta(out), LocalCache(caches, icache)


def local_backward(model: LocalModel, cache: LocalCache, grad_v_real) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(real-stacked v), shape (B, 2N)."""
    grad_v_real = np.asarray(grad_v_real, dtype=float)
    if set(cache.branches) != set(model.branches):
        raise ValueError("cache was produced by a different model")
    grads = {}
    g_int, dm = model.integration.backward(cache.integration, grad_v_real)
    grads.update({f"integration.{k}": v for k, v in g_int.items()})
    _, dfeats = model.concat.backward(None, dm)
    for (name, net), df in zip(model.branches.items(), dfeats):
        g, _ = net.backward(cache.branches[name], df)
        grads.update({f"{name}.{k}": v for k, v in g.items()})
    return grads
