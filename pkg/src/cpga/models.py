"""Model components and checkpoint I/O.

Four small float64 networks:

* ``FeatureExtractor``: tanh MLP, raw inputs -> feature space.
* ``WeightNormClassifier``: per-class direction and gain, logits are
  ``gain * cos`` scaled by the feature norm; it stays frozen after source
  pretraining so its rows anchor the feature space.
* ``PrototypeGenerator``: class embedding multiplied elementwise with a
  uniform noise vector, pushed through a ReLU MLP, one prototype per draw.
* ``ContrastiveProjector``: tanh MLP onto the unit sphere where the
  contrastive losses live.

Checkpoints are ``.npz`` files holding a JSON manifest (component name,
parameter names and shapes, seed) plus one flat float64 array per parameter
in declared order. Round-trips are exact.
"""

import hashlib
import json

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation
from .numerics import as_tensor, l2_normalize_rows

CHECKPOINT_FORMAT = "cpga-checkpoint"
CHECKPOINT_VERSION = 1


def _init_linear(layer: nn.Linear, generator):
    # same scheme as the torch default, but driven by an explicit generator
    bound = 1.0 / (layer.in_features ** 0.5)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


class FeatureExtractor(nn.Module):
    """Smooth MLP from input space to feature space (linear last layer)."""

    def __init__(self, input_dim, feature_dim=64, hidden_dims=(64, 64),
                 generator=None):
        super().__init__()
        self.input_dim = int(input_dim)
        self.feature_dim = int(feature_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        dims = [self.input_dim, *self.hidden_dims]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.out = nn.Linear(dims[-1], self.feature_dim)
        self.double()
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        for layer in [*self.hidden, self.out]:
            _init_linear(layer, generator)

    def forward(self, x):
        x = as_tensor(x)
        for layer in self.hidden:
            x = torch.tanh(layer(x))
        return self.out(x)


class WeightNormClassifier(nn.Module):
    """Classifier with weight-normalized rows: w_k = gain_k * v_k / ||v_k||."""

    def __init__(self, num_classes, feature_dim, generator=None):
        super().__init__()
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.directions = nn.Parameter(
            torch.empty(self.num_classes, self.feature_dim, dtype=torch.float64)
        )
        self.gains = nn.Parameter(torch.ones(self.num_classes, dtype=torch.float64))
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            self.directions.normal_(0.0, 1.0, generator=generator)
            self.directions /= self.feature_dim ** 0.5
            self.gains.fill_(1.0)

    def weight(self):
        """Effective rows g_k * v_k / ||v_k||, never zero by construction."""
        return self.gains[:, None] * l2_normalize_rows(self.directions)

    def logits(self, features):
        return as_tensor(features) @ self.weight().T

    def forward(self, features):
        """Class probabilities; differentiable w.r.t. features when frozen."""
        return torch.softmax(self.logits(features), dim=-1)


class PrototypeGenerator(nn.Module):
    """Conditional generator: prototype = MLP(embedding[label] * noise).

    Noise entries are uniform on [0, 1); the elementwise product keeps the
    class embedding as the signal carrier and the noise as modulation.
    """

    def __init__(self, num_classes, feature_dim, noise_dim=100, hidden_dim=256,
                 generator=None):
        super().__init__()
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.noise_dim = int(noise_dim)
        self.hidden_dim = int(hidden_dim)
        self.embedding = nn.Embedding(self.num_classes, self.noise_dim)
        self.fc1 = nn.Linear(self.noise_dim, self.hidden_dim)
        self.fc2 = nn.Linear(self.hidden_dim, self.feature_dim)
        self.double()
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            self.embedding.weight.normal_(0.0, 1.0, generator=generator)
        _init_linear(self.fc1, generator)
        _init_linear(self.fc2, generator)

    def sample_noise(self, n, generator=None):
        return torch.rand(n, self.noise_dim, dtype=torch.float64,
                          generator=generator)

    def forward(self, labels, noise):
        labels = torch.as_tensor(labels, dtype=torch.long)
        noise = as_tensor(noise)
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("label out of range for generator")
        if noise.shape != (labels.shape[0], self.noise_dim):
            raise ValueError(
                f"noise must have shape ({labels.shape[0]}, {self.noise_dim})"
            )
        h = self.embedding(labels) * noise
        h = torch.relu(self.fc1(h))
        # Prototypes imitate post-ReLU backbone features, so they live in the
        # nonnegative cone; the output activation keeps that geometry.
        return torch.relu(self.fc2(h))


class ContrastiveProjector(nn.Module):
    """Tanh MLP from feature space onto the unit sphere in contrast space."""

    def __init__(self, feature_dim=64, hidden_dims=(64, 32), contrast_dim=16,
                 generator=None):
        super().__init__()
        self.feature_dim = int(feature_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.contrast_dim = int(contrast_dim)
        dims = [self.feature_dim, *self.hidden_dims]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.out = nn.Linear(dims[-1], self.contrast_dim)
        self.double()
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        for layer in [*self.hidden, self.out]:
            _init_linear(layer, generator)

    def forward(self, features):
        x = as_tensor(features)
        for layer in self.hidden:
            x = torch.tanh(layer(x))
        return l2_normalize_rows(self.out(x))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def is_frozen(module: nn.Module) -> bool:
    return all(not p.requires_grad for p in module.parameters())


def assert_frozen(module: nn.Module, name: str):
    if not is_frozen(module):
        raise ContractViolation(f"{name} must stay frozen here")


def named_arrays(source):
    """(name, float64 array) pairs in declared order.

    ``source`` is a module (parameters) or a mapping of arrays/tensors.
    """
    if isinstance(source, nn.Module):
        items = [(n, p.detach()) for n, p in source.named_parameters()]
    else:
        items = list(source.items())
    out = []
    for name, value in items:
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        out.append((name, np.asarray(value, dtype=np.float64)))
    return out


def save_checkpoint(path, component: str, source, seed=None):
    """Write manifest + flat arrays. ``source``: module or name->array map."""
    arrays = named_arrays(source)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "component": component,
        "seed": seed,
        "params": [
            {"name": name, "shape": list(arr.shape)} for name, arr in arrays
        ],
    }
    payload = {"manifest": np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)}
    for i, (_, arr) in enumerate(arrays):
        payload[f"param_{i:04d}"] = arr.reshape(-1)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def read_checkpoint(path):
    """Returns (manifest dict, ordered name->array map with shapes restored)."""
    with np.load(path) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        arrays = {}
        for i, spec_ in enumerate(manifest["params"]):
            flat = data[f"param_{i:04d}"]
            arrays[spec_["name"]] = flat.reshape(spec_["shape"])
    return manifest, arrays


def load_checkpoint(path, module: nn.Module):
    """Copy checkpoint parameters into ``module`` exactly."""
    manifest, arrays = read_checkpoint(path)
    params = dict(module.named_parameters())
    if set(params) != set(arrays):
        raise ValueError(
            f"{path}: parameter names do not match "
            f"{manifest.get('component')}"
        )
    for name, arr in arrays.items():
        if tuple(params[name].shape) != tuple(arr.shape):
            raise ValueError(
                f"{path}: shape mismatch for layer {name}: "
                f"{tuple(arr.shape)} vs {tuple(params[name].shape)}"
            )
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr))
    return manifest


def content_hash(source) -> str:
    """sha256 over parameter names and raw float64 bytes, declared order.

    Works on modules, mappings, and checkpoint paths, and agrees across
    them, so a frozen component can be compared to its saved checkpoint.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        _, arrays = read_checkpoint(source)
        items = list(arrays.items())
    else:
        items = named_arrays(source)
    h = hashlib.sha256()
    for name, arr in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()
