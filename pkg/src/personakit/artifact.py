"""Versioned binary model artifact.

Layout (little-endian): magic "SPMODEL1", u32 format version, then three
u64-length-prefixed UTF-8 JSON sections (config, normalizer, profiles)
followed by named tensors (u32 count; per tensor a u32-length-prefixed
name, u32 ndim, u32 dims, row-major 32-bit floats). Loading then saving
reproduces byte-identical content.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import IO

import numpy as np

from .codebook import Codebook
from .config import RunConfig
from .errors import FormatError, ShapeError
from .features import FeatureLayout, NormalizerState
from .nn import DenseLayer, DenseNet
from .objective import LABEL_NAMES
from .population import TokenProfile
from .trainer import VqModel

ARTIFACT_MAGIC = b"SPMODEL1"
ARTIFACT_VERSION = 1


@dataclass
class ModelArtifact:
    config_json: str
    normalizer_json: str
    profiles_json: str
    tensors: dict[str, np.ndarray]  # insertion-ordered, float32

    def save(self, fh: IO[bytes]) -> None:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<I", ARTIFACT_VERSION))
        for text in (self.config_json, self.normalizer_json, self.profiles_json):
            raw = text.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(self.tensors)))
        for name, tensor in self.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, fh: IO[bytes]) -> "ModelArtifact":
        magic = fh.read(len(ARTIFACT_MAGIC))
        if magic != ARTIFACT_MAGIC:
            raise FormatError(f"bad artifact magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != ARTIFACT_VERSION:
            raise FormatError(f"unsupported artifact version {version}")
        sections = []
        for _ in range(3):
            (length,) = struct.unpack("<Q", _read_exact(fh, 8))
            sections.append(_read_exact(fh, length).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
            tensors[name] = data.copy()
        return cls(
            config_json=sections[0],
            normalizer_json=sections[1],
            profiles_json=sections[2],
            tensors=tensors,
        )

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(json.loads(self.config_json))

    @property
    def normalizer(self) -> NormalizerState:
        return NormalizerState.from_json(self.normalizer_json)

    @property
    def profiles(self) -> dict[int, TokenProfile]:
        docs = json.loads(self.profiles_json)["profiles"]
        return {int(doc["token"]): TokenProfile.from_dict(doc) for doc in docs}


def _read_exact(fh: IO[bytes], n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated artifact file")
    return data


def build_artifact(
    model: VqModel,
    normalizer: NormalizerState,
    cfg: RunConfig,
    profiles: dict[int, TokenProfile],
) -> ModelArtifact:
    tensors: dict[str, np.ndarray] = {}
    for prefix, net in (("encoder", model.encoder), ("decoder", model.decoder)):
        for i, layer in enumerate(net.layers):
            tensors[f"{prefix}.{i}.weight"] = layer.weight
            tensors[f"{prefix}.{i}.bias"] = layer.bias
    for name in LABEL_NAMES:
        weight, bias = model.heads[name]
        tensors[f"head_{name}.weight"] = weight
        tensors[f"head_{name}.bias"] = bias
    tensors["codebook.entries"] = model.codebook.entries
    tensors["codebook.usage_ema"] = model.codebook.usage_ema
    tensors["codebook.sum_ema"] = model.codebook.sum_ema
    profiles_json = json.dumps(
        {"profiles": [profiles[t].as_dict() for t in sorted(profiles)]}, sort_keys=True
    )
    return ModelArtifact(
        config_json=json.dumps(cfg.as_dict(), sort_keys=True),
        normalizer_json=normalizer.to_json(),
        profiles_json=profiles_json,
        tensors=tensors,
    )


def model_from_artifact(artifact: ModelArtifact) -> tuple[VqModel, NormalizerState, RunConfig]:
    cfg = artifact.config
    tensors = artifact.tensors

    def read_net(prefix: str) -> DenseNet:
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in tensors:
            weight = tensors[f"{prefix}.{i}.weight"].copy()
            bias = tensors[f"{prefix}.{i}.bias"].copy()
            layers.append(DenseLayer(weight, bias, "relu"))
            i += 1
        if not layers:
            raise FormatError(f"artifact is missing {prefix} tensors")
        layers[-1].activation = "identity"
        return DenseNet(layers, dropout=cfg.model.dropout)

    encoder = read_net("encoder")
    decoder = read_net("decoder")
    heads = {}
    for name in LABEL_NAMES:
        try:
            heads[name] = (
                tensors[f"head_{name}.weight"].copy(),
                tensors[f"head_{name}.bias"].copy(),
            )
        except KeyError as exc:
            raise FormatError(f"artifact is missing head tensor {exc.args[0]!r}") from exc
    try:
        codebook = Codebook(
            tensors["codebook.entries"].copy(),
            decay=cfg.codebook.decay,
            dead_fraction=cfg.codebook.dead_fraction,
            revival_interval=cfg.codebook.revival_interval,
            warmup_steps=cfg.codebook.warmup_steps,
            revival_noise=cfg.codebook.revival_noise,
            usage_ema=tensors["codebook.usage_ema"].astype(np.float64).copy(),
            sum_ema=tensors["codebook.sum_ema"].astype(np.float64).copy(),
        )
    except KeyError as exc:
        raise FormatError(f"artifact is missing codebook tensor {exc.args[0]!r}") from exc

    normalizer = artifact.normalizer
    layout = FeatureLayout(normalizer.pca_dim)
    if encoder.in_dim != layout.length:
        raise ShapeError(
            f"encoder width {encoder.in_dim} does not match feature layout {layout.length}"
        )
    model = VqModel(
        encoder=encoder, decoder=decoder, heads=heads, codebook=codebook, layout=layout
    )
    return model, normalizer, cfg
