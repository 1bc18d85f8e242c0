"""A trained model bundle: parameters plus the configs needed to run them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .encoder import (EncoderConfig, encode, infer_config, init_encoder, load_checkpoint,
                      params_from_arrays, prepare_images, save_checkpoint)
from .engine import ShapeError, Tensor
from .regressor import RegressorConfig, init_regressor, regress_flow
from .transition import TransitionConfig, coarse_to_fine, resize_flow

# scalar settings that cannot be recovered from parameter shapes travel as 0-d entries
_META = {
    "meta.transition.window_size": ("transition", "window_size", int),
    "meta.transition.temperature": ("transition", "temperature", float),
    "meta.transition.prune_threshold": ("transition", "prune_threshold", float),
    "meta.encoder.leaky_slope": ("encoder", "leaky_slope", float),
}


@dataclass
class FlowModel:
    params: dict[str, Tensor]
    encoder: EncoderConfig
    transition: TransitionConfig
    regressor: RegressorConfig = field(default_factory=RegressorConfig)

    @classmethod
    def create(cls, encoder: EncoderConfig, transition: TransitionConfig,
               regressor: RegressorConfig | None = None, seed: int = 0) -> "FlowModel":
        regressor = regressor or RegressorConfig()
        params = init_encoder(encoder, seed)
        params.update(init_regressor(encoder, transition, regressor, seed + 1))
        return cls(params, encoder, transition, regressor)

    @property
    def has_regressor(self) -> bool:
        return any(k.startswith("regressor.") for k in self.params)

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def regressor_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("regressor.")}

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {k: v.data for k, v in self.params.items()}
        for key, (section, name, _) in _META.items():
            arrays[key] = np.array(float(getattr(getattr(self, section), name)))
        save_checkpoint(path, arrays)

    @classmethod
    def load(cls, path, regressor: RegressorConfig | None = None) -> "FlowModel":
        arrays = load_checkpoint(path)
        settings: dict[str, dict] = {"transition": {}, "encoder": {}}
        for key, (section, name, cast) in _META.items():
            if key in arrays:
                settings[section][name] = cast(arrays.pop(key))
        enc = infer_config(arrays, **settings["encoder"])
        trans = TransitionConfig(**settings["transition"])
        reg = regressor or RegressorConfig()
        if f"regressor.level1.conv0.weight" in arrays:
            reg.layers = sum(1 for k in arrays if k.startswith("regressor.level1.conv") and k.endswith("weight"))
            reg.hidden = arrays["regressor.level1.conv0.weight"].shape[3]
        return cls(params_from_arrays(arrays), enc, trans, reg)

    # -- inference -------------------------------------------------------
    def flow(self, frame_a, frame_b, kind: str = "nonparametric", level: int | None = None) -> np.ndarray:
        """Full-resolution flow from ``frame_a`` to ``frame_b``.

        Inputs not divisible by ``2**levels`` are reflection-padded and the
        output cropped back.
        """
        a = prepare_images(frame_a, self.encoder.in_channels)
        b = prepare_images(frame_b, self.encoder.in_channels)
        if a.shape != b.shape:
            raise ShapeError(f"frame sizes differ: {a.shape[1:3]} vs {b.shape[1:3]}")
        h, w = a.shape[1:3]
        frames, (ph, pw) = pad_to_multiple(np.concatenate([a, b]), 2 ** self.encoder.levels)
        with E.no_grad():
            pyr = encode(frames, self.params, self.encoder)
            matches = coarse_to_fine(pyr, pyr, self.transition, 0, 1)
            level = level or self.encoder.levels
            match = matches[level - 1]
            if kind == "regressor":
                if not self.has_regressor:
                    raise ValueError("model has no regressor parameters")
                f = regress_flow(match.transition, pyr.feature(level, 0), match.flow, self.params,
                                 level, self.regressor, self.transition.temperature)
            elif kind == "nonparametric":
                f = match.flow
            else:
                raise ValueError(f"unknown flow kind {kind!r}")
            full = resize_flow(f, ph, pw).data
        return full[:h, :w]


def pad_to_multiple(frames: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflection-pad ``(N, H, W, C)`` frames at the bottom/right to a multiple of ``factor``."""
    h, w = frames.shape[1:3]
    ph, pw = -(-h // factor) * factor, -(-w // factor) * factor
    if (ph, pw) == (h, w):
        return frames, (h, w)
    mode = "reflect" if ph - h < h and pw - w < w else "symmetric"
    return np.pad(frames, ((0, 0), (0, ph - h), (0, pw - w), (0, 0)), mode=mode), (ph, pw)
