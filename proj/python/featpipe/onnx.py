"""Backend for ViT-style networks exported to ONNX, run with onnxruntime.

The network takes one float32 NCHW image and returns token embeddings
[1, prefix + gh*gw, D] (prefix = class/register tokens, patch tokens in
row-major grid order). Attention comes from an optional second output:
either final-block attention [1, heads, T, T], whose class-token row is
averaged over heads, or a per-patch map [1, gh*gw]. Without one the
attention is uniform.

Export with dynamic spatial axes so arbitrary (conformed) sizes can be fed.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import numpy as np

from ._featpipe import Backend, callback_backend

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class OnnxFeaturizer:
    def __init__(
        self,
        model_path: str | os.PathLike,
        *,
        patch_size: int = 14,
        stride: Optional[int] = None,
        input_name: Optional[str] = None,
        tokens_output: Optional[str] = None,
        attention_output: Optional[str] = None,
        prefix_tokens: int = 1,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
        providers: Optional[Sequence[str]] = None,
    ):
        import onnxruntime as ort

        self.model_path = os.fspath(model_path)
        self.patch_size = patch_size
        # A runtime graph cannot be restrided; only declare S < P for models exported that way.
        self.stride = stride or patch_size
        self.prefix_tokens = prefix_tokens
        self.mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
        self.std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
        self.session = ort.InferenceSession(self.model_path, providers=list(providers or ["CPUExecutionProvider"]))

        inputs = self.session.get_inputs()
        self.input_name = input_name or inputs[0].name
        outputs = [o.name for o in self.session.get_outputs()]
        self.tokens_output = tokens_output or outputs[0]
        if attention_output is None and len(outputs) > 1:
            attention_output = outputs[1]
        self.attention_output = attention_output
        for name in filter(None, (self.tokens_output, self.attention_output)):
            if name not in outputs:
                raise ValueError(f"model has no output {name!r} (outputs: {outputs})")

        probe = np.zeros((2 * patch_size, 2 * patch_size, 3), dtype=np.uint8)
        self.hidden_dim = int(self._run(probe)[0].shape[-1])

    def descriptor(self) -> dict:
        return {
            "name": f"external:{os.path.basename(self.model_path)}",
            "patch_size": self.patch_size,
            "stride": self.stride,
            "hidden_dim": self.hidden_dim,
            "require_divisible": True,
            "source": "external",
            "attention": (
                "final-block class-token attention, mean over heads"
                if self.attention_output
                else "uniform (model exposes no attention output)"
            ),
        }

    def _run(self, image: np.ndarray):
        x = image.astype(np.float32)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[2] == 1:
            x = np.repeat(x, 3, axis=2)
        x = (x.transpose(2, 0, 1)[None] / 255.0 - self.mean) / self.std
        names = [self.tokens_output] + ([self.attention_output] if self.attention_output else [])
        return self.session.run(names, {self.input_name: x.astype(np.float32)})

    def __call__(self, image: np.ndarray):
        h, w = image.shape[:2]
        gh = (h - self.patch_size) // self.stride + 1
        gw = (w - self.patch_size) // self.stride + 1
        outs = self._run(image)
        tokens = np.asarray(outs[0])[0]
        n = gh * gw
        if tokens.shape[0] != self.prefix_tokens + n:
            raise ValueError(f"model returned {tokens.shape[0]} tokens, expected {self.prefix_tokens} + {gh}x{gw}")
        features = tokens[self.prefix_tokens :].reshape(gh, gw, -1)
        if self.attention_output:
            att = np.asarray(outs[1])
            if att.ndim == 4:  # [1, heads, T, T]
                att = att[0, :, 0, self.prefix_tokens :].mean(axis=0)
            else:
                att = att.reshape(-1)[-n:]
            attention = np.clip(att, 0, None).reshape(gh, gw)
        else:
            attention = np.ones((gh, gw), dtype=np.float32)
        return np.ascontiguousarray(features, dtype=np.float32), np.ascontiguousarray(attention, dtype=np.float32)


def onnx_backend(model_path: str | os.PathLike, **kwargs) -> Backend:
    """Wraps an ONNX network as a featpipe backend (see OnnxFeaturizer for options)."""
    f = OnnxFeaturizer(model_path, **kwargs)
    return callback_backend(f.descriptor(), f, concurrent_safe=True)
