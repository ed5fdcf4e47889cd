"""Conditional generators ``T(x, z)`` and the noise encoder.

Three desk-scale backbones share one contract: a condition batch ``x`` and a
latent batch ``z`` go in, a batch of samples in ``[0, 1]`` comes out.

* ``vec-mlp``     -- 3-layer MLP on ``concat(x, z)`` for vector tasks.
* ``sr-small``    -- residual conv stack + two 2x upsampling stages (x4 SR).
* ``layout-small``-- 3-stage coarse-to-fine refinement from a one-hot label
  map; noise enters at the coarsest stage, optionally through a
  :class:`NoiseEncoder`.

Image tensors are NCHW; a latent for an image model is ``(channels, h, w)``
(or a flat vector when the noise encoder is on).
"""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor

ARCHS = ("vec-mlp", "sr-small", "layout-small")
UPSAMPLE_MODES = ("nearest", "bilinear")
NOISE_MODES = ("gaussian", "zero")

DEFAULTS = {
    "vec-mlp": {"cond_dim": 4, "out_dim": 4, "noise_dim": 4, "hidden": 64},
    "sr-small": {"in_channels": 3, "out_channels": 3, "noise_dim": 5, "width": 16, "blocks": 4, "in_size": 8},
    "layout-small": {
        "classes": 4,
        "out_channels": 3,
        "noise_dim": 10,
        "width": 16,
        "height": 32,
        "img_width": 64,
        "encoder": True,
        "encoder_latent": 8,
        "encoder_hidden": 16,
        "encoder_cap": 32,
    },
}


def _uniform(rng, shape, fan_in, gain=1.0):
    a = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(DTYPE)


def area_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of an NCHW array by an integer factor."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5), dtype=np.float64).astype(DTYPE)


class _Params:
    """Named parameter store with deterministic construction order."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.tensors: dict[str, Tensor] = {}

    def conv(self, name, cin, cout, k=3, zero=False, gain=1.0):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, DTYPE) if zero else _uniform(self.rng, shape, cin * k * k, gain)
        self.tensors[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.tensors[name + ".b"] = Tensor(np.zeros(cout, DTYPE), requires_grad=True, name=name + ".b")

    def dense(self, name, fin, fout, zero=False, gain=1.0):
        w = np.zeros((fin, fout), DTYPE) if zero else _uniform(self.rng, (fin, fout), fin, gain)
        self.tensors[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.tensors[name + ".b"] = Tensor(np.zeros(fout, DTYPE), requires_grad=True, name=name + ".b")


def _conv(p, name, x, stride=1):
    return ad.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride)


def _dense(p, name, x):
    return ad.matmul(x, p[name + ".w"]) + p[name + ".b"]


def _to_unit_range(h):
    return ad.tanh(h) * 0.5 + 0.5


class NoiseEncoder:
    """Maps (condition, low-dimensional noise) to a full noise field.

    The latent vector is tiled over the coarse grid, concatenated with the
    condition and passed through three conv layers.
    """

    def __init__(self, params: dict, prefix: str, latent_dim: int, cap: int):
        if latent_dim > cap:
            raise ValueError(f"encoder latent dim {latent_dim} exceeds cap {cap}")
        self.params = params
        self.prefix = prefix
        self.latent_dim = latent_dim
        self.cap = cap

    @staticmethod
    def build(store: _Params, prefix, cond_channels, latent_dim, hidden, out_channels, zero=False):
        store.conv(prefix + "0", cond_channels + latent_dim, hidden, zero=zero)
        store.conv(prefix + "1", hidden, hidden, zero=zero)
        store.conv(prefix + "2", hidden, out_channels, zero=zero)

    def encode(self, x_coarse, z_tilde) -> Tensor:
        x_coarse, z_tilde = ad.as_tensor(x_coarse), ad.as_tensor(z_tilde)
        if z_tilde.ndim != 2 or z_tilde.shape[1] != self.latent_dim:
            raise ad.ShapeError(f"encode_noise: latent shape {z_tilde.shape}, expected (N, {self.latent_dim})")
        if x_coarse.shape[0] != z_tilde.shape[0]:
            raise ad.ShapeError(f"encode_noise: batch mismatch {x_coarse.shape} vs {z_tilde.shape}")
        h, w = x_coarse.shape[2:]
        p = self.params
        e = ad.concat([x_coarse, ad.tile_spatial(z_tilde, h, w)], axis=1)
        e = ad.leaky_relu(_conv(p, self.prefix + "0", e))
        e = ad.leaky_relu(_conv(p, self.prefix + "1", e))
        return _conv(p, self.prefix + "2", e)


class ConditionalGenerator:
    """Parameter set plus the forward map ``T(x, z)``.

    Build one with :func:`build_generator`; the descriptor fully determines
    the architecture and (through ``seed``) the initial parameters.
    """

    def __init__(self, descriptor: dict, params: dict):
        self.descriptor = descriptor
        self.params = params
        self.encoder = None
        if descriptor["arch"] == "layout-small" and descriptor["encoder"]:
            self.encoder = NoiseEncoder(params, "enc", descriptor["encoder_latent"], descriptor["encoder_cap"])

    # -- descriptor-backed state ------------------------------------------------

    @property
    def arch(self):
        return self.descriptor["arch"]

    @property
    def upsample_mode(self):
        return self.descriptor["upsample"]

    @property
    def noise_mode(self):
        return self.descriptor["noise_mode"]

    @noise_mode.setter
    def noise_mode(self, mode):
        if mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {mode!r}")
        self.descriptor["noise_mode"] = mode

    def set_upsample_mode(self, mode):
        set_upsample_mode(self, mode)
        return self

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return ConditionalGenerator(copy.deepcopy(self.descriptor), params)

    # -- shapes ------------------------------------------------------------------

    @property
    def cond_shape(self):
        d = self.descriptor
        if self.arch == "vec-mlp":
            return (d["cond_dim"],)
        if self.arch == "sr-small":
            return (d["in_channels"], d["in_size"], d["in_size"])
        return (d["classes"], d["height"], d["img_width"])

    @property
    def latent_shape(self):
        d = self.descriptor
        if self.arch == "vec-mlp":
            return (d["noise_dim"],)
        if self.arch == "sr-small":
            return (d["noise_dim"], d["in_size"], d["in_size"])
        if self.encoder is not None:
            return (d["encoder_latent"],)
        return (d["noise_dim"], d["height"] // 4, d["img_width"] // 4)

    @property
    def output_shape(self):
        d = self.descriptor
        if self.arch == "vec-mlp":
            return (d["out_dim"],)
        if self.arch == "sr-small":
            return (d["out_channels"], 4 * d["in_size"], 4 * d["in_size"])
        return (d["out_channels"], d["height"], d["img_width"])

    # -- forward -----------------------------------------------------------------

    def _check(self, x, z):
        if tuple(x.shape[1:]) != self.cond_shape:
            raise ad.ShapeError(f"generate: condition shape {tuple(x.shape[1:])}, expected {self.cond_shape}")
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ad.ShapeError(f"generate: latent shape {tuple(z.shape[1:])}, expected {self.latent_shape}")
        if x.shape[0] != z.shape[0]:
            raise ad.ShapeError(f"generate: batch mismatch {x.shape[0]} vs {z.shape[0]}")

    def forward(self, x, z) -> Tensor:
        """Batched forward pass; builds a tape when recording is on."""
        x, z = ad.as_tensor(x), ad.as_tensor(z)
        self._check(x, z)
        if self.noise_mode == "zero":
            z = Tensor(np.zeros(z.shape, DTYPE))
        p = self.params
        d = self.descriptor
        up = d["upsample"]
        if self.arch == "vec-mlp":
            h = ad.concat([x, z], axis=1)
            h = ad.leaky_relu(_dense(p, "fc0", h))
            h = ad.leaky_relu(_dense(p, "fc1", h))
            return _to_unit_range(_dense(p, "fc2", h))
        if self.arch == "sr-small":
            h = ad.leaky_relu(_conv(p, "head", ad.concat([x, z], axis=1)))
            for b in range(d["blocks"]):
                r = ad.leaky_relu(_conv(p, f"block{b}.0", h))
                h = h + _conv(p, f"block{b}.1", r)
            h = ad.leaky_relu(_conv(p, "up0", ad.upsample2x(h, up)))
            h = ad.leaky_relu(_conv(p, "up1", ad.upsample2x(h, up)))
            return _to_unit_range(_conv(p, "out", h))
        # layout-small: one-hot labels at three scales, noise at the coarsest.
        x4 = Tensor(area_downsample(x.data, 4))
        x2 = Tensor(area_downsample(x.data, 2))
        noise = self.encoder.encode(x4, z) if self.encoder is not None else z
        h = ad.leaky_relu(_conv(p, "s0.0", ad.concat([x4, noise], axis=1)))
        h = ad.leaky_relu(_conv(p, "s0.1", h))
        h = ad.concat([ad.upsample2x(h, up), x2], axis=1)
        h = ad.leaky_relu(_conv(p, "s1.0", h))
        h = ad.leaky_relu(_conv(p, "s1.1", h))
        h = ad.concat([ad.upsample2x(h, up), x], axis=1)
        h = ad.leaky_relu(_conv(p, "s2.0", h))
        return _to_unit_range(_conv(p, "out", h))

    def sample(self, x, z, chunk=256) -> np.ndarray:
        """Batched forward without a tape; returns a float32 array."""
        x = np.asarray(x, DTYPE)
        z = np.asarray(z, DTYPE)
        with ad.no_recording():
            if len(x) <= chunk:
                return self.forward(x, z).data
            return np.concatenate(
                [self.forward(x[i : i + chunk], z[i : i + chunk]).data for i in range(0, len(x), chunk)]
            )

    def encode_noise(self, x, z_tilde) -> np.ndarray:
        """Encoded noise field for a batch (layout model with encoder only)."""
        if self.encoder is None:
            raise ValueError("encode_noise: generator has no noise encoder")
        x = np.asarray(x, DTYPE)
        with ad.no_recording():
            return self.encoder.encode(Tensor(area_downsample(x, 4)), z_tilde).data


def build_generator(arch, seed=0, init="default", **overrides) -> ConditionalGenerator:
    """Construct a generator from an architecture name and descriptor overrides.

    ``init="default"`` zero-initializes the output layer (constant 0.5 output
    at cold start); ``"random"`` initializes it like every other layer;
    ``"zero-encoder"`` additionally zeroes the noise encoder.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    desc = {"arch": arch, "seed": int(seed), "init": init, "upsample": "nearest", "noise_mode": "gaussian"}
    desc.update(DEFAULTS[arch])
    unknown = set(overrides) - set(desc)
    if unknown:
        raise ValueError(f"unknown descriptor keys for {arch}: {sorted(unknown)}")
    desc.update(overrides)
    return from_descriptor(desc)


def from_descriptor(desc: dict) -> ConditionalGenerator:
    desc = copy.deepcopy(desc)
    if desc["upsample"] not in UPSAMPLE_MODES:
        raise ValueError(f"unknown upsample mode {desc['upsample']!r}")
    store = _Params(desc["seed"])
    zero_out = desc["init"] != "random"
    arch = desc["arch"]
    if arch == "vec-mlp":
        store.dense("fc0", desc["cond_dim"] + desc["noise_dim"], desc["hidden"])
        store.dense("fc1", desc["hidden"], desc["hidden"])
        store.dense("fc2", desc["hidden"], desc["out_dim"], zero=zero_out)
    elif arch == "sr-small":
        w = desc["width"]
        store.conv("head", desc["in_channels"] + desc["noise_dim"], w)
        for b in range(desc["blocks"]):
            store.conv(f"block{b}.0", w, w)
            store.conv(f"block{b}.1", w, w, gain=0.1)
        store.conv("up0", w, w)
        store.conv("up1", w, w)
        store.conv("out", w, desc["out_channels"], zero=zero_out)
    elif arch == "layout-small":
        w, c = desc["width"], desc["classes"]
        if desc["height"] % 4 or desc["img_width"] % 4:
            raise ValueError("layout-small needs spatial size divisible by 4")
        if desc["encoder"]:
            NoiseEncoder.build(
                store, "enc", c, desc["encoder_latent"], desc["encoder_hidden"], desc["noise_dim"],
                zero=desc["init"] == "zero-encoder",
            )
        store.conv("s0.0", c + desc["noise_dim"], w)
        store.conv("s0.1", w, w)
        store.conv("s1.0", w + c, w)
        store.conv("s1.1", w, w)
        store.conv("s2.0", w + c, w)
        store.conv("out", w, desc["out_channels"], zero=zero_out)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return ConditionalGenerator(desc, store.tensors)


def generate(gen: ConditionalGenerator, x, z) -> np.ndarray:
    """One sample ``T(x, z)`` for an unbatched condition and latent."""
    x = np.asarray(x, DTYPE)
    z = np.asarray(z, DTYPE)
    if x.shape != gen.cond_shape or z.shape != gen.latent_shape:
        raise ad.ShapeError(
            f"generate: got condition {x.shape} / latent {z.shape}, "
            f"expected {gen.cond_shape} / {gen.latent_shape}"
        )
    return gen.sample(x[None], z[None])[0]


def encode_noise(gen: ConditionalGenerator, x, z_tilde) -> np.ndarray:
    """Unbatched noise-encoder output ``z'`` for condition ``x``."""
    x = np.asarray(x, DTYPE)
    z_tilde = np.asarray(z_tilde, DTYPE)
    return gen.encode_noise(x[None], z_tilde[None])[0]


def set_upsample_mode(gen: ConditionalGenerator, mode: str) -> ConditionalGenerator:
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"unknown upsample mode {mode!r}")
    gen.descriptor["upsample"] = mode
    return gen
