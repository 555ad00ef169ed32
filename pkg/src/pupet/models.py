"""Generator variants (UAE / AE / VAE / beta-VAE) and softmax classifiers.

The generator maps ``x || onehot(xp) || onehot(xu)`` through an encoder to a
latent code, perturbs it according to the variant, and decodes back to the
released width ``n``.  The private and utility labels are encoder *inputs*:
the mechanism is ``f(X, X_P, X_U)``, so privatising a record needs that
record's own labels.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import ndgrad as nd
from .ndgrad import MLP, DenseLayer, Tensor

VARIANTS = ("uae", "ae", "vae", "betavae")


class Mechanism(Protocol):
    """Anything that turns clean rows into released rows."""

    def release(self, x: np.ndarray, xp: np.ndarray, xu: np.ndarray,
                rng: np.random.Generator | None = None) -> np.ndarray: ...


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels outside [0, {k})")
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class LatentBatch:
    z: Tensor
    mu: Tensor
    logvar: Tensor | None
    eps: np.ndarray | None
    variant: str


class Generator:
    def __init__(self, encoder: MLP, decoder: MLP, variant: str = "uae", *, latent_dim: int,
                 n_private: int, n_utility: int, sigma: float = 0.05, beta: float = 1.0,
                 output: str = "identity", blocks=()):
        if variant not in VARIANTS:
            raise ValueError(f"unknown generator variant {variant!r}")
        if variant == "uae" and sigma < 0:
            raise ValueError("UAE sigma must be non-negative")
        if variant == "betavae" and beta <= 1:
            raise ValueError("beta-VAE needs beta > 1")
        self.encoder, self.decoder = encoder, decoder
        self.variant, self.latent_dim = variant, latent_dim
        self.n_private, self.n_utility = n_private, n_utility
        self.sigma = float(sigma)
        self.beta = float(beta) if variant == "betavae" else 1.0
        self.output = output
        self.blocks = tuple(tuple(b) for b in blocks)
        enc_out = 2 * latent_dim if variant in ("vae", "betavae") else latent_dim
        if encoder.out_dim != enc_out or decoder.in_dim != latent_dim:
            raise nd.ShapeError("generator", f"encoder out {enc_out}, decoder in {latent_dim}",
                                (encoder.out_dim, decoder.in_dim))
        self._segments = self._output_segments()

    @classmethod
    def build(cls, n: int, n_private: int, n_utility: int, rng: np.random.Generator, *,
              variant: str = "uae", latent_dim: int = 8, hidden=(64,), sigma: float = 0.05,
              beta: float = 4.0, output: str = "identity", blocks=()) -> "Generator":
        hidden = list(hidden)
        enc_out = 2 * latent_dim if variant in ("vae", "betavae") else latent_dim
        encoder = MLP.build([n + n_private + n_utility, *hidden, enc_out], rng)
        decoder = MLP.build([latent_dim, *hidden[::-1], n], rng)
        return cls(encoder, decoder, variant, latent_dim=latent_dim, n_private=n_private,
                   n_utility=n_utility, sigma=sigma, beta=beta, output=output, blocks=blocks)

    @property
    def n(self) -> int:
        return self.decoder.out_dim

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def _output_segments(self):
        # contiguous column runs: ("plain", i, j) or ("block", i, j)
        segs, pos = [], 0
        for i, j in sorted(self.blocks):
            if i > pos:
                segs.append(("plain", pos, i))
            segs.append(("block", i, j))
            pos = j
        if pos < self.n:
            segs.append(("plain", pos, self.n))
        return segs

    def encoder_input(self, x, xp, xu) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n:
            raise nd.ShapeError("privatize", f"(batch, {self.n})", x.shape)
        return np.concatenate([x, one_hot(xp, self.n_private), one_hot(xu, self.n_utility)], axis=1)

    def encode(self, x, xp, xu) -> tuple[Tensor, Tensor | None]:
        h = self.encoder(Tensor(self.encoder_input(x, xp, xu)))
        if self.variant in ("vae", "betavae"):
            d = self.latent_dim
            return h[:, :d], h[:, d:]
        return h, None

    def decode(self, z: Tensor) -> Tensor:
        h = self.decoder(z)
        if self.output == "sigmoid":
            return h.sigmoid()
        if not self.blocks:
            return h
        parts = [h[:, i:j].softmax() if kind == "block" else h[:, i:j] for kind, i, j in self._segments]
        return nd.concat(parts, axis=1)

    def release(self, x, xp, xu, rng=None) -> np.ndarray:
        with nd.no_grad():
            return privatize(self, x, xp, xu, rng=rng)[0].data


def privatize(gen: Generator, x, xp, xu, rng: np.random.Generator | None = None,
              eps: np.ndarray | None = None) -> tuple[Tensor, LatentBatch]:
    """One stochastic pass X -> Z -> X_hat.  Supply ``eps`` to replay a recorded draw."""
    mu, logvar = gen.encode(x, xp, xu)
    shape = mu.shape
    if gen.variant == "ae":
        z, eps = mu, None
    else:
        if eps is None:
            rng = rng if rng is not None else np.random.default_rng()
            eps = rng.standard_normal(shape)
        elif eps.shape != shape:
            raise nd.ShapeError("privatize", shape, eps.shape)
        if gen.variant == "uae":
            z = mu if gen.sigma == 0.0 else mu + gen.sigma * eps
        else:
            z = mu + (logvar * 0.5).exp() * eps
    return gen.decode(z), LatentBatch(z, mu, logvar, eps, gen.variant)


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, diag exp(logvar)) || N(0, I))."""
    per_row = (mu * mu + logvar.exp() - 1.0 - logvar).sum(axis=1) * 0.5
    return per_row.mean()


def generator_regularizer(gen: Generator, latent: LatentBatch) -> Tensor:
    if gen.variant in ("uae", "ae"):
        return Tensor(0.0)
    return kl_standard_normal(latent.mu, latent.logvar) * gen.beta


class Classifier:
    """Dense net whose last layer is a softmax over ``n_classes``."""

    def __init__(self, net: MLP, role: str = "adversary"):
        if net.layers[-1].activation != "softmax":
            raise ValueError("classifier must end in a softmax layer")
        self.net, self.role = net, role

    @classmethod
    def build(cls, n_in: int, n_classes: int, rng: np.random.Generator, hidden=(64,),
              role: str = "adversary") -> "Classifier":
        return cls(MLP.build([n_in, *hidden, n_classes], rng, out="softmax"), role)

    @property
    def n_in(self) -> int:
        return self.net.in_dim

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.n_in:
            raise nd.ShapeError("classify", f"(batch, {self.n_in})", x.shape)
        *body, last = self.net.layers
        for layer in body:
            x = layer(x)
        return x @ last.weight + last.bias

    def loss(self, x, labels) -> Tensor:
        return nd.softmax_cross_entropy(self.logits(x), labels)

    def probs(self, x) -> np.ndarray:
        with nd.no_grad():
            return nd.softmax_array(self.logits(x).data)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.probs(x), axis=1)


def classify(clf: Classifier, xhat) -> np.ndarray:
    return clf.probs(xhat)


# -- fixed mechanisms used as controls --------------------------------------------

class IdentityMechanism:
    def release(self, x, xp=None, xu=None, rng=None):
        return np.array(x, dtype=np.float64, copy=True)


class ConstantMechanism:
    def __init__(self, value: float = 0.0):
        self.value = value

    def release(self, x, xp=None, xu=None, rng=None):
        return np.full(np.shape(x), self.value, dtype=np.float64)


class OffsetMechanism:
    def __init__(self, offset: float):
        self.offset = offset

    def release(self, x, xp=None, xu=None, rng=None):
        return np.asarray(x, dtype=np.float64) + self.offset


def identity_generator(n: int, n_private: int, n_utility: int) -> Generator:
    """An AE whose encoder drops the label columns and whose layers are exact identities."""
    enc = DenseLayer(n + n_private + n_utility, n)
    enc.weight.data[:n] = np.eye(n)
    dec = DenseLayer(n, n)
    dec.weight.data[:] = np.eye(n)
    return Generator(MLP([enc]), MLP([dec]), "ae", latent_dim=n, n_private=n_private, n_utility=n_utility)


# -- bundle checkpoint -------------------------------------------------------------
#
#   b"PUPETCKP" u32 version, u32 header_len, header JSON (utf-8),
#   u32 section_count, then per section: u32 name_len, name, u64 blob_len,
#   ndgrad checkpoint blob.  Little-endian throughout.

_BUNDLE_MAGIC = b"PUPETCKP"


def generator_header(gen: Generator) -> dict:
    return {"variant": gen.variant, "sigma": gen.sigma, "beta": gen.beta, "latent_dim": gen.latent_dim,
            "n": gen.n, "n_private": gen.n_private, "n_utility": gen.n_utility,
            "output": gen.output, "blocks": [list(b) for b in gen.blocks]}


def save_bundle(path, header: dict, sections: dict[str, list[DenseLayer]]):
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(_BUNDLE_MAGIC)
    buf.write(struct.pack("<II", 1, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(sections)))
    for name, layers in sections.items():
        blob = nd.dump_layers(layers)
        buf.write(struct.pack("<I", len(name)))
        buf.write(name.encode())
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> tuple[dict, dict[str, list[DenseLayer]]]:
    blob = Path(path).read_bytes()
    if blob[:8] != _BUNDLE_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    _, hlen = struct.unpack_from("<II", blob, 8)
    off = 16
    header = json.loads(blob[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        name = blob[off + 4:off + 4 + nlen].decode()
        off += 4 + nlen
        (blen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        sections[name] = nd.parse_layers(blob[off:off + blen])
        off += blen
    return header, sections


def save_models(path, gen: Generator, classifiers: dict[str, Classifier], schema_digest: str, **extra):
    header = {"generator": generator_header(gen), "schema_digest": schema_digest,
              "classifiers": {k: c.role for k, c in classifiers.items()}, **extra}
    sections = {"encoder": gen.encoder.layers, "decoder": gen.decoder.layers}
    sections.update({f"clf:{k}": c.net.layers for k, c in classifiers.items()})
    save_bundle(path, header, sections)


def load_models(path) -> tuple[Generator, dict[str, Classifier], dict]:
    header, sections = load_bundle(path)
    g = header["generator"]
    gen = Generator(MLP(sections["encoder"]), MLP(sections["decoder"]), g["variant"],
                    latent_dim=g["latent_dim"], n_private=g["n_private"], n_utility=g["n_utility"],
                    sigma=g["sigma"], beta=g["beta"] if g["variant"] == "betavae" else 1.0,
                    output=g["output"], blocks=g["blocks"])
    clfs = {k: Classifier(MLP(sections[f"clf:{k}"]), role) for k, role in header.get("classifiers", {}).items()}
    return gen, clfs, header
