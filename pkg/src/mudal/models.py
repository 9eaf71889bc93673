"""Network bundle for the composite trainer: shared encoder, shared classifier,
per-domain classifier heads sharing the classifier trunk, and a conditional
feature discriminator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DenseNet, Layer, ParamSet


@dataclass
class ModelBundle:
    """encoder: D -> Z, classifier: Z -> C (trunk + final layer),
    head_finals[i]: a per-domain final layer over the shared trunk,
    discriminator: (Z + code) -> 1 logit.

    The discriminator conditions on a domain code, either a one-hot vector of
    width N or a single normalized index (i+1)/N.
    """

    encoder: DenseNet
    classifier: DenseNet
    head_finals: list[Layer]
    discriminator: DenseNet | None
    n_domains: int
    onehot_codes: bool = True

    def __post_init__(self) -> None:
        if len(self.head_finals) != self.n_domains:
            raise ValueError("need one head final layer per domain")
        trunk_out = self.classifier.layers[-1].in_dim
        for i, head in enumerate(self.head_finals):
            if head.in_dim != trunk_out or head.out_dim != self.classifier.output_dim:
                raise ValueError(f"head {i} does not match the classifier final layer shape")
        if self.discriminator is not None:
            expected = self.encoder.output_dim + self.code_width
            if self.discriminator.input_dim != expected:
                raise ValueError(
                    f"discriminator input dim {self.discriminator.input_dim} != "
                    f"latent + code width {expected}"
                )

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def n_classes(self) -> int:
        return self.classifier.output_dim

    @property
    def code_width(self) -> int:
        return self.n_domains if self.onehot_codes else 1

    def code(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_domains:
            raise ValueError(f"domain index {i} out of range")
        if self.onehot_codes:
            c = np.zeros(self.n_domains)
            c[i] = 1.0
            return c
        return np.array([(i + 1) / self.n_domains])

    def head_net(self, i: int) -> DenseNet:
        """Domain head i as a net sharing every classifier layer but the last."""
        return DenseNet([*self.classifier.layers[:-1], self.head_finals[i]])

    def trunk_net(self) -> DenseNet:
        if len(self.classifier.layers) == 1:
            raise ValueError("classifier has no trunk (single layer)")
        return DenseNet(self.classifier.layers[:-1])

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.predict(x)

    def class_logits(self, x: np.ndarray) -> np.ndarray:
        return self.classifier.predict(self.encode(x))

    def disc_logits(self, z: np.ndarray, domain: int) -> np.ndarray:
        if self.discriminator is None:
            raise ValueError("bundle has no discriminator")
        code = np.tile(self.code(domain), (z.shape[0], 1))
        return self.discriminator.predict(np.hstack([z, code])).reshape(-1)

    def net_param_set(self) -> ParamSet:
        """Encoder, classifier, and all head finals, each layer once."""
        return ParamSet([*self.encoder.layers, *self.classifier.layers, *self.head_finals])

    def disc_param_set(self) -> ParamSet:
        if self.discriminator is None:
            raise ValueError("bundle has no discriminator")
        return ParamSet(self.discriminator.layers)

    def shared_trunk_ok(self) -> bool:
        """Heads must reuse the classifier's non-final layers (same objects)."""
        trunk = self.classifier.layers[:-1]
        for i in range(self.n_domains):
            view = self.head_net(i)
            if any(a is not b for a, b in zip(view.layers[:-1], trunk)):
                return False
        return True


def make_bundle(feature_dim: int, n_classes: int, n_domains: int,
                rng: np.random.Generator, latent_dim: int = 16,
                encoder_hidden: tuple[int, ...] = (32,),
                classifier_hidden: tuple[int, ...] = (32,),
                disc_hidden: tuple[int, ...] = (32, 32),
                onehot_codes: bool = True,
                with_discriminator: bool = True) -> ModelBundle:
    enc_dims = [feature_dim, *encoder_hidden, latent_dim]
    enc_acts = ["relu"] * len(encoder_hidden) + ["identity"]  # linear feature layer
    encoder = DenseNet.create(enc_dims, enc_acts, rng)

    cls_dims = [latent_dim, *classifier_hidden, n_classes]
    cls_acts = ["relu"] * len(classifier_hidden) + ["identity"]
    classifier = DenseNet.create(cls_dims, cls_acts, rng)

    trunk_out = cls_dims[-2]
    head_finals = [
        Layer.random(trunk_out, n_classes, "identity", rng) for _ in range(n_domains)
    ]

    discriminator = None
    if with_discriminator:
        code_width = n_domains if onehot_codes else 1
        disc_dims = [latent_dim + code_width, *disc_hidden, 1]
        disc_acts = ["leaky_relu"] * len(disc_hidden) + ["identity"]
        discriminator = DenseNet.create(disc_dims, disc_acts, rng)

    return ModelBundle(encoder, classifier, head_finals, discriminator,
                       n_domains, onehot_codes)
