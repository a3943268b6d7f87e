"""Model graphs: compile layer stacks into executable forward/backward chains."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Var
from .ctensor import ComplexTensor, Rng
from .exceptions import ConfigError
from .layers import (
    ComplexConv,
    ComplexFC,
    CReLU,
    DivisionLayer,
    Econv,
    EqBatchNorm,
    EquivariantWrap,
    Flatten,
    GTReLU,
    MDistTransform,
    PrototypeHead,
    RealAvgPool,
    RealConv,
    RealFC,
    RealReLU,
    StackReIm,
    WFMConv,
)


class ModelGraph:
    """An ordered layer chain with a parameter registry.

    ``invariance`` declares the intended behavior under complex scaling of
    the input ("none", "phase", or "full"); the test suite checks the claim,
    nothing here enforces it.
    """

    def __init__(self, name, layer_list, invariance="none", builder=None, hyper=None):
        self.name = name
        self.layers = list(layer_list)
        self.invariance = invariance
        self.builder = builder or name
        self.hyper = dict(hyper or {})
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                if "." not in p.name:
                    p.name = f"{i:02d}_{layer.kind}.{p.name}"

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def param_count(self):
        """Total learnable parameters; a complex entry counts once."""
        return sum(layer.param_count() for layer in self.layers)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, tape=None, train=False):
        var = x if isinstance(x, Var) else Var(x)
        for layer in self.layers:
            var = layer.forward(var, tape=tape, train=train)
        return var

    def logits(self, x, train=False):
        return self.forward(x, tape=None, train=train).value

    def kink_margin(self, x_value):
        """Minimum distance to any non-differentiable locus along the chain."""
        margin = math.inf
        var = Var(x_value)
        for layer in self.layers:
            m = layer.kink_margin(var.value)
            margin = min(margin, m)
            var = layer.forward(var, tape=None, train=True)
        return margin

    def config(self):
        return {"builder": self.builder, "hyper": self.hyper,
                "invariance": self.invariance,
                "layers": [layer.config() for layer in self.layers]}

    def norm_states(self):
        """Running-stat holders that belong in a checkpoint."""
        out = []
        for i, layer in enumerate(self.layers):
            state = getattr(layer, "state", None)
            if state is not None:
                out.append((f"{i:02d}_{layer.kind}", state))
        return out


# -- builders -----------------------------------------------------------------


def build_type_i_cifarnet(num_classes=10, in_channels=3, rng=None, precision="fp64",
                          r=0.0, metric="euclidean"):
    """Invariant-early composition: a division layer right after the stem.

    Everything downstream of the division sees scale-invariant features, so
    the head can stay in its plain (non-invariant) form.
    """
    rng = rng if rng is not None else Rng(0)
    stack = [
        Econv(in_channels, 16, 3, stride=2, padding=1, rng=rng, precision=precision),
        DivisionLayer(16, k=3, rng=rng, precision=precision),
        GTReLU(16, r=r, precision=precision),
        Econv(16, 32, 3, stride=2, padding=1, rng=rng, precision=precision),
        GTReLU(32, r=r, precision=precision),
        Econv(32, 64, 3, stride=2, padding=1, rng=rng, precision=precision),
        GTReLU(64, r=r, precision=precision),
        # learnable pooling: bias-free depthwise conv collapsing 4x4 to 1x1
        Econv(64, 64, 4, stride=1, padding=0, groups=64, rng=rng,
              precision=precision, init="avg"),
        Flatten(),
        ComplexFC(64, 128, rng=rng, precision=precision),
        PrototypeHead(num_classes, 128, metric=metric, invariant=False,
                      rng=rng, precision=precision),
    ]
    return ModelGraph("type_i", stack, invariance="full", builder="type_i",
                      hyper={"num_classes": num_classes, "in_channels": in_channels,
                             "precision": precision, "r": r, "metric": metric})


def build_type_e_cifarnet(num_classes=10, in_channels=3, rng=None, precision="fp64",
                          metric="manifold"):
    """Equivariant-throughout composition with an invariant distance head."""
    rng = rng if rng is not None else Rng(0)
    stack = [
        Econv(in_channels, 16, 3, stride=2, padding=1, rng=rng, precision=precision),
        EquivariantWrap(GTReLU(16, r=0.0, precision=precision)),
        Econv(16, 32, 3, stride=2, padding=1, rng=rng, precision=precision),
        EquivariantWrap(GTReLU(32, r=0.0, precision=precision)),
        Econv(32, 64, 3, stride=2, padding=1, rng=rng, precision=precision),
        EquivariantWrap(GTReLU(64, r=0.0, precision=precision)),
        Econv(64, 64, 4, stride=1, padding=0, groups=64, rng=rng,
              precision=precision, init="avg"),
        Flatten(),
        ComplexFC(64, 128, rng=rng, precision=precision),
        EqBatchNorm(128, precision=precision),
        PrototypeHead(num_classes, 128, metric=metric, invariant=True,
                      rng=rng, precision=precision),
    ]
    return ModelGraph("type_e", stack, invariance="full", builder="type_e",
                      hyper={"num_classes": num_classes, "in_channels": in_channels,
                             "precision": precision, "metric": metric})


def build_dcn_cifarnet(num_classes=10, in_channels=3, rng=None, precision="fp64"):
    """Biased complex convolutions with split-plane ReLUs and a real head."""
    rng = rng if rng is not None else Rng(0)
    stack = [
        ComplexConv(in_channels, 16, 3, stride=2, padding=1, rng=rng, precision=precision),
        CReLU(),
        ComplexConv(16, 32, 3, stride=2, padding=1, rng=rng, precision=precision),
        CReLU(),
        ComplexConv(32, 64, 3, stride=2, padding=1, rng=rng, precision=precision),
        CReLU(),
        ComplexConv(64, 64, 4, stride=1, padding=0, groups=64, rng=rng,
                    precision=precision, init="avg"),
        StackReIm(),
        Flatten(),
        RealFC(128, 128, rng=rng, precision=precision),
        RealReLU(),
        RealFC(128, num_classes, rng=rng, precision=precision),
    ]
    return ModelGraph("dcn", stack, invariance="none", builder="dcn",
                      hyper={"num_classes": num_classes, "in_channels": in_channels,
                             "precision": precision})


def build_real_cifarnet(num_classes=10, in_channels=3, rng=None, precision="fp64"):
    """Plain real CNN on stacked re/im channels."""
    rng = rng if rng is not None else Rng(0)
    stack = [
        StackReIm(),
        RealConv(2 * in_channels, 16, 3, stride=2, padding=1, rng=rng, precision=precision),
        RealReLU(),
        RealConv(16, 32, 3, stride=2, padding=1, rng=rng, precision=precision),
        RealReLU(),
        RealConv(32, 64, 3, stride=2, padding=1, rng=rng, precision=precision),
        RealReLU(),
        RealAvgPool(4),
        Flatten(),
        RealFC(64, 128, rng=rng, precision=precision),
        RealReLU(),
        RealFC(128, num_classes, rng=rng, precision=precision),
    ]
    return ModelGraph("real", stack, invariance="none", builder="real",
                      hyper={"num_classes": num_classes, "in_channels": in_channels,
                             "precision": precision})


def build_wfm_cifarnet(num_classes=10, in_channels=3, rng=None, precision="fp64"):
    """Fréchet-mean convolutions with a distance transform and a real head."""
    rng = rng if rng is not None else Rng(0)
    stack = [
        WFMConv(in_channels, 16, 3, stride=2, padding=1, rng=rng, precision=precision),
        WFMConv(16, 32, 3, stride=2, padding=1, rng=rng, precision=precision),
        WFMConv(32, 64, 3, stride=2, padding=1, rng=rng, precision=precision),
        MDistTransform(),
        RealAvgPool(4),
        Flatten(),
        RealFC(64, 128, rng=rng, precision=precision),
        RealReLU(),
        RealFC(128, num_classes, rng=rng, precision=precision),
    ]
    return ModelGraph("surreal_wfm", stack, invariance="full", builder="surreal_wfm",
                      hyper={"num_classes": num_classes, "in_channels": in_channels,
                             "precision": precision})


BUILDERS = {
    "type_i": build_type_i_cifarnet,
    "type_e": build_type_e_cifarnet,
    "dcn": build_dcn_cifarnet,
    "real": build_real_cifarnet,
    "surreal_wfm": build_wfm_cifarnet,
}


def build_baselines(kind, num_classes=10, in_channels=3, rng=None, precision="fp64"):
    if kind not in ("dcn", "real", "surreal_wfm"):
        raise ConfigError(f"unknown baseline {kind!r}")
    return BUILDERS[kind](num_classes, in_channels, rng=rng, precision=precision)


def build_model(builder, rng=None, **hyper):
    if builder not in BUILDERS:
        raise ConfigError(f"unknown model builder {builder!r}; "
                          f"choices: {sorted(BUILDERS)}")
    return BUILDERS[builder](rng=rng, **hyper)


def model_from_config(config, rng=None):
    """Rebuild a graph from its config dict (parameters are not restored)."""
    builder = config.get("builder")
    hyper = dict(config.get("hyper", {}))
    return build_model(builder, rng=rng, **hyper)
