"""Complex-valued layers, their baselines, and functional forms."""

from ..autodiff import Var
from ..ctensor import ComplexScalar, ComplexTensor
from .functional import (
    MAG_FLOOR,
    arcdist,
    cbias,
    cconv2d,
    cfc,
    channel_mean,
    cmul,
    complex_to_real,
    conj,
    conj_pair,
    creshape,
    crelu,
    div_pair,
    eq_batchnorm,
    eq_maxpool,
    flatten,
    gtrelu,
    manifold_distance,
    probe_loss,
    prototype_logits,
    real_part_sum,
    sqmag_loss,
    stack_reim,
    unit_phase,
    vector_mean,
    wrap_angle,
)
from .realops import avgpool, fc, real_conv2d, relu
from .stack import (
    BatchNormState,
    ComplexConv,
    ComplexFC,
    ComplexToReal,
    ConjugateLayer,
    CReLU,
    DivisionLayer,
    Econv,
    EqBatchNorm,
    EqMaxPool,
    EquivariantWrap,
    Flatten,
    GTReLU,
    Layer,
    lift_magnitudes,
    MDistTransform,
    PrototypeHead,
    RealAvgPool,
    RealConv,
    RealFC,
    RealReLU,
    StackReIm,
    WFMConv,
)
from .wfm import mdist_transform, minimize_circle, wfm_conv2d, wfm_layer


def equivariant_wrap(f, nonlin, floor=MAG_FLOOR):
    """Functional form of the equivariant non-linearity on a plain tensor.

    ``nonlin`` maps Var -> Var (e.g. ``crelu``); no tape is recorded.
    """
    x = Var(f)
    m = channel_mean(x)
    mhat = unit_phase(m, floor)
    g = cmul(x, conj(mhat))
    h = nonlin(g)
    return cmul(h, mhat).value


# Template instances for the layer registry; every kind the gradient checker
# and the CLI can name is constructed here at a small, fast-to-check size.
def make_layer(kind, rng):
    from ..ctensor import Rng

    if isinstance(rng, int):
        rng = Rng(rng)
    factories = {
        "econv": lambda: Econv(2, 3, 3, stride=1, padding=1, rng=rng),
        "econv_strided": lambda: Econv(3, 4, 3, stride=2, padding=1, rng=rng),
        "econv_grouped": lambda: Econv(4, 4, 2, groups=4, rng=rng),
        "complex_conv": lambda: ComplexConv(2, 3, 3, padding=1, rng=rng),
        "complex_fc": lambda: ComplexFC(6, 4, rng=rng),
        "crelu": CReLU,
        "gtrelu": lambda: GTReLU(3, r=0.1),
        "gtrelu_r0": lambda: GTReLU(3, r=0.0),
        "eq_wrap_crelu": lambda: EquivariantWrap(CReLU()),
        "eq_wrap_gtrelu": lambda: EquivariantWrap(GTReLU(3, r=0.0)),
        "eq_maxpool": lambda: EqMaxPool(2),
        "eq_batchnorm": lambda: EqBatchNorm(3),
        "division": lambda: DivisionLayer(3, rng=rng),
        "conjugate": lambda: ConjugateLayer(3, rng=rng),
        "prototype_euclidean": lambda: PrototypeHead(4, 6, "euclidean", False, rng=rng),
        "prototype_manifold": lambda: PrototypeHead(4, 6, "manifold", False, rng=rng),
        "prototype_invariant": lambda: PrototypeHead(4, 6, "manifold", True, rng=rng),
        "complex_to_real": ComplexToReal,
        "stack_reim": StackReIm,
        "flatten": Flatten,
        "real_conv": lambda: RealConv(2, 3, 3, padding=1, rng=rng),
        "real_relu": RealReLU,
        "real_fc": lambda: RealFC(5, 4, rng=rng),
        "real_avgpool": lambda: RealAvgPool(2),
        "wfm_conv": lambda: WFMConv(2, 3, 2, rng=rng),
        "mdist_transform": MDistTransform,
    }
    if kind not in factories:
        raise KeyError(f"unknown layer kind {kind!r}")
    return factories[kind]()


LAYER_KINDS = (
    "econv", "econv_strided", "econv_grouped", "complex_conv", "complex_fc",
    "crelu", "gtrelu", "gtrelu_r0", "eq_wrap_crelu", "eq_wrap_gtrelu",
    "eq_maxpool", "eq_batchnorm", "division", "conjugate",
    "prototype_euclidean", "prototype_manifold", "prototype_invariant",
    "complex_to_real", "stack_reim", "flatten",
    "real_conv", "real_relu", "real_fc", "real_avgpool",
    "wfm_conv", "mdist_transform",
)
