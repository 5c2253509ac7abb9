"""Monte Carlo evaluation of Schrodinger-type semigroups on Hermitian
vector bundles over model Riemannian manifolds, plus the quadrature and
grid oracles used to verify the semigroup inequalities numerically."""

__version__ = "0.1.0"

from .bundles import BundleSpec, magnetic_bundle, tangent_bundle, trivial_bundle  # noqa: F401
from .geometry import (  # noqa: F401
    Circle,
    Euclidean,
    FlatTorus,
    HyperbolicPlane,
    NoClosedFormError,
    OpenSubdomain,
    Sphere2,
    ball,
)
from .potentials import (  # noqa: F401
    OneForm,
    PotentialSpec,
    ScalarField,
    SectionSpec,
    angle_form,
    constant_field,
    constant_section,
    coulomb_field,
    gaussian_section,
    harmonic_field,
    harmonic_ground_section,
    landau_form,
    well_field,
)
from .rng import RngKey  # noqa: F401
