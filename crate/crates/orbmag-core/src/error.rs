//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the physics modules.
///
/// Validation reports that are expected outcomes (e.g. a potential failing its
/// Hermitian-symmetry check) are returned as values, not errors; this type is
/// reserved for conditions that make the requested computation meaningless.
#[derive(Debug, Error)]
pub enum Error {
    /// The plane-wave cutoff cannot represent the potential exactly.
    #[error("basis cutoff {cutoff} is smaller than the potential support radius {support}")]
    CutoffTooSmall { cutoff: i32, support: i32 },

    /// Unknown named potential fixture.
    #[error("unknown potential name {0:?} (expected one of: free, cosine3d, separable_gap)")]
    UnknownPotential(String),

    /// The dense Hermitian eigensolver failed to converge.
    #[error("eigensolver failed to converge at k = ({0}, {1}, {2})")]
    EigensolverFailed(f64, f64, f64),

    /// Requested density exceeds what the truncated model can hold.
    #[error("density {rho0} outside the representable range (0, {max_states}) of this basis")]
    DensityOutOfRange { rho0: f64, max_states: f64 },

    /// The Fermi energy lands on a closed gap: the semimetal case is out of scope.
    #[error("semimetal at rho0 = {rho0}: gap between bands {n} and {n_plus_1} is closed within the grid resolution {tol:.3e}")]
    Semimetal {
        rho0: f64,
        n: usize,
        n_plus_1: usize,
        tol: f64,
    },

    /// A band was degenerate where an isolated band was required.
    #[error("band {band} is degenerate at k = ({k0}, {k1}, {k2}) (gap {gap:.3e} below threshold)")]
    DegenerateBand {
        band: usize,
        k0: f64,
        k1: f64,
        k2: f64,
        gap: f64,
    },

    /// A derivative order beyond the implemented recurrence depth was requested.
    #[error("derivative order {0} of the Fermi log-kernel exceeds the supported maximum {1}")]
    DerivativeOrder(usize, usize),

    /// Both edge integrals of the fixed-point map underflowed.
    #[error("fixed-point map underflow: beta = {beta} too large for this gap width in double precision")]
    FixedPointUnderflow { beta: f64 },

    /// Wrong classification for the requested zero-temperature formula.
    #[error("classification mismatch: {0}")]
    WrongClassification(String),

    /// The Fermi surface touches another band or has degenerate gradients.
    #[error("Fermi surface check failed: {0}")]
    SurfaceCheck(String),

    /// Band cutoff J exceeds the basis size.
    #[error("band cutoff J = {j} exceeds basis dimension {dim}")]
    BandCutoff { j: usize, dim: usize },

    /// Effective-mass Hessian not positive definite.
    #[error("Hessian of E_1 at k = 0 has non-positive eigenvalue {0}; increase the cutoff or check the fixture")]
    NonPositiveMass(f64),

    /// The quadrature oracle's adaptive refinement bottomed out above tolerance.
    #[error("quadrature refinement did not converge; achieved error estimate {achieved:.3e}")]
    QuadratureNotConverged { achieved: f64 },

    /// Cache file I/O or format problems.
    #[error("cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
