//! Nonparametric maximum likelihood estimation of convex-transformed
//! densities `p = h∘g`, with exact polyhedral representations of the
//! estimator, simplex-exact integration, and an experiment harness for
//! consistency and minimax-rate studies.

pub mod convexgeom;
pub mod rng;
pub mod scalar;
pub mod transforms;

pub mod integrate;
pub mod mle;

pub mod evalsim;
pub mod lowerbound;

/// Concrete double-precision transformation used throughout the estimator
/// and experiment layers.
pub type Transformation = transforms::MonotoneTransform<f64>;

pub use convexgeom::{
    general_position, AffinePiece, ConvexFn, GeomError, LevelRegion, MaxAffineFn, McEstimate,
    PolyhedralFn, SimplexCell, Subgradient,
};
pub use transforms::{Direction, TransformError, TransformKind};
