//! Fredholm verdicts and essential spectra for differential operators on
//! model non-compact manifolds.
//!
//! The pipeline: a [`geometry::StratifiedSpace`] describes the
//! compactification and its boundary strata, an operator is written over the
//! frame of vector fields of its calculus ([`calculus`]), limit operators are
//! extracted at every boundary orbit ([`limits`]), and their invertibility is
//! decided through Fourier symbol families ([`spectral`]). The [`oracle`]
//! module checks everything against finite-difference truncations.

pub mod calculus;
pub mod geometry;
pub mod limits;
pub mod opdsl;
pub mod oracle;
pub mod sampling;
pub mod spectral;
