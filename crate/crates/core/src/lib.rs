//! Eigenbasis sorting of two incoherent point sources.
//!
//! The crate simulates an imaging pipeline in which photons from two
//! incoherent sources are pixelated, routed into a quantum memory, and
//! filtered into eigenvectors of the pixel density operator. Expectation
//! values in the eigenbasis are then turned back into per-source values.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod kv;
pub mod numkit;
pub mod optics;
pub mod qpca;
pub mod qsp;

pub use error::{Error, Result};
pub use numkit::{ComplexMatrix, DensityOperator, PureState, C64};
pub use optics::{PixelGrid, PixelatedState, PupilFunction, Scene};
pub use qsp::{FilterLabel, QspPlan};
pub use estimation::{EigenModel, OverlapSet};
