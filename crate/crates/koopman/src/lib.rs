//! System identification for input-driven dynamical systems via linear
//! operator regression on snapshot data.
//!
//! The crate fits three related operator families from trajectory data:
//!
//! - **DMD** (`A = Z Y†`) on autonomous measurement pairs,
//! - **DMDc** (`G̃ = Z Ω†`, `G̃ = [A B]`) on state/input trios,
//! - **KIC**, which treats observables of state *and* input as the lifted
//!   state. The square variant also fits input dynamics; the restricted
//!   variant maps a rich input dictionary onto a smaller output dictionary,
//!   which recovers DMDc for identity observables.
//!
//! [`bench`] provides the reference systems (a linear map with inputs, a
//! slow-manifold system, and an SIR model with vaccination) used by the
//! verification suite in [`verify`].

pub mod bench;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod observables;
pub mod verify;

pub use data::{
    build_derivative_pair, build_pair, build_pair_many, build_trio, build_trio_many, load_csv,
    save_csv, SnapshotSet, Trajectory,
};
pub use error::{KoopmanError, Result};
pub use estimators::{fit_dmd, fit_dmdc, fit_kic, fit_kic_lifted, Dither, FitOptions, KicMode};
pub use linalg::{eig, pinv, svd, EigenDecomposition, SvdFactors, TruncationRule};
pub use models::{
    Diagnostics, KicBlocks, KoopmanModel, ShapeKind, SpectralDecomposition, TimeMode,
};
pub use observables::{parse_spec, restriction_indices, ObservableSpec, ObservableTerm, TermKind};
