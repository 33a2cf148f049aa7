//! Spatial propagation: neighbor rules, affinity normalisation, the
//! differentiable update and a dense-matrix reference.
//!
//! Every step is a simultaneous (Jacobi) update of all pixels, including the
//! directional rule, whose original formulation scans rows sequentially.

mod neighbors;
mod propagate;

pub use neighbors::{neighbors_cspn, neighbors_raspn, neighbors_spn, Direction, NeighborRule, NeighborSet, RegionMask};
pub use propagate::{
    normalize_affinity, normalize_affinity_batch, oracle_propagate, propagate, propagate_batch, propagate_values, spn_step,
    spn_step_batch, update_matrix, ORACLE_MAX_PIXELS,
};
