//! Efficient guidance, repetitive guidance with adaptive fusion, the dynamic
//! convolution baselines, and the analytic kernel-memory model.

mod eg;
mod memory;
mod reference;
mod rg;

pub use eg::{eg_unit, EgParams};
pub use memory::{memory_cost, GuidanceMethod, MemoryCost, MemoryModel, MemoryReport, MemoryRow};
pub use reference::{apply_dynamic_kernels, cf_reference, dc_reference, CfParams, DcParams, GuidedOutput};
pub use rg::{af_fuse, rg_module, AfParams, RgParams, RgStep};
