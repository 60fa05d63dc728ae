//! Locality-constrained block-sparse decoding attention, a two-tier paged
//! KV-cache manager and a parametric offloading cost simulator.

pub mod attention;
pub mod kvcache;
pub mod locality;
pub mod numerics;
pub mod sim;
