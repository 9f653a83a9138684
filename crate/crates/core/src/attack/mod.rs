//! The two query-free attacks and the direct-query baseline.

pub mod augment;
pub mod direct;
pub mod with_dt;
pub mod without_dt;
