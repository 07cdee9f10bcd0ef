//! Subnetwork probing: learn hard-concrete masks over a small pre-trained
//! transformer encoder and compare the resulting probes with MLP probes.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod hard_concrete;
pub mod harness;
pub mod heads;

#[cfg(test)]
pub(crate) mod testing;
