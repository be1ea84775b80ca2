//! Shared oracles for the integration and acceptance targets.
#![allow(dead_code)]

pub mod grad;
pub mod oracle;
