//! Dual-network operational forecasting on a synthetic gridded world.
//!
//! A ConvLSTM prediction network steps an aerosol state (AOD550 plus a
//! PM2.5 diagnostic) forward in time from exogenous meteorology and
//! emissions; a second ConvLSTM network estimates the forecast error from
//! sparse satellite-style observations and corrects the state every few
//! steps. The crate contains everything needed to generate the synthetic
//! truth, train both networks, run the forecast/assimilation cycle and
//! verify it.

pub mod tensor;
pub mod netblocks;
pub mod synthworld;
pub mod evalkit;
pub mod forecaster;
pub mod assimilator;
pub mod opsloop;
