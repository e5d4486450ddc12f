//! Vertical federated traffic state estimation.
//!
//! A municipal-authority host and one or more mobility-provider guests
//! jointly train split traffic-state-estimation models without exchanging
//! raw data. Two training modes are provided: FedTSE, supervised against the
//! host's ground-truth labels, and FedTSE-PI, a label-free physics-informed
//! mode whose loss couples a cell-transmission-model predictor with partial
//! measurements; guest measurements enter the gradients only through a
//! secure inner-product subprotocol.

pub mod ctm;
pub mod scenario;
pub mod secure_ip;
pub mod transport;
pub mod error;
pub mod eval;
pub mod nn;
pub mod physloss;
pub mod protocol;

pub use error::{Error, Result};
