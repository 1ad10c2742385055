//! Building blocks for desk-scale federated learning.
//!
//! Everything exchanged between clients and the server is a flat
//! [`ParamVector`]. Clients run [`trainer::local_training`] (Adam with a
//! configurable momentum policy) and pass the resulting model difference
//! through a [`privacy::PrivacyPolicy`] before upload; the server folds the
//! sparse contributions into the global model with [`server::aggregate`].

pub mod client;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod privacy;
pub mod rng;
pub mod server;
pub mod snapshot;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Moments, ParamVector, SparseDelta};
