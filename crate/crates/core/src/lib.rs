//! Masked-autoencoder anomaly segmentation for multispectral field imagery.
//!
//! The core is generic over the scalar type (`f32`/`f64`); aliases below fix
//! the common choice of `f64`.

pub mod anomaly;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod scalar;
pub mod seed;
pub mod selftest;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numcore::Tensor<f64>;
pub type Tensor32 = numcore::Tensor<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type ParamStore64 = numcore::ParamStore<f64>;
pub type Model64 = models::MaskedAutoencoder<f64>;
pub type Model32 = models::MaskedAutoencoder<f32>;
pub type SwinMae64 = models::SwinMae<f64>;
pub type VitMae64 = models::VitMae<f64>;
pub type ErrorMap64 = anomaly::ErrorMap<f64>;
pub type TrainState64 = anomaly::TrainState<f64>;
