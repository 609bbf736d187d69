//! Data-driven robust stabilization of control-affine systems through
//! Koopman lifting: data collection, consistency sets, EDMD identification,
//! LMI synthesis and certificate checking.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix the scalar to `f64`.

pub mod consistency;
pub mod edmd;
pub mod experiment;
pub mod io;
pub mod lifting;
pub mod linalg;
pub mod lmi;
pub mod plant;
pub mod scalar;
pub mod synthesis;
pub mod verify;

pub use scalar::Real;

pub type Dataset64 = consistency::Dataset<f64>;
pub type ConsistencySet64 = consistency::ConsistencySet<f64>;
pub type Dictionary64 = lifting::Dictionary<f64>;
pub type Model64 = edmd::LiftedBilinearModel<f64>;
pub type Plant64 = plant::ControlAffinePlant<f64>;
pub type Cert64 = synthesis::ControllerCert<f64>;
pub type Dataset32 = consistency::Dataset<f32>;
pub type Model32 = edmd::LiftedBilinearModel<f32>;
