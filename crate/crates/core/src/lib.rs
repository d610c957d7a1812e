//! Federated learning simulator with per-client nearest-neighbor memory.
//!
//! A global MLP is trained with simulated federated averaging; each client
//! then embeds its local data with the global model's hidden representation
//! into a key-value datastore. Predictions mix a kernel-weighted kNN label
//! posterior from that datastore with the global model's softmax output,
//! using a per-client mixing weight tuned on validation data.

pub mod data;
pub mod datastore;
pub mod error;
pub mod federation;
pub mod harness;
mod io;
pub mod nn;
pub mod personalize;
pub mod seed;

pub use data::{ClientDataset, LabeledPool, Sample};
pub use datastore::{Datastore, NeighborIndex, Neighborhood, Policy, PrototypeStore};
pub use error::{FedError, Result};
pub use federation::{FedConfig, RoundLog};
pub use nn::{Activation, LayerSpec, Model};
pub use personalize::{KernelConfig, PersonalizedPredictor};
