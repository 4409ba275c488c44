//! Layers, networks, optimizers and checkpoints for straight-through sparse training.

pub mod checkpoint;
pub mod layer;
pub mod network;
pub mod optim;

pub use layer::{
    EffectiveWeight, Fp8Config, LayerMode, LinearCache, MvuePlacement, Parameter, Pass, SparseLinearLayer,
};
pub use network::{
    loss_and_grad, Activation, Batch, LossKind, Network, SparseSettings, StepOutput, Tape, Targets, Topology,
};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
