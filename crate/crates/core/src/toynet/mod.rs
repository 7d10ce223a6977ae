//! Small end-to-end segmentation network with an optional frequency branch,
//! procedural day/night scenes, training, evaluation and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod net;
pub mod synth;
pub mod train;

pub use ablation::{ablation_run, AblationConfig, AblationReport, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{ToyNetConfig, TrainConfig, Variant};
pub use eval::{evaluate_miou, evaluate_net, predict, MiouReport};
pub use net::ToyNet;
pub use synth::{synth_dataset, synth_scene, DataSpec, Style, SynthScene};
pub use train::{poly_lr, train, TrainLog};
