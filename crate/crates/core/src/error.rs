use thiserror::Error;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid point cloud: {0}")]
    Cloud(String),
    #[error("k = {k} exceeds the {n} points available")]
    KTooLarge { k: usize, n: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("no keypoint chain survived cyclic mutual-nearest-neighbour selection")]
    NoKeypoints,
    #[error("need at least {need} keypoints for training, selection produced {got}")]
    TooFewKeypoints { need: usize, got: usize },
    #[error("feature row {row} of scene {scene} has zero norm; cosine similarity undefined")]
    ZeroNorm { scene: usize, row: usize },
    #[error("invalid effector: {0}")]
    Effector(String),
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every restart diverged to a non-finite energy")]
    AllRestartsFailed,
    #[error("target region label {0} has no points in the cloud")]
    EmptyRegion(i32),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
