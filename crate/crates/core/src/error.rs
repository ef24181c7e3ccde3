use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}) has zero area")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("detector has no trained weights")]
    Untrained,

    #[error("training failed: {0}")]
    Training(String),

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("nothing to attack: the detection set is empty")]
    NothingToAttack,

    #[error("class {0} is not among the detections")]
    ClassAbsent(usize),

    #[error("every class of the vocabulary is already predicted; no free target class")]
    VocabularyExhausted,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation infeasible: {0}")]
    Infeasible(String),

    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
