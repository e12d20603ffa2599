//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{
    softmax_in_place, Gradients, Graph, Var, EPSILON_NORM, LAYER_NORM_VAR_FLOOR, MASKED_LOGIT,
};
pub use tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backprop requires a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("degenerate vector with norm {norm:e} in cosine similarity")]
    DegenerateVector { norm: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("mask excludes every class")]
    EmptyMask,
}

/// Cosine similarity of two plain slices, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::Shape {
            op: "cosine",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for norm in [na, nb] {
        if norm.is_nan() || norm <= EPSILON_NORM {
            return Err(NumericsError::DegenerateVector { norm });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
