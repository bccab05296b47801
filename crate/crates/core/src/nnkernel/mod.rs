//! Dense numerical core: the transformer head, its losses and AdamW.

mod adamw;
mod head;
mod loss;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use head::{
    classifier_backward, classifier_logits, encode, head_backward, head_forward,
    head_forward_traced, EncoderLayerParams, ForwardTrace, GradientSet, HeadDims, HeadOutput,
    HeadParams, LAYER_NORM_EPS,
};
pub use loss::{cross_entropy, kd_kl, softmax_rows, weighted_cross_entropy};
pub use tensor::Tensor2;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} at row {row} is out of range for {n_classes} classes")]
    Label {
        row: usize,
        label: u32,
        n_classes: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

/// Mean cross-entropy of the head on a labelled batch, with full gradients.
pub fn loss_and_gradients(
    params: &HeadParams,
    batch: &Tensor2,
    labels: &[u32],
) -> Result<(f64, GradientSet), KernelError> {
    let trace = head_forward_traced(params, batch)?;
    let (loss, dlogits) = cross_entropy(trace.logits(), labels)?;
    let grads = head_backward(params, &trace, &dlogits)?;
    Ok((loss, grads))
}
