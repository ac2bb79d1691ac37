//! Main, auxiliary and joint objectives.

use super::network::ForwardPass;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor, Var};

/// Mean binary cross-entropy between herb probabilities and binary labels.
pub fn loss_main(herb_probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if let Some(bad) = labels.data().iter().find(|&&g| g != 0.0 && g != 1.0) {
        return Err(Error::InvalidArgument(format!("herb labels must be 0 or 1, found {bad}")));
    }
    ops::bce_mean(herb_probs, labels)
}

/// Batch mean of the 1/m-scaled KL divergence from predicted to LDA topics.
pub fn loss_aux(topic_probs: &Tensor, topic_gt: &Tensor) -> Result<f64> {
    ops::kl_mean(topic_probs, topic_gt)
}

pub fn loss_total(main: f64, aux: f64, lambda: f64) -> f64 {
    main + lambda * aux
}

/// Loss nodes appended to a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub main: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// Appends `main + λ·aux` to the pass's tape. `topic_gt` is required exactly
/// when the network has a topic head.
pub fn record_losses(
    pass: &mut ForwardPass,
    labels: &Tensor,
    topic_gt: Option<&Tensor>,
    lambda: f64,
) -> Result<LossVars> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::config("lambda", "must be finite and >= 0"));
    }
    let main = pass.tape.bce_mean(pass.herb_probs, labels)?;
    let (aux, total) = match (pass.topic_probs, topic_gt) {
        (Some(tp), Some(gt)) => {
            let aux = pass.tape.kl_mean(tp, gt)?;
            let weighted = pass.tape.scale(aux, lambda);
            (Some(aux), pass.tape.add(main, weighted)?)
        }
        (Some(_), None) => return Err(Error::MissingTopics("topic head present but no topic ground truth".into())),
        (None, _) => (None, main),
    };
    Ok(LossVars { main, aux, total })
}
