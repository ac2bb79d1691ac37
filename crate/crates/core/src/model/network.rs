use indexmap::IndexMap;
use rand::RngCore;

use super::params::{channel_prefixes, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::ops::ChannelStats;
use crate::tensor::{Tape, Tensor, Var};

/// Forward mode. Train mode uses batch statistics and samples dropout masks
/// from the supplied generator; infer mode is deterministic.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    /// Per-herb probabilities, `[N, n]`.
    pub herb_probs: Tensor,
    /// Therapy-topic distribution per row, `[N, m]`, aux variant only.
    pub topic_probs: Option<Tensor>,
}

/// A recorded forward pass, ready for loss construction and backward.
pub struct ForwardPass {
    pub tape: Tape,
    pub herb_probs: Var,
    pub topic_probs: Option<Var>,
    /// Leaf handle of every trainable tensor, in parameter order.
    pub params: IndexMap<String, Var>,
    /// Batch statistics observed by each batch-norm layer (train mode only).
    pub batch_stats: Vec<(String, ChannelStats)>,
}

impl ForwardPass {
    pub fn outputs(&self) -> ModelOutputs {
        ModelOutputs {
            herb_probs: self.tape.value(self.herb_probs).clone(),
            topic_probs: self.topic_probs.map(|v| self.tape.value(v).clone()),
        }
    }
}

fn check_batch(params: &ModelParameters, batch: &Tensor) -> Result<()> {
    let s = &params.spec;
    match batch.shape() {
        &[_, h, w, c] if h == s.height && w == s.width && c == s.channels => Ok(()),
        other => Err(Error::shape(
            "forward",
            format!("batch {other:?} does not match [N, {}, {}, {}]", s.height, s.width, s.channels),
        )),
    }
}

/// Runs the network on `batch` (`[N,H,W,3]`, values in `[0,1]`) and records
/// every primitive on a fresh tape.
///
/// Each channel is `blocks x (conv -> batchnorm -> relu -> maxpool)`, then a
/// dense encoder with relu and dropout. The encodings (one or two) feed the
/// merge layer and the sigmoid herb head; the topic head reads the dropped-out
/// auxiliary encoding.
pub fn record_forward(params: &ModelParameters, batch: &Tensor, mut mode: Mode<'_>) -> Result<ForwardPass> {
    check_batch(params, batch)?;
    let spec = &params.spec;
    let mut tape = Tape::new();
    let mut vars = IndexMap::new();
    for (name, t) in &params.tensors {
        vars.insert(name.clone(), tape.leaf(t.clone()));
    }
    let p = |name: &str| -> Result<Var> {
        vars.get(name).copied().ok_or_else(|| Error::SpecMismatch(format!("missing parameter `{name}`")))
    };
    let input = tape.leaf(batch.clone());
    let mut batch_stats = Vec::new();
    let mut encodings = Vec::new();

    for (ch, _) in channel_prefixes(spec) {
        let mut x = input;
        for b in 0..spec.conv_blocks {
            x = tape.conv2d(x, p(&format!("{ch}.conv{b}.kernel"))?, p(&format!("{ch}.conv{b}.bias"))?)?;
            let (gamma, beta) = (p(&format!("{ch}.bn{b}.gamma"))?, p(&format!("{ch}.bn{b}.beta"))?);
            let bn = format!("{ch}.bn{b}");
            x = if mode.is_train() {
                let (y, stats) = tape.batchnorm_train(x, gamma, beta)?;
                batch_stats.push((bn, stats));
                y
            } else {
                let stats = params
                    .running
                    .get(&bn)
                    .ok_or_else(|| Error::SpecMismatch(format!("missing running statistics `{bn}`")))?;
                tape.batchnorm_frozen(x, gamma, beta, stats)?
            };
            x = tape.relu(x);
            x = tape.maxpool2(x)?;
        }
        let flat = tape.flatten(x)?;
        let enc = tape.dense(flat, p(&format!("{ch}.encode.weight"))?, p(&format!("{ch}.encode.bias"))?)?;
        let mut enc = tape.relu(enc);
        let rate = if ch == "main" { spec.dropout.main } else { spec.dropout.aux };
        if let Mode::Train(rng) = &mut mode {
            enc = tape.dropout(enc, rate, rng)?;
        }
        encodings.push(enc);
    }

    let merged_in = match encodings.as_slice() {
        [main] => *main,
        [main, aux] => tape.concat(*main, *aux)?,
        _ => unreachable!("one or two channels"),
    };
    let merged = tape.dense(merged_in, p("merge.weight")?, p("merge.bias")?)?;
    let mut merged = tape.relu(merged);
    if let Mode::Train(rng) = &mut mode {
        merged = tape.dropout(merged, spec.dropout.merge, rng)?;
    }
    let logits = tape.dense(merged, p("out.weight")?, p("out.bias")?)?;
    let herb_probs = tape.sigmoid(logits);

    let topic_probs = if spec.variant.has_topic_head() {
        let logits = tape.dense(encodings[1], p("aux_out.weight")?, p("aux_out.bias")?)?;
        Some(tape.softmax(logits))
    } else {
        None
    };

    Ok(ForwardPass { tape, herb_probs, topic_probs, params: vars, batch_stats })
}

/// Forward pass returning only the outputs.
pub fn forward(params: &ModelParameters, batch: &Tensor, mode: Mode<'_>) -> Result<ModelOutputs> {
    Ok(record_forward(params, batch, mode)?.outputs())
}

/// Infer-mode forward over `images` in chunks of `chunk` samples.
pub fn predict_batched(params: &ModelParameters, images: &[&Tensor], chunk: usize) -> Result<ModelOutputs> {
    let mut herbs = Vec::new();
    let mut topics: Option<Vec<f64>> = params.spec.variant.has_topic_head().then(Vec::new);
    for group in images.chunks(chunk.max(1)) {
        let batch = Tensor::stack(group)?;
        let out = forward(params, &batch, Mode::Infer)?;
        herbs.extend_from_slice(out.herb_probs.data());
        if let (Some(acc), Some(t)) = (topics.as_mut(), out.topic_probs) {
            acc.extend_from_slice(t.data());
        }
    }
    let n = images.len();
    Ok(ModelOutputs {
        herb_probs: Tensor::new([n, params.spec.herb_count], herbs)?,
        topic_probs: match (topics, params.spec.topic_count) {
            (Some(t), Some(m)) => Some(Tensor::new([n, m], t)?),
            _ => None,
        },
    })
}
