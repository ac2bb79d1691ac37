use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::spec::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::stable_hash;
use crate::tensor::ops::ChannelStats;
use crate::tensor::Tensor;

/// How a weight tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He normal, for weights feeding a ReLU.
    He,
    /// Glorot uniform, for the output layers.
    Glorot,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Trainable tensors plus batch-norm running statistics for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub spec: ArchitectureSpec,
    pub tensors: IndexMap<String, Tensor>,
    pub running: IndexMap<String, ChannelStats>,
}

pub(crate) fn channel_prefixes(spec: &ArchitectureSpec) -> Vec<(&'static str, usize)> {
    let mut out = vec![("main", spec.main_kernels)];
    if spec.variant.has_aux_channel() {
        out.push(("aux", spec.aux_kernels));
    }
    out
}

/// Ordered parameter inventory implied by `spec`.
pub fn inventory(spec: &ArchitectureSpec) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| slots.push(ParamSlot { name, shape, init });
    let (kh, kw) = spec.kernel_size;
    let (ph, pw) = spec.pooled_extent();
    for (ch, k) in channel_prefixes(spec) {
        for b in 0..spec.conv_blocks {
            let cin = if b == 0 { spec.channels } else { k };
            push(format!("{ch}.conv{b}.kernel"), vec![kh, kw, cin, k], Init::He);
            push(format!("{ch}.conv{b}.bias"), vec![k], Init::Zeros);
            push(format!("{ch}.bn{b}.gamma"), vec![k], Init::Ones);
            push(format!("{ch}.bn{b}.beta"), vec![k], Init::Zeros);
        }
    }
    push("main.encode.weight".into(), vec![ph * pw * spec.main_kernels, spec.main_encode_width], Init::He);
    push("main.encode.bias".into(), vec![spec.main_encode_width], Init::Zeros);
    let mut merge_in = spec.main_encode_width;
    if spec.variant.has_aux_channel() {
        push("aux.encode.weight".into(), vec![ph * pw * spec.aux_kernels, spec.aux_encode_width], Init::He);
        push("aux.encode.bias".into(), vec![spec.aux_encode_width], Init::Zeros);
        merge_in += spec.aux_encode_width;
    }
    push("merge.weight".into(), vec![merge_in, spec.merge_width], Init::He);
    push("merge.bias".into(), vec![spec.merge_width], Init::Zeros);
    push("out.weight".into(), vec![spec.merge_width, spec.herb_count], Init::Glorot);
    push("out.bias".into(), vec![spec.herb_count], Init::Zeros);
    if let Some(m) = spec.topic_count.filter(|_| spec.variant.has_topic_head()) {
        push("aux_out.weight".into(), vec![spec.aux_encode_width, m], Init::Glorot);
        push("aux_out.bias".into(), vec![m], Init::Zeros);
    }
    slots
}

/// Batch-norm layer prefixes with their channel counts.
pub fn bn_layers(spec: &ArchitectureSpec) -> Vec<(String, usize)> {
    channel_prefixes(spec)
        .into_iter()
        .flat_map(|(ch, k)| (0..spec.conv_blocks).map(move |b| (format!("{ch}.bn{b}"), k)))
        .collect()
}

fn init_tensor(slot: &ParamSlot, seed: u64) -> Result<Tensor> {
    let len: usize = slot.shape.iter().product();
    let fan_in: usize = slot.shape[..slot.shape.len() - 1].iter().product();
    let fan_out = *slot.shape.last().unwrap();
    // Each tensor draws from its own stream so adding or removing a head
    // leaves every other tensor's initial values unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(slot.name.as_bytes()));
    let data = match slot.init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::He => {
            let normal =
                Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        }
        Init::Glorot => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let uniform = Uniform::new(-limit, limit).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (0..len).map(|_| uniform.sample(&mut rng)).collect()
        }
    };
    Tensor::new(slot.shape.clone(), data)
}

/// Initializes every parameter of `spec` deterministically from `seed`.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParameters> {
    spec.validate()?;
    let mut tensors = IndexMap::new();
    for slot in inventory(spec) {
        let t = init_tensor(&slot, seed)?;
        tensors.insert(slot.name, t);
    }
    let running = bn_layers(spec).into_iter().map(|(name, c)| (name, ChannelStats::identity(c))).collect();
    Ok(ModelParameters { spec: spec.clone(), tensors, running })
}

impl ModelParameters {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::SpecMismatch(format!("missing parameter `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks tensor names and shapes against the embedded spec.
    pub fn check_consistent(&self) -> Result<()> {
        let slots = inventory(&self.spec);
        if slots.len() != self.tensors.len() {
            return Err(Error::SpecMismatch(format!(
                "spec implies {} tensors, found {}",
                slots.len(),
                self.tensors.len()
            )));
        }
        for (slot, (name, t)) in slots.iter().zip(&self.tensors) {
            if &slot.name != name || slot.shape != t.shape() {
                return Err(Error::SpecMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name,
                    slot.shape,
                    name,
                    t.shape()
                )));
            }
        }
        for (name, c) in bn_layers(&self.spec) {
            match self.running.get(&name) {
                Some(s) if s.mean.len() == c && s.var.len() == c => {}
                _ => return Err(Error::SpecMismatch(format!("running statistics for `{name}` missing or misshapen"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchitectureSpec::mini(Variant::DualChannelAux, 12, Some(3));
        let a = build_model(&spec, 9).unwrap();
        let b = build_model(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 10).unwrap();
        assert_ne!(a.tensors["main.conv0.kernel"], c.tensors["main.conv0.kernel"]);
    }

    #[test]
    fn single_channel_has_no_aux_tensors() {
        let p = build_model(&ArchitectureSpec::mini(Variant::SingleChannel, 12, None), 1).unwrap();
        assert!(p.tensors.keys().all(|k| !k.starts_with("aux")));
        assert!(p.running.keys().all(|k| !k.starts_with("aux")));
        p.check_consistent().unwrap();
    }

    #[test]
    fn shared_tensors_identical_across_variants() {
        let dual = build_model(&ArchitectureSpec::mini(Variant::DualChannel, 12, None), 4).unwrap();
        let aux = build_model(&ArchitectureSpec::mini(Variant::DualChannelAux, 12, Some(3)), 4).unwrap();
        for (name, t) in &dual.tensors {
            assert_eq!(&aux.tensors[name], t, "{name}");
        }
    }

    #[test]
    fn glorot_and_he_scales() {
        let p = build_model(&ArchitectureSpec::paper(Variant::SingleChannel, 566, None), 2).unwrap();
        let w = &p.tensors["out.weight"];
        let limit = (6.0f64 / (256.0 + 566.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let k = &p.tensors["main.conv1.kernel"];
        let var = k.data().iter().map(|v| v * v).sum::<f64>() / k.len() as f64;
        let expected = 2.0 / (3.0 * 3.0 * 80.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }
}
