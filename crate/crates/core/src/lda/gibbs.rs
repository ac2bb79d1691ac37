use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A document is the set of herb ids of one prescription.
pub type Corpus = Vec<Vec<usize>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaConfig {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub burn_in: usize,
    pub samples: usize,
    /// Fold-in sweeps for held-out prescriptions, and how many trailing
    /// sweeps are averaged.
    pub infer_sweeps: usize,
    pub infer_average: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// Conventional priors `α = 50/m`, `β = 0.01`.
    pub fn with_topics(topics: usize) -> Self {
        LdaConfig {
            topics,
            alpha: 50.0 / topics.max(1) as f64,
            beta: 0.01,
            burn_in: 200,
            samples: 100,
            infer_sweeps: 50,
            infer_average: 25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 {
            return Err(Error::config("lda.topics", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("lda.alpha", "must be > 0"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("lda.beta", "must be > 0"));
        }
        if self.samples == 0 {
            return Err(Error::config("lda.samples", "must be >= 1"));
        }
        if self.infer_sweeps == 0 || self.infer_average == 0 || self.infer_average > self.infer_sweeps {
            return Err(Error::config("lda.infer_average", "need 1 <= infer_average <= infer_sweeps"));
        }
        Ok(())
    }
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self::with_topics(16)
    }
}

/// Normalized topic probabilities for one prescription.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicDistribution(pub Vec<f64>);

impl TopicDistribution {
    pub fn uniform(m: usize) -> Self {
        TopicDistribution(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// `(n_Pk + α) / (Σ_t n_Pt + m·α)` for every topic k.
pub fn doc_topic_distribution(counts: &[usize], alpha: f64) -> TopicDistribution {
    let m = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let denom = total as f64 + m * alpha;
    TopicDistribution(counts.iter().map(|&c| (c as f64 + alpha) / denom).collect())
}

/// Normalized collapsed-Gibbs conditional for one token whose own counts
/// have already been removed.
///
/// `doc_counts[k]` is `n_Pk`, `herb_counts[k]` is `n_kh` for the token's
/// herb, `topic_totals[k]` is `Σ_j n_kh_j`.
pub fn topic_conditional(
    doc_counts: &[usize],
    herb_counts: &[usize],
    topic_totals: &[usize],
    alpha: f64,
    beta: f64,
    herb_count: usize,
) -> Vec<f64> {
    let mut w = Vec::with_capacity(doc_counts.len());
    topic_weights(doc_counts, |k| herb_counts[k], topic_totals, alpha, beta, herb_count, &mut w);
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Unnormalized weights of the conditional, written into `out`.
fn topic_weights(
    doc_counts: &[usize],
    herb_count_of: impl Fn(usize) -> usize,
    topic_totals: &[usize],
    alpha: f64,
    beta: f64,
    herb_count: usize,
    out: &mut Vec<f64>,
) {
    let m = doc_counts.len();
    let doc_total: usize = doc_counts.iter().sum();
    let doc_denom = doc_total as f64 + m as f64 * alpha;
    let herb_beta = herb_count as f64 * beta;
    out.clear();
    for k in 0..m {
        let doc_term = (doc_counts[k] as f64 + alpha) / doc_denom;
        let herb_term = (herb_count_of(k) as f64 + beta) / (topic_totals[k] as f64 + herb_beta);
        out.push(doc_term * herb_term);
    }
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Topic assignments and the count arrays they induce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GibbsState {
    /// Per document, per token topic.
    pub z: Vec<Vec<usize>>,
    /// Document x topic counts.
    pub n_pk: Vec<Vec<usize>>,
    /// Topic x herb counts.
    pub n_kh: Vec<Vec<usize>>,
    /// Per-topic totals.
    pub n_k: Vec<usize>,
}

impl GibbsState {
    /// Uniformly random initial assignments.
    pub fn random(corpus: &Corpus, topics: usize, herb_count: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut state = GibbsState {
            z: Vec::with_capacity(corpus.len()),
            n_pk: vec![vec![0; topics]; corpus.len()],
            n_kh: vec![vec![0; herb_count]; topics],
            n_k: vec![0; topics],
        };
        for (d, doc) in corpus.iter().enumerate() {
            let mut zd = Vec::with_capacity(doc.len());
            for &h in doc {
                if h >= herb_count {
                    return Err(Error::InvalidArgument(format!("document {d} has herb id {h} >= {herb_count}")));
                }
                let k = rng.random_range(0..topics);
                zd.push(k);
                state.n_pk[d][k] += 1;
                state.n_kh[k][h] += 1;
                state.n_k[k] += 1;
            }
            state.z.push(zd);
        }
        Ok(state)
    }

    pub fn topics(&self) -> usize {
        self.n_k.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.n_k.iter().sum()
    }

    /// Recounts everything from `z` and compares with the stored arrays.
    pub fn check_consistent(&self, corpus: &Corpus) -> Result<()> {
        let m = self.topics();
        let n = self.n_kh.first().map_or(0, Vec::len);
        if self.z.len() != corpus.len() || self.n_pk.len() != corpus.len() || self.n_kh.len() != m {
            return Err(Error::InconsistentCounts("array extents do not match the corpus".into()));
        }
        let mut n_kh = vec![vec![0usize; n]; m];
        for (d, (doc, zd)) in corpus.iter().zip(&self.z).enumerate() {
            if doc.len() != zd.len() {
                return Err(Error::InconsistentCounts(format!(
                    "document {d} has {} tokens but {} assignments",
                    doc.len(),
                    zd.len()
                )));
            }
            let mut n_pk = vec![0usize; m];
            for (&h, &k) in doc.iter().zip(zd) {
                if k >= m || h >= n {
                    return Err(Error::InconsistentCounts(format!("document {d}: topic {k} / herb {h} out of range")));
                }
                n_pk[k] += 1;
                n_kh[k][h] += 1;
            }
            if n_pk != self.n_pk[d] {
                return Err(Error::InconsistentCounts(format!("document {d} topic counts")));
            }
        }
        if n_kh != self.n_kh {
            return Err(Error::InconsistentCounts("topic-herb counts".into()));
        }
        for k in 0..m {
            if self.n_kh[k].iter().sum::<usize>() != self.n_k[k] {
                return Err(Error::InconsistentCounts(format!("topic {k} total")));
            }
        }
        Ok(())
    }

    /// One pass over every token with a caller-supplied draw:
    /// `choose(weights, previous_topic)`.
    pub fn sweep_with(&mut self, corpus: &Corpus, config: &LdaConfig, mut choose: impl FnMut(&[f64], usize) -> usize) {
        let n = self.n_kh.first().map_or(0, Vec::len);
        let mut weights = Vec::with_capacity(self.topics());
        for (d, doc) in corpus.iter().enumerate() {
            for (i, &h) in doc.iter().enumerate() {
                let old = self.z[d][i];
                self.n_pk[d][old] -= 1;
                self.n_kh[old][h] -= 1;
                self.n_k[old] -= 1;
                let n_kh = &self.n_kh;
                topic_weights(&self.n_pk[d], |k| n_kh[k][h], &self.n_k, config.alpha, config.beta, n, &mut weights);
                let new = choose(&weights, old);
                self.z[d][i] = new;
                self.n_pk[d][new] += 1;
                self.n_kh[new][h] += 1;
                self.n_k[new] += 1;
            }
        }
    }
}

/// One Gibbs sweep: every token is removed, resampled from its conditional
/// and re-added. Count consistency is verified on entry.
pub fn gibbs_sweep(state: &mut GibbsState, corpus: &Corpus, config: &LdaConfig, rng: &mut impl Rng) -> Result<()> {
    state.check_consistent(corpus)?;
    state.sweep_with(corpus, config, |w, _| draw(w, rng));
    Ok(())
}

/// Frozen topic-herb counts of a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicModel {
    pub alpha: f64,
    pub beta: f64,
    pub n_kh: Vec<Vec<u64>>,
    pub n_k: Vec<u64>,
    pub vocab_hash: u64,
}

impl TopicModel {
    pub fn topics(&self) -> usize {
        self.n_k.len()
    }

    pub fn herb_count(&self) -> usize {
        self.n_kh.first().map_or(0, Vec::len)
    }

    /// Smoothed topic-herb distribution `(n_kh + β) / (n_k + n·β)`.
    pub fn phi(&self, k: usize) -> Vec<f64> {
        let n = self.herb_count() as f64;
        let denom = self.n_k[k] as f64 + n * self.beta;
        self.n_kh[k].iter().map(|&c| (c as f64 + self.beta) / denom).collect()
    }
}

fn count_tokens(corpus: &Corpus) -> usize {
    corpus.iter().map(Vec::len).sum()
}

/// Fits LDA by collapsed Gibbs sampling. Returns the frozen model and each
/// document's topic distribution averaged over the sampling sweeps.
pub fn fit(corpus: &Corpus, herb_count: usize, config: &LdaConfig) -> Result<(TopicModel, Vec<TopicDistribution>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if let Some(d) = corpus.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("document {d} is empty")));
    }
    let tokens = count_tokens(corpus);
    if config.topics > tokens {
        return Err(Error::InvalidArgument(format!("{} topics exceed {tokens} tokens", config.topics)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GibbsState::random(corpus, config.topics, herb_count, &mut rng)?;
    for _ in 0..config.burn_in {
        state.sweep_with(corpus, config, |w, _| draw(w, &mut rng));
    }
    let mut acc = vec![vec![0.0; config.topics]; corpus.len()];
    for _ in 0..config.samples {
        state.sweep_with(corpus, config, |w, _| draw(w, &mut rng));
        for (a, counts) in acc.iter_mut().zip(&state.n_pk) {
            for (v, p) in a.iter_mut().zip(doc_topic_distribution(counts, config.alpha).0) {
                *v += p;
            }
        }
    }
    state.check_consistent(corpus)?;
    debug!("lda fit: {} docs, {tokens} tokens, {} sweeps", corpus.len(), config.burn_in + config.samples);
    let dists = acc
        .into_iter()
        .map(|a| {
            let s: f64 = a.iter().sum();
            TopicDistribution(a.into_iter().map(|v| v / s).collect())
        })
        .collect();
    let model = TopicModel {
        alpha: config.alpha,
        beta: config.beta,
        n_kh: state.n_kh.iter().map(|r| r.iter().map(|&c| c as u64).collect()).collect(),
        n_k: state.n_k.iter().map(|&c| c as u64).collect(),
        vocab_hash: 0,
    };
    Ok((model, dists))
}

/// Fold-in inference: Gibbs over one held-out prescription with the model's
/// topic-herb counts frozen. Herb ids outside the model are dropped.
pub fn infer_topics(model: &TopicModel, prescription: &[usize], config: &LdaConfig) -> Result<TopicDistribution> {
    config.validate()?;
    let n = model.herb_count();
    let m = model.topics();
    let known: Vec<usize> = prescription.iter().copied().filter(|&h| h < n).collect();
    if known.len() < prescription.len() {
        warn!("dropped {} herb ids unknown to the topic model", prescription.len() - known.len());
    }
    if known.is_empty() {
        return Err(Error::InvalidArgument("prescription has no herbs known to the topic model".into()));
    }
    let beta_n = n as f64 * model.beta;
    let herb_terms: Vec<Vec<f64>> = known
        .iter()
        .map(|&h| (0..m).map(|k| (model.n_kh[k][h] as f64 + model.beta) / (model.n_k[k] as f64 + beta_n)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z: Vec<usize> = known.iter().map(|_| rng.random_range(0..m)).collect();
    let mut counts = vec![0usize; m];
    z.iter().for_each(|&k| counts[k] += 1);
    let mut acc = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let start_avg = config.infer_sweeps - config.infer_average;
    for sweep in 0..config.infer_sweeps {
        for (i, terms) in herb_terms.iter().enumerate() {
            counts[z[i]] -= 1;
            for k in 0..m {
                weights[k] = (counts[k] as f64 + model.alpha) * terms[k];
            }
            let k = draw(&weights, &mut rng);
            z[i] = k;
            counts[k] += 1;
        }
        if sweep >= start_avg {
            for (a, p) in acc.iter_mut().zip(doc_topic_distribution(&counts, model.alpha).0) {
                *a += p;
            }
        }
    }
    let s: f64 = acc.iter().sum();
    Ok(TopicDistribution(acc.into_iter().map(|v| v / s).collect()))
}

fn check_distribution(p: &TopicDistribution, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    if p.0.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} must be strictly positive")));
    }
    let s: f64 = p.0.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `(1/m)·Σ_k p_k·ln(p_k/g_k)`.
pub fn kl_topics(p: &TopicDistribution, g: &TopicDistribution) -> Result<f64> {
    check_distribution(p, "p")?;
    check_distribution(g, "g")?;
    if p.len() != g.len() {
        return Err(Error::InvalidArgument(format!("{} vs {} topics", p.len(), g.len())));
    }
    let m = p.len() as f64;
    Ok(p.0.iter().zip(&g.0).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>() / m)
}
