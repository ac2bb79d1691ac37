//! Set-similarity, count, topic-KL and pair-logic metrics, plus fold aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lda::{infer_topics, kl_topics, HerbVocabulary, LdaConfig, TopicModel};

fn as_set(ids: &[usize]) -> BTreeSet<usize> {
    ids.iter().copied().collect()
}

/// Per-sample comparison of a generated and a real prescription.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSimilarity {
    pub nc: usize,
    pub np: usize,
    pub ng: usize,
    pub p: f64,
    pub r: f64,
    pub iou: f64,
}

/// Precision, recall and IoU of `generated` against `real`. Precision is 0
/// for an empty generated set.
pub fn similarity(generated: &[usize], real: &[usize]) -> Result<SampleSimilarity> {
    let (gen, real) = (as_set(generated), as_set(real));
    if real.is_empty() {
        return Err(Error::InvalidArgument("real prescription is empty".into()));
    }
    let nc = gen.intersection(&real).count();
    let (np, ng) = (gen.len(), real.len());
    let p = if np == 0 { 0.0 } else { nc as f64 / np as f64 };
    Ok(SampleSimilarity { nc, np, ng, p, r: nc as f64 / ng as f64, iou: nc as f64 / (np + ng - nc) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub nb_p: f64,
    pub nb_c: f64,
    /// |mean generated size − mean real size|.
    pub nb_d: f64,
    /// Mean of per-sample |generated size − real size|.
    pub nb_d_abs: f64,
}

pub fn count_metrics<G: AsRef<[usize]>, R: AsRef<[usize]>>(pairs: &[(G, R)]) -> Result<CountMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("count metrics need at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let (mut sp, mut sg, mut sc, mut sd) = (0usize, 0usize, 0usize, 0usize);
    for (g, r) in pairs {
        let (g, r) = (as_set(g.as_ref()), as_set(r.as_ref()));
        sp += g.len();
        sg += r.len();
        sc += g.intersection(&r).count();
        sd += g.len().abs_diff(r.len());
    }
    Ok(CountMetrics {
        nb_p: sp as f64 / n,
        nb_c: sc as f64 / n,
        nb_d: (sp as f64 / n - sg as f64 / n).abs(),
        nb_d_abs: sd as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicKl {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    /// Indices of pairs with an empty generated set, scored at the batch maximum.
    pub flagged: Vec<usize>,
}

/// Mean KL from the inferred topic distribution of each generated
/// prescription to that of its real counterpart. Pair `i` infers with seed
/// `config.seed + i`.
pub fn kl_t_metric<G: AsRef<[usize]>, R: AsRef<[usize]>>(
    pairs: &[(G, R)],
    model: &TopicModel,
    config: &LdaConfig,
) -> Result<TopicKl> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("kl_t needs at least one pair".into()));
    }
    let mut per_sample = vec![0.0; pairs.len()];
    let mut flagged = Vec::new();
    for (i, (g, r)) in pairs.iter().enumerate() {
        let (gs, rs) = (as_set(g.as_ref()), as_set(r.as_ref()));
        if gs.is_empty() {
            flagged.push(i);
            continue;
        }
        if gs == rs {
            continue;
        }
        let cfg = LdaConfig { seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        let gv: Vec<usize> = gs.into_iter().collect();
        let rv: Vec<usize> = rs.into_iter().collect();
        per_sample[i] = kl_topics(&infer_topics(model, &gv, &cfg)?, &infer_topics(model, &rv, &cfg)?)?;
    }
    if !flagged.is_empty() {
        let max = per_sample.iter().copied().fold(0.0, f64::max);
        log::warn!("kl_t: {} empty generated prescriptions scored at batch maximum {max}", flagged.len());
        for &i in &flagged {
            per_sample[i] = max;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(TopicKl { mean, per_sample, flagged })
}

fn unordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Beneficial and taboo herb pairs, stored as `(low id, high id)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairRuleTable {
    pub common: BTreeSet<(usize, usize)>,
    pub taboo: BTreeSet<(usize, usize)>,
}

impl PairRuleTable {
    pub fn from_pairs(
        common: impl IntoIterator<Item = (usize, usize)>,
        taboo: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut table = PairRuleTable::default();
        for (a, b) in common {
            table.insert(true, a, b)?;
        }
        for (a, b) in taboo {
            table.insert(false, a, b)?;
        }
        Ok(table)
    }

    fn insert(&mut self, common: bool, a: usize, b: usize) -> Result<()> {
        if a == b {
            return Err(Error::BadFormat(format!("rule pair joins herb {a} with itself")));
        }
        let pair = unordered(a, b);
        let (this, other) = if common { (&mut self.common, &self.taboo) } else { (&mut self.taboo, &self.common) };
        if other.contains(&pair) {
            return Err(Error::BadFormat(format!("pair {pair:?} is both common and taboo")));
        }
        this.insert(pair);
        Ok(())
    }

    /// Parses `COMMON a | b` and `TABOO a | b` lines, resolving names
    /// through the vocabulary's aliases. `#` starts a comment.
    pub fn parse(input: impl BufRead, vocab: &HerbVocabulary) -> Result<Self> {
        let mut table = PairRuleTable::default();
        let mut unknown = BTreeSet::new();
        let mut pending = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::BadFormat(format!("rule line {}: `{line}`", lineno + 1));
            let (kind, rest) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
            let common = match kind {
                "COMMON" => true,
                "TABOO" => false,
                _ => return Err(bad()),
            };
            let (a, b) = rest.split_once('|').ok_or_else(bad)?;
            let (a, b) = (a.trim(), b.trim());
            match (vocab.id(a), vocab.id(b)) {
                (Some(a), Some(b)) => pending.push((common, a, b)),
                (ia, ib) => {
                    if ia.is_none() {
                        unknown.insert(a.to_string());
                    }
                    if ib.is_none() {
                        unknown.insert(b.to_string());
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownHerbs(unknown.into_iter().collect()));
        }
        for (common, a, b) in pending {
            table.insert(common, a, b)?;
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.common.len() + self.taboo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvoidanceMode {
    /// A taboo pair counts as avoided when exactly one endpoint is present.
    #[default]
    ExactlyOne,
    /// Every taboo pair not fully contained counts as avoided.
    NotContained,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicScore {
    pub s_pos: i64,
    pub s_neg: i64,
    pub s_total: i64,
}

pub fn logic_score(prescription: &[usize], rules: &PairRuleTable, mode: AvoidanceMode) -> LogicScore {
    let set = as_set(prescription);
    let s_pos = rules.common.iter().filter(|(a, b)| set.contains(a) && set.contains(b)).count() as i64;
    let mut s_neg = 0i64;
    for (a, b) in &rules.taboo {
        match (set.contains(a), set.contains(b), mode) {
            (true, true, _) => s_neg -= 1,
            (true, false, _) | (false, true, _) => s_neg += 1,
            (false, false, AvoidanceMode::NotContained) => s_neg += 1,
            (false, false, AvoidanceMode::ExactlyOne) => {}
        }
    }
    LogicScore { s_pos, s_neg, s_total: s_pos + s_neg }
}

/// Metrics over one evaluated set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub p_sim: f64,
    pub r_sim: f64,
    pub iou_sim: f64,
    pub counts: CountMetrics,
    pub kl_t: Option<f64>,
    pub per_sample: Vec<SampleSimilarity>,
}

impl MetricsReport {
    pub fn compute<G: AsRef<[usize]>, R: AsRef<[usize]>>(pairs: &[(G, R)], kl_t: Option<f64>) -> Result<Self> {
        let counts = count_metrics(pairs)?;
        let per_sample = pairs.iter().map(|(g, r)| similarity(g.as_ref(), r.as_ref())).collect::<Result<Vec<_>>>()?;
        let n = per_sample.len();
        let mean = |f: fn(&SampleSimilarity) -> f64| per_sample.iter().map(f).sum::<f64>() / n as f64;
        Ok(MetricsReport {
            n,
            p_sim: mean(|s| s.p),
            r_sim: mean(|s| s.r),
            iou_sim: mean(|s| s.iou),
            counts,
            kl_t,
            per_sample,
        })
    }

    /// Summary values in column order; similarity values as fractions.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("p_sim", Some(self.p_sim)),
            ("r_sim", Some(self.r_sim)),
            ("IoU_sim", Some(self.iou_sim)),
            ("nb_p", Some(self.counts.nb_p)),
            ("nb_c", Some(self.counts.nb_c)),
            ("nb_d", Some(self.counts.nb_d)),
            ("kl_t", self.kl_t),
        ]
    }

    pub fn write_summary_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "n,p_sim,r_sim,IoU_sim,nb_p,nb_c,nb_d,kl_t,nb_d_abs")?;
        let kl = self.kl_t.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{kl},{}",
            self.n,
            self.p_sim,
            self.r_sim,
            self.iou_sim,
            self.counts.nb_p,
            self.counts.nb_c,
            self.counts.nb_d,
            self.counts.nb_d_abs
        )?;
        Ok(())
    }
}

pub fn write_per_sample_csv(
    ids: &[&str],
    report: &MetricsReport,
    kl: Option<&TopicKl>,
    mut out: impl Write,
) -> Result<()> {
    if ids.len() != report.per_sample.len() {
        return Err(Error::InvalidArgument(format!("{} ids for {} samples", ids.len(), report.per_sample.len())));
    }
    writeln!(out, "id,nc,np,ng,p,r,iou,kl_t")?;
    for (i, (id, s)) in ids.iter().zip(&report.per_sample).enumerate() {
        let kl = kl.map(|k| k.per_sample[i].to_string()).unwrap_or_default();
        writeln!(out, "{id},{},{},{},{},{},{},{kl}", s.nc, s.np, s.ng, s.p, s.r, s.iou)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateColumn {
    pub name: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub percent: bool,
}

impl AggregateColumn {
    pub fn formatted(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "-".into(),
        }
    }
}

/// Per-column mean and sample standard deviation across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub columns: Vec<AggregateColumn>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Similarity columns are reported in percent.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {}", reports.len())));
    }
    let cols: Vec<_> = reports.iter().map(MetricsReport::columns).collect();
    let columns = (0..7)
        .map(|c| {
            let name = cols[0][c].0;
            let percent = c < 3;
            let scale = if percent { 100.0 } else { 1.0 };
            let values: Option<Vec<f64>> = cols.iter().map(|row| row[c].1.map(|v| v * scale)).collect();
            let (mean, std) = match values {
                Some(v) => {
                    let (m, s) = mean_std(&v);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            AggregateColumn { name: name.to_string(), mean, std, percent }
        })
        .collect();
    Ok(FoldSummary { folds: reports.len(), columns })
}

impl FoldSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,formatted\n");
        for c in &self.columns {
            let num = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", c.name, num(c.mean), num(c.std), c.formatted());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let header: Vec<String> =
            self.columns.iter().map(|c| if c.percent { format!("{} (%)", c.name) } else { c.name.clone() }).collect();
        let cells: Vec<String> = self.columns.iter().map(AggregateColumn::formatted).collect();
        let widths: Vec<usize> =
            header.iter().zip(&cells).map(|(h, c)| h.chars().count().max(c.chars().count())).collect();
        let row = |items: &[String]| {
            items.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect::<Vec<_>>().join(" | ")
        };
        format!("folds: {}\n{}\n{}\n", self.folds, row(&header), row(&cells))
    }
}
