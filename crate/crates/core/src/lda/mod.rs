//! Therapy topics: herb vocabulary, collapsed Gibbs LDA, fold-in inference
//! and the topic KL divergence.

mod gibbs;
mod vocab;

pub use gibbs::{
    doc_topic_distribution, fit, gibbs_sweep, infer_topics, kl_topics, topic_conditional, Corpus, GibbsState,
    LdaConfig, TopicDistribution, TopicModel,
};
pub use vocab::{build_vocabulary, read_aliases, HerbVocabulary};

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

pub const TOPIC_MAGIC: &[u8; 4] = b"RXLT";
pub const TOPIC_VERSION: u32 = 1;

/// Binary topic-model file: magic `RXLT`, `u32` version, `u64` topic count,
/// `u64` herb count, `f64` α, `f64` β, `u64` vocabulary hash, then the
/// topic-herb counts row-major as `u64`, all little-endian.
pub fn write_topic_model(model: &TopicModel, mut out: impl Write) -> Result<()> {
    out.write_all(TOPIC_MAGIC)?;
    out.write_all(&TOPIC_VERSION.to_le_bytes())?;
    out.write_all(&(model.topics() as u64).to_le_bytes())?;
    out.write_all(&(model.herb_count() as u64).to_le_bytes())?;
    out.write_all(&model.alpha.to_le_bytes())?;
    out.write_all(&model.beta.to_le_bytes())?;
    out.write_all(&model.vocab_hash.to_le_bytes())?;
    for row in &model.n_kh {
        for c in row {
            out.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("topic model {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_topic_model(mut input: impl Read) -> Result<TopicModel> {
    let magic: [u8; 4] = read_array(&mut input, "magic")?;
    if &magic != TOPIC_MAGIC {
        return Err(Error::BadFormat("missing RXLT magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input, "version")?);
    if version != TOPIC_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: TOPIC_VERSION });
    }
    let m = u64::from_le_bytes(read_array(&mut input, "topic count")?) as usize;
    let n = u64::from_le_bytes(read_array(&mut input, "herb count")?) as usize;
    let alpha = f64::from_le_bytes(read_array(&mut input, "alpha")?);
    let beta = f64::from_le_bytes(read_array(&mut input, "beta")?);
    let vocab_hash = u64::from_le_bytes(read_array(&mut input, "vocabulary hash")?);
    if m == 0 || n == 0 || m.checked_mul(n).is_none_or(|c| c > (1 << 32)) {
        return Err(Error::BadFormat(format!("implausible extents {m}x{n}")));
    }
    let mut n_kh = Vec::with_capacity(m);
    for _ in 0..m {
        let mut row = Vec::with_capacity(n);
        for _ in 0..n {
            row.push(u64::from_le_bytes(read_array(&mut input, "counts")?));
        }
        n_kh.push(row);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::BadFormat(format!("{} trailing bytes", rest.len())));
    }
    let n_k = n_kh.iter().map(|r| r.iter().sum()).collect();
    Ok(TopicModel { alpha, beta, n_kh, n_k, vocab_hash })
}

/// CSV with header `doc_id,topic_0,...` and one row per document.
pub fn write_distributions_csv<'a>(
    rows: impl IntoIterator<Item = (&'a str, &'a TopicDistribution)>,
    topics: usize,
    mut out: impl Write,
) -> Result<()> {
    let header: Vec<String> = (0..topics).map(|k| format!("topic_{k}")).collect();
    writeln!(out, "doc_id,{}", header.join(","))?;
    for (id, d) in rows {
        let vals: Vec<String> = d.0.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{id},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn read_distributions_csv(input: impl BufRead) -> Result<Vec<(String, TopicDistribution)>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::BadFormat("empty distributions file".into()))??;
    let width = header.split(',').count().saturating_sub(1);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let vals: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::BadFormat(format!("distributions row {}: {e}", i + 2)))?;
        if vals.len() != width {
            return Err(Error::BadFormat(format!(
                "distributions row {} has {} values, header {width}",
                i + 2,
                vals.len()
            )));
        }
        out.push((id, TopicDistribution(vals)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TopicModel {
        TopicModel { alpha: 0.5, beta: 0.01, n_kh: vec![vec![1, 0, 3], vec![0, 2, 0]], n_k: vec![4, 2], vocab_hash: 77 }
    }

    #[test]
    fn topic_model_file_round_trip() {
        let mut buf = Vec::new();
        write_topic_model(&model(), &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 * 5 + 8 * 6);
        assert_eq!(read_topic_model(buf.as_slice()).unwrap(), model());
        assert!(matches!(read_topic_model(&buf[..buf.len() - 1]), Err(Error::Truncated(_))));
        buf[0] = 0;
        assert!(matches!(read_topic_model(buf.as_slice()), Err(Error::BadFormat(_))));
    }

    #[test]
    fn phi_rows_are_distributions() {
        let m = model();
        for k in 0..2 {
            let phi = m.phi(k);
            assert!(phi.iter().all(|&v| v > 0.0));
            assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distributions_csv_round_trip() {
        let a = TopicDistribution(vec![0.25, 0.75]);
        let b = TopicDistribution(vec![0.1, 0.9]);
        let mut buf = Vec::new();
        write_distributions_csv([("s1", &a), ("s2", &b)], 2, &mut buf).unwrap();
        let back = read_distributions_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("s1".to_string(), a), ("s2".to_string(), b)]);
    }
}
