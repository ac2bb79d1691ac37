//! One function per subcommand. Each writes into its own run directory and
//! returns that directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use herbrx_core::augment::{augment_round, write_augment_manifest};
use herbrx_core::data::{
    dataset_stats, herb_frequencies, load_records, make_folds, read_manifest, save_png, synth_generate, write_manifest,
    write_synth_dataset, Dataset, DatasetSplit, ManifestRecord, Sample,
};
use herbrx_core::lda::{
    build_vocabulary, fit, infer_topics, read_aliases, read_distributions_csv, read_topic_model,
    write_distributions_csv, write_topic_model, HerbVocabulary, TopicDistribution, TopicModel,
};
use herbrx_core::metrics::{
    aggregate_folds, kl_t_metric, logic_score, write_per_sample_csv, LogicScore, MetricsReport, PairRuleTable,
};
use herbrx_core::model::{
    build_model, load_checkpoint, predict_batched, predict_prescription, save_checkpoint, train, write_history_csv,
    ArchitectureSpec, Checkpoint, Variant,
};
use herbrx_core::{Error, Tensor};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::{run_dir, RunConfig};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes through a buffered file and flushes, surfacing write errors.
fn save(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> herbrx_core::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Manifest records, the herb vocabulary and the configured fold split.
struct Inputs {
    records: Vec<ManifestRecord>,
    vocab: HerbVocabulary,
}

impl Inputs {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let records = read_manifest(cfg.manifest()?)?;
        let vocab = match &cfg.paths.vocabulary {
            Some(p) => HerbVocabulary::read(BufReader::new(File::open(p)?))?,
            None => {
                let aliases = match &cfg.paths.aliases {
                    Some(p) => read_aliases(BufReader::new(File::open(p)?))?,
                    None => Vec::new(),
                };
                let rx: Vec<Vec<String>> = records.iter().map(|r| r.herbs.clone()).collect();
                build_vocabulary(&rx, &aliases)?
            }
        };
        Ok(Inputs { records, vocab })
    }

    fn split(&self, cfg: &RunConfig) -> Result<DatasetSplit> {
        let ids: Vec<String> = self.records.iter().map(|r| r.id.clone()).collect();
        let mut folds = make_folds(&ids, &cfg.folds)?;
        Ok(folds.swap_remove(cfg.fold))
    }

    /// Herb ids of every record; unknown names are reported together.
    fn prescriptions(&self) -> Result<Vec<Vec<usize>>> {
        let mut unknown = BTreeSet::new();
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            match self.vocab.normalize(&r.herbs) {
                Ok(ids) => out.push(ids),
                Err(Error::UnknownHerbs(names)) => unknown.extend(names),
                Err(e) => return Err(e.into()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownHerbs(unknown.into_iter().collect()).into());
        }
        Ok(out)
    }

    /// Loads images and labels of `ids`, in that order.
    fn samples(&self, ids: &[String], extents: (usize, usize)) -> Result<Dataset> {
        let index: HashMap<&str, &ManifestRecord> = self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        let subset = ids
            .iter()
            .map(|id| index.get(id.as_str()).map(|&r| r.clone()).ok_or_else(|| anyhow::anyhow!("unknown id `{id}`")))
            .collect::<Result<Vec<_>>>()?;
        Ok(load_records(subset, &self.vocab, extents)?)
    }
}

/// Topic model and training distributions produced by `lda-fit`.
struct FittedTopics {
    model: TopicModel,
    distributions: HashMap<String, TopicDistribution>,
}

impl FittedTopics {
    fn load(dir: &Path, vocab: &HerbVocabulary) -> Result<Self> {
        let model_path = dir.join("topic_model.bin");
        let model = read_topic_model(BufReader::new(
            File::open(&model_path).with_context(|| format!("opening {}", model_path.display()))?,
        ))?;
        if model.vocab_hash != vocab.hash() {
            return Err(Error::SpecMismatch(format!(
                "topic model vocabulary hash {:016x} differs from dataset vocabulary {:016x}",
                model.vocab_hash,
                vocab.hash()
            ))
            .into());
        }
        let dist_path = dir.join("distributions.csv");
        let distributions = read_distributions_csv(BufReader::new(
            File::open(&dist_path).with_context(|| format!("opening {}", dist_path.display()))?,
        ))?
        .into_iter()
        .collect();
        Ok(FittedTopics { model, distributions })
    }

    fn attach(&self, samples: &mut [Sample]) -> Result<()> {
        for s in samples {
            let d = self.distributions.get(&s.id).ok_or_else(|| {
                Error::MissingTopics(format!(
                    "sample `{}` has no fitted distribution; rerun `herbrx lda-fit` on this fold",
                    s.id
                ))
            })?;
            s.topics = Some(d.0.clone());
        }
        Ok(())
    }
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = run_dir(cfg, "synth", &[])?;
    let (ds, world) = synth_generate(&cfg.synth)?;
    write_synth_dataset(&dir, &ds, &world)?;
    info!("wrote {} synthetic samples", ds.len());
    Ok(dir)
}

pub fn stats(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = Inputs::load(cfg)?;
    let rx = inputs.prescriptions()?;
    let dir = run_dir(cfg, "stats", &[])?;
    let stats = dataset_stats(&rx, inputs.vocab.len(), cfg.stats.frequent_threshold)?;
    save(&dir.join("stats.csv"), |w| stats.write_csv(w))?;
    let freq = herb_frequencies(&rx, inputs.vocab.len())?;
    let mut out = create(&dir.join("herb_frequencies.csv"))?;
    writeln!(out, "herb,prescriptions")?;
    for (name, count) in inputs.vocab.names().iter().zip(freq) {
        writeln!(out, "{name},{count}")?;
    }
    out.flush()?;
    save(&dir.join("vocabulary.tsv"), |w| inputs.vocab.write(w))?;
    Ok(dir)
}

pub fn lda_fit(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = Inputs::load(cfg)?;
    let split = inputs.split(cfg)?;
    let all = inputs.prescriptions()?;
    let by_id: HashMap<&str, &Vec<usize>> = inputs.records.iter().map(|r| r.id.as_str()).zip(&all).collect();
    let dir = run_dir(cfg, "lda-fit", &[])?;

    let mut access = create(&dir.join("access.log"))?;
    let mut corpus = Vec::with_capacity(split.train.len());
    for id in &split.train {
        writeln!(access, "{id}")?;
        corpus.push(by_id[id.as_str()].clone());
    }
    access.flush()?;

    let (mut model, dists) = fit(&corpus, inputs.vocab.len(), &cfg.lda)?;
    model.vocab_hash = inputs.vocab.hash();
    save(&dir.join("topic_model.bin"), |w| write_topic_model(&model, w))?;
    save(&dir.join("distributions.csv"), |w| {
        write_distributions_csv(split.train.iter().map(String::as_str).zip(&dists), cfg.lda.topics, w)
    })?;
    save(&dir.join("vocabulary.tsv"), |w| inputs.vocab.write(w))?;
    write_json(&dir.join("split.json"), &split)?;
    fs::write(
        dir.join("lda.log"),
        format!(
            "fold {}\ndocuments {}\ntopics {}\nsweeps {} (burn-in {}, sampling {})\nseed {}\n",
            cfg.fold,
            corpus.len(),
            cfg.lda.topics,
            cfg.lda.burn_in + cfg.lda.samples,
            cfg.lda.burn_in,
            cfg.lda.samples,
            cfg.lda.seed
        ),
    )?;
    info!("fitted {} topics on {} training prescriptions", cfg.lda.topics, corpus.len());
    Ok(dir)
}

pub fn train_cmd(cfg: &RunConfig, topics: Option<&Path>) -> Result<PathBuf> {
    let variant = cfg.variant()?;
    let inputs = Inputs::load(cfg)?;
    let split = inputs.split(cfg)?;
    let fitted = match topics {
        Some(dir) => Some(FittedTopics::load(dir, &inputs.vocab)?),
        None if variant.has_topic_head() => {
            return Err(Error::MissingTopics(format!(
                "variant {variant} trains against therapy topics; run `herbrx lda-fit` first and pass its run directory with --topics"
            ))
            .into())
        }
        None => None,
    };
    let topic_count = fitted.as_ref().filter(|_| variant.has_topic_head()).map(|f| f.model.topics());
    let spec = cfg.architecture(inputs.vocab.len(), topic_count)?;
    let extents = (spec.height, spec.width);

    let args: Vec<String> = topics.map(|p| p.display().to_string()).into_iter().collect();
    let dir = run_dir(cfg, "train", &args)?;

    let mut fit_set = inputs.samples(&split.fit_ids(), extents)?;
    let mut valid_set = inputs.samples(&split.valid, extents)?;
    if let (Some(f), true) = (&fitted, variant.has_topic_head()) {
        f.attach(&mut fit_set.samples)?;
        f.attach(&mut valid_set.samples)?;
    }
    let augmented = if cfg.augment {
        augment_round(&fit_set.refs(), &cfg.augmentation)?.into_iter().map(|a| a.sample).collect()
    } else {
        Vec::new()
    };
    let pool: Vec<&Sample> = fit_set.samples.iter().chain(&augmented).collect();
    info!(
        "training {variant} on {} samples ({} augmented), {} validation",
        pool.len(),
        augmented.len(),
        valid_set.len()
    );

    let params = build_model(&spec, cfg.train.seed)?;
    let parameters = params.parameter_count();
    let outcome = train(params, &pool, &valid_set.refs(), &cfg.train)?;
    let ckpt = Checkpoint {
        params: outcome.params,
        optimizer: None,
        epoch: outcome.best_epoch,
        rng: None,
        vocab_hash: Some(inputs.vocab.hash()),
    };
    save_checkpoint(&ckpt, dir.join("checkpoint.bin"))?;
    save(&dir.join("history.csv"), |w| write_history_csv(&outcome.history, w))?;
    save(&dir.join("vocabulary.tsv"), |w| inputs.vocab.write(w))?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(
        &dir.join("train.json"),
        &json!({
            "variant": variant.cli_name(),
            "preset": cfg.preset,
            "fold": cfg.fold,
            "fit_samples": fit_set.len(),
            "augmented_samples": augmented.len(),
            "pool_samples": pool.len(),
            "valid_samples": valid_set.len(),
            "epochs_run": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "parameters": parameters,
        }),
    )?;
    Ok(dir)
}

#[derive(Serialize)]
struct LogicMeans {
    s_pos: f64,
    s_neg: f64,
    s_total: f64,
}

fn logic_means(scores: &[LogicScore]) -> LogicMeans {
    let n = scores.len().max(1) as f64;
    let mean = |f: fn(&LogicScore) -> i64| scores.iter().map(|s| f(s) as f64).sum::<f64>() / n;
    LogicMeans { s_pos: mean(|s| s.s_pos), s_neg: mean(|s| s.s_neg), s_total: mean(|s| s.s_total) }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub topics: Option<&'a Path>,
    pub self_test: bool,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs<'_>) -> Result<PathBuf> {
    let inputs = Inputs::load(cfg)?;
    let split = inputs.split(cfg)?;
    let ckpt = load_checkpoint(args.checkpoint)?;
    match ckpt.vocab_hash {
        Some(h) if h != inputs.vocab.hash() => {
            return Err(Error::SpecMismatch(format!(
                "vocabulary hash mismatch: checkpoint {h:016x}, dataset {:016x}",
                inputs.vocab.hash()
            ))
            .into())
        }
        _ => {}
    }
    let spec = &ckpt.params.spec;
    let expected = cfg.architecture(inputs.vocab.len(), spec.topic_count)?;
    if &expected != spec {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds a {} model with {} herbs; config resolves {} `{}` with {} herbs",
            spec.variant, spec.herb_count, expected.variant, cfg.preset, expected.herb_count
        ))
        .into());
    }
    let fitted = args.topics.map(|d| FittedTopics::load(d, &inputs.vocab)).transpose()?;

    let mut run_args = vec![args.checkpoint.display().to_string()];
    run_args.extend(args.topics.map(|p| p.display().to_string()));
    if args.self_test {
        run_args.push("self-test".into());
    }
    let dir = run_dir(cfg, "eval", &run_args)?;

    let ids = if args.self_test { split.train.clone() } else { split.test.clone() };
    let dataset = inputs.samples(&ids, (spec.height, spec.width))?;
    let real: Vec<Vec<usize>> = dataset.prescriptions();
    let generated: Vec<Vec<usize>> = if args.self_test {
        real.clone()
    } else {
        let images: Vec<&Tensor> = dataset.samples.iter().map(|s| &s.image).collect();
        let out = predict_batched(&ckpt.params, &images, cfg.eval.predict_chunk)?;
        (0..images.len()).map(|i| predict_prescription(out.herb_probs.row(i), cfg.train.threshold).herbs).collect()
    };
    let empty_predictions = generated.iter().filter(|g| g.is_empty()).count();
    let pairs: Vec<(&[usize], &[usize])> =
        generated.iter().map(Vec::as_slice).zip(real.iter().map(Vec::as_slice)).collect();

    let kl = fitted.as_ref().map(|f| kl_t_metric(&pairs, &f.model, &cfg.lda)).transpose()?;
    let report = MetricsReport::compute(&pairs, kl.as_ref().map(|k| k.mean))?;
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    save(&dir.join("per_sample.csv"), |w| write_per_sample_csv(&id_refs, &report, kl.as_ref(), w))?;
    save(&dir.join("summary.csv"), |w| report.write_summary_csv(w))?;

    let names = |rx: &[usize]| rx.iter().filter_map(|&h| inputs.vocab.name(h)).collect::<Vec<_>>().join("|");
    let mut pred = create(&dir.join("predictions.tsv"))?;
    writeln!(pred, "id\tgenerated\treal")?;
    for (id, (g, r)) in ids.iter().zip(&pairs) {
        writeln!(pred, "{id}\t{}\t{}", names(g), names(r))?;
    }
    pred.flush()?;

    if let Some(f) = &fitted {
        let mut gen_rows = Vec::new();
        let mut real_rows = Vec::new();
        for (i, (g, r)) in pairs.iter().enumerate() {
            let lda = herbrx_core::LdaConfig { seed: cfg.lda.seed.wrapping_add(i as u64), ..cfg.lda.clone() };
            if !g.is_empty() {
                gen_rows.push((ids[i].as_str(), infer_topics(&f.model, g, &lda)?));
            }
            real_rows.push((ids[i].as_str(), infer_topics(&f.model, r, &lda)?));
        }
        let topics = f.model.topics();
        save(&dir.join("topics_generated.csv"), |w| {
            write_distributions_csv(gen_rows.iter().map(|(id, d)| (*id, d)), topics, w)
        })?;
        save(&dir.join("topics_real.csv"), |w| {
            write_distributions_csv(real_rows.iter().map(|(id, d)| (*id, d)), topics, w)
        })?;
    }

    let logic = match &cfg.paths.rules {
        Some(path) => {
            let rules = PairRuleTable::parse(BufReader::new(File::open(path)?), &inputs.vocab)?;
            let gen: Vec<LogicScore> = generated.iter().map(|g| logic_score(g, &rules, cfg.eval.avoidance)).collect();
            let act: Vec<LogicScore> = real.iter().map(|r| logic_score(r, &rules, cfg.eval.avoidance)).collect();
            let mut out = create(&dir.join("logic.csv"))?;
            writeln!(out, "id,generated_s_pos,generated_s_neg,generated_s_total,real_s_pos,real_s_neg,real_s_total")?;
            for (id, (g, r)) in ids.iter().zip(gen.iter().zip(&act)) {
                writeln!(out, "{id},{},{},{},{},{},{}", g.s_pos, g.s_neg, g.s_total, r.s_pos, r.s_neg, r.s_total)?;
            }
            out.flush()?;
            Some(json!({
                "rules": rules.len(),
                "avoidance": cfg.eval.avoidance,
                "generated": logic_means(&gen),
                "real": logic_means(&act),
            }))
        }
        None => None,
    };

    let mut doc = json!({
        "variant": spec.variant.cli_name(),
        "fold": cfg.fold,
        "self_test": args.self_test,
        "samples": ids.len(),
        "empty_predictions": empty_predictions,
        "kl_t_flagged": kl.as_ref().map(|k| k.flagged.len()),
        "metrics": report,
    });
    if let Some(l) = logic {
        doc["logic"] = l;
    }
    write_json(&dir.join("report.json"), &doc)?;
    Ok(dir)
}

pub fn augment(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = Inputs::load(cfg)?;
    let split = inputs.split(cfg)?;
    let spec = ArchitectureSpec::preset(&cfg.preset, Variant::SingleChannel, inputs.vocab.len(), None)?;
    let extents = (spec.height, spec.width);
    let source = inputs.samples(&split.fit_ids(), extents)?;
    let dir = run_dir(cfg, "augment", &[])?;
    fs::create_dir_all(dir.join("images"))?;
    let out = augment_round(&source.refs(), &cfg.augmentation)?;
    let mut paths = Vec::with_capacity(out.len());
    let mut records = Vec::with_capacity(out.len());
    for a in &out {
        let rel = format!("images/{}.png", a.sample.id);
        save_png(&a.sample.image, &dir.join(&rel))?;
        let herbs = a.sample.herbs.iter().filter_map(|&h| inputs.vocab.name(h).map(str::to_string)).collect();
        records.push(ManifestRecord { id: a.sample.id.clone(), path: dir.join(&rel), herbs });
        paths.push(rel);
    }
    save(&dir.join("augment.tsv"), |w| write_augment_manifest(out.iter().zip(paths.iter().map(String::as_str)), w))?;
    let mut manifest = create(&dir.join("manifest.tsv"))?;
    write_manifest(&records, &dir, &mut manifest)?;
    manifest.flush()?;
    write_json(&dir.join("augment.json"), &json!({ "source_samples": source.len(), "augmented_samples": out.len() }))?;
    Ok(dir)
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf]) -> Result<PathBuf> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!("report needs at least 2 eval runs, got {}", runs.len())).into());
    }
    let mut reports = Vec::with_capacity(runs.len());
    let mut per_run = BTreeMap::new();
    for run in runs {
        let path = run.join("report.json");
        let doc: serde_json::Value = serde_json::from_reader(BufReader::new(
            File::open(&path).with_context(|| format!("opening {}", path.display()))?,
        ))
        .with_context(|| format!("parsing {}", path.display()))?;
        let Some(metrics) = doc.get("metrics") else {
            bail!("{} has no metrics section", path.display());
        };
        let metrics: MetricsReport = serde_json::from_value(metrics.clone())?;
        per_run.insert(run.display().to_string(), (doc["variant"].clone(), doc["fold"].clone(), metrics.iou_sim));
        reports.push(metrics);
    }
    let summary = aggregate_folds(&reports)?;
    let args: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
    let dir = run_dir(cfg, "report", &args)?;
    fs::write(dir.join("summary.csv"), summary.to_csv())?;
    let table = summary.to_table();
    fs::write(dir.join("table.txt"), &table)?;
    write_json(&dir.join("summary.json"), &json!({ "summary": summary, "runs": per_run }))?;
    eprint!("{table}");
    Ok(dir)
}
