use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use attnshort::bertscore::{corpus_score, write_scores_csv, EncoderEmbedder};
use attnshort::filter::{filter_dataset, score_sequence, Selection};
use attnshort::generation::{
    build_gen_record, generation_fidelity_eval, sample, GenRecord, GeneratedText, SamplerConfig,
};
use attnshort::harness::checkpoint::{load_encoder, load_lm, save_encoder, save_lm};
use attnshort::harness::curves::{emit_curves, mean_at};
use attnshort::harness::experiments::{mean, prepare, train_generator, ExperimentConfig, Session};
use attnshort::harness::{fidelity_csv, make_synthetic, recall_csv, rows_csv, top_bottom_csv, Manifest};
use attnshort::simfilter::similarity_filter_dataset;
use attnshort::text::{load_dataset, read_jsonl, tokenize, write_jsonl, TokenizeMode};
use attnshort::train::{accuracy, train_classifier};
use attnshort::{EncoderModel, TrainConfig, Vocab};
use serde_json::json;

use crate::config::output_dir;
use crate::ModelArgs;

fn load_model(args: &ModelArgs) -> Result<(EncoderModel<f32>, Vocab)> {
    let model = load_encoder(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let vocab = Vocab::load(&args.vocab).with_context(|| format!("loading {}", args.vocab.display()))?;
    ensure!(
        vocab.len() == model.config().vocab_size,
        "vocabulary has {} entries but the model expects {}",
        vocab.len(),
        model.config().vocab_size
    );
    Ok((model, vocab))
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Saves the recipe manifest and each seed's full-length classifier.
fn finish(session: &mut Session, recipe: &str, mut outputs: Vec<String>) -> Result<()> {
    let dir = output_dir(&session.cfg)?.to_path_buf();
    session.prep.vocab.save(dir.join("vocab.txt"))?;
    outputs.push("vocab.txt".into());
    for seed in session.cfg.seeds.clone() {
        let name = format!("full_seed{seed}.ckpt");
        save_encoder(session.full_model(seed)?, dir.join(&name))?;
        outputs.push(name);
    }
    let manifest_name = format!("manifest_{recipe}.json");
    Manifest::new(&session.cfg, recipe, outputs).save(dir.join(&manifest_name))?;
    log::info!("wrote {}", dir.join(manifest_name).display());
    Ok(())
}

pub fn synth(cfg: &ExperimentConfig, output: &Path) -> Result<()> {
    let data = make_synthetic(&cfg.synthetic)?;
    data.dataset.save(output)?;
    print(json!({ "records": data.dataset.len(), "output": output }));
    Ok(())
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let prep = prepare(cfg)?;
    let model_cfg = attnshort::EncoderConfig {
        vocab_size: prep.vocab.len(),
        num_classes: prep.train.num_classes,
        seed,
        ..cfg.encoder.clone()
    };
    let seqs = prep.train.tokenize(&prep.vocab, model_cfg.max_len)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let (model, history) = train_classifier(EncoderModel::new(model_cfg)?, &seqs, &prep.train.labels(), &train_cfg)?;
    let test_seqs = prep.test.tokenize(&prep.vocab, model.config().max_len)?;
    let test_accuracy = accuracy(&model, &test_seqs, &prep.test.labels())?;

    let dir = output_dir(cfg)?;
    save_encoder(&model, dir.join("encoder.ckpt"))?;
    prep.vocab.save(dir.join("vocab.txt"))?;
    let csv = rows_csv("epoch,loss,accuracy", &history, |h| format!("{},{},{}", h.epoch, h.loss, h.accuracy))?;
    write(&dir.join("history.csv"), &csv)?;
    let outputs = vec!["encoder.ckpt".into(), "vocab.txt".into(), "history.csv".into()];
    Manifest::new(cfg, "train", outputs).save(dir.join("manifest_train.json"))?;
    print(json!({ "seed": seed, "test_accuracy": test_accuracy, "n_test": prep.test.len() }));
    Ok(())
}

pub fn filter(cfg: &ExperimentConfig, model: &ModelArgs, input: &Path, output: &Path, bottom: bool) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let data = load_dataset(input, cfg.num_classes)?;
    let selection = if bottom { Selection::Bottom } else { Selection::Top };
    let out = filter_dataset(&model, &vocab, &data, &cfg.filter, selection)?;
    out.save(output)?;
    let kept: usize = out.records.iter().map(|r| r.kept_tokens).sum();
    let orig: usize = out.records.iter().map(|r| r.orig_tokens).sum();
    print(json!({ "records": out.records.len(), "kept_tokens": kept, "orig_tokens": orig }));
    Ok(())
}

pub fn simfilter(cfg: &ExperimentConfig, model: &ModelArgs, input: &Path, output: &Path, target: f64) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let data = load_dataset(input, cfg.num_classes)?;
    let out = similarity_filter_dataset(&model, &vocab, &data, target)?;
    out.save(output)?;
    print(json!({ "records": out.rows.len(), "mean_reduction": out.mean_reduction }));
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, model: &ModelArgs, input: &Path) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let data = load_dataset(input, cfg.num_classes)?;
    let seqs = data.tokenize(&vocab, model.config().max_len)?;
    let acc = accuracy(&model, &seqs, &data.labels())?;
    print(json!({ "accuracy": acc, "n_eval": data.len() }));
    Ok(())
}

pub fn sweep(cfg: ExperimentConfig) -> Result<()> {
    let mut s = Session::new(cfg)?;
    let points = s.layer_sweep()?;
    let dir = output_dir(&s.cfg)?;
    emit_curves(&points, dir.join("sweep.csv"))?;
    finish(&mut s, "sweep", vec!["sweep.csv".into()])?;
    for layer in 0..s.cfg.encoder.num_layers {
        let m = mean_at(&points, layer as f64).unwrap_or(f64::NAN);
        print(json!({ "layer": layer, "mean_accuracy": m }));
    }
    Ok(())
}

pub fn topbottom(cfg: ExperimentConfig) -> Result<()> {
    let mut s = Session::new(cfg)?;
    let rows = s.top_bottom()?;
    write(&output_dir(&s.cfg)?.join("topbottom.csv"), &top_bottom_csv(&rows)?)?;
    finish(&mut s, "topbottom", vec!["topbottom.csv".into()])?;
    print(json!({
        "full": mean(&rows, |r| r.full),
        "top": mean(&rows, |r| r.top),
        "bottom": mean(&rows, |r| r.bottom),
    }));
    Ok(())
}

pub fn curve(cfg: ExperimentConfig) -> Result<()> {
    let fractions = cfg.fractions.clone();
    let mut s = Session::new(cfg)?;
    let curves = s.reduction_curve(&fractions)?;
    let dir = output_dir(&s.cfg)?;
    emit_curves(&curves.attention, dir.join("curve_attention.csv"))?;
    emit_curves(&curves.similarity, dir.join("curve_similarity.csv"))?;
    let csv = rows_csv("fraction,seed,reduction", &curves.similarity_reduction, |(f, seed, r)| format!("{f},{seed},{r}"))?;
    write(&dir.join("similarity_reduction.csv"), &csv)?;
    let outputs = ["curve_attention.csv", "curve_similarity.csv", "similarity_reduction.csv"];
    finish(&mut s, "curve", outputs.map(String::from).to_vec())?;
    for f in fractions {
        print(json!({
            "fraction": f,
            "attention": mean_at(&curves.attention, f),
            "similarity": mean_at(&curves.similarity, f),
        }));
    }
    Ok(())
}

pub fn recall(cfg: ExperimentConfig) -> Result<()> {
    let mut s = Session::new(cfg)?;
    let rows = s.keyword_recall()?;
    write(&output_dir(&s.cfg)?.join("recall.csv"), &recall_csv(&rows)?)?;
    finish(&mut s, "recall", vec!["recall.csv".into()])?;
    print(json!({
        "filter_recall": mean(&rows, |r| r.filter_recall),
        "random_recall": mean(&rows, |r| r.random_recall),
    }));
    Ok(())
}

pub fn fidelity(cfg: ExperimentConfig) -> Result<()> {
    let mut s = Session::new(cfg)?;
    let dir = output_dir(&s.cfg)?.to_path_buf();
    let mut rows = Vec::new();
    let mut outputs = vec!["fidelity.csv".to_string()];
    for seed in s.cfg.seeds.clone() {
        let run = s.generation_fidelity(seed)?;
        for (regime, texts) in [("with_label", &run.with_label), ("without_label", &run.without_label)] {
            let name = format!("generated_{regime}_seed{seed}.jsonl");
            write_jsonl(dir.join(&name), texts)?;
            outputs.push(name);
        }
        rows.push(run.row);
    }
    write(&dir.join("fidelity.csv"), &fidelity_csv(&rows)?)?;
    finish(&mut s, "fidelity", outputs)?;
    print(json!({
        "with_label": mean(&rows, |r| r.with_label),
        "without_label": mean(&rows, |r| r.without_label),
    }));
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn score(model: &ModelArgs, references: &Path, candidates: &Path, output: &Path) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let refs = read_lines(references)?;
    let cands = read_lines(candidates)?;
    if refs.len() != cands.len() {
        bail!("{} references but {} candidates", refs.len(), cands.len());
    }
    let pairs: Vec<(String, String)> = refs.into_iter().zip(cands).collect();
    let embedder = EncoderEmbedder { model: &model, vocab: &vocab };
    let score = corpus_score(&embedder, &pairs)?;
    write_scores_csv(output, &score)?;
    print(serde_json::to_value(score.mean)?);
    Ok(())
}

pub fn genbuild(cfg: &ExperimentConfig, model: &ModelArgs, input: &Path, output: &Path, with_label: bool) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let data = load_dataset(input, cfg.num_classes)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mut lines = String::new();
    for (i, rec) in data.records.iter().enumerate() {
        let source = rec.joined_text();
        let seq = tokenize(&source, &vocab, model.config().max_len, TokenizeMode::Classifier)?;
        let scores = score_sequence(&model, &seq, cfg.filter.layer)?;
        let label = with_label.then_some(rec.label);
        let shuffle_seed = seed.wrapping_add(i as u64);
        let r = build_gen_record(label, &seq, &source, &vocab, &scores, cfg.generation.keep_fraction, &source, shuffle_seed)?;
        lines.push_str(&r.serialize());
        lines.push('\n');
    }
    write(output, &lines)?;
    print(json!({ "records": data.len(), "output": output }));
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<GenRecord>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| GenRecord::parse(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn gentrain(cfg: &ExperimentConfig, records: &Path, num_classes: Option<usize>) -> Result<()> {
    let recs = read_records(records)?;
    ensure!(!recs.is_empty(), "no records in {}", records.display());
    let inferred = recs.iter().filter_map(|r| r.label).max().map_or(2, |m| (m + 1).max(2));
    let num_classes = num_classes.or(cfg.num_classes).unwrap_or(inferred);
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let (lm, vocab) = train_generator(&recs, &cfg.generation, num_classes, seed)?;
    let dir = output_dir(cfg)?;
    save_lm(&lm, dir.join("lm.ckpt"))?;
    vocab.save(dir.join("lm_vocab.txt"))?;
    Manifest::new(cfg, "gentrain", vec!["lm.ckpt".into(), "lm_vocab.txt".into()]).save(dir.join("manifest_gentrain.json"))?;
    print(json!({ "records": recs.len(), "lm_vocab": vocab.len() }));
    Ok(())
}

pub fn gensample(cfg: &ExperimentConfig, lm: &Path, lm_vocab: &Path, records: &Path, output: &Path) -> Result<()> {
    let lm = load_lm(lm).with_context(|| format!("loading {}", lm.display()))?;
    let vocab = Vocab::load(lm_vocab)?;
    let recs = read_records(records)?;
    let mut out = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let sampler = SamplerConfig { seed: cfg.generation.sampler.seed.wrapping_add(i as u64), ..cfg.generation.sampler.clone() };
        let g = sample(&lm, &vocab, &r.encode_prompt(&vocab)?, &sampler)?;
        out.push(GeneratedText { intended_label: r.label, text: g.text, seed: sampler.seed });
    }
    write_jsonl(output, &out)?;
    print(json!({ "generated": out.len(), "output": output }));
    Ok(())
}

pub fn genfideval(model: &ModelArgs, generated: &Path) -> Result<()> {
    let (model, vocab) = load_model(model)?;
    let texts: Vec<GeneratedText> = read_jsonl(generated)?;
    let fidelity = generation_fidelity_eval(&model, &vocab, &texts)?;
    print(json!({ "fidelity": fidelity, "n": texts.len() }));
    Ok(())
}
