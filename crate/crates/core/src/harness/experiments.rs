use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::curves::CurvePoint;
use super::synthetic::{keyword_recall, make_synthetic, random_selection, SyntheticSpec};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{invalid, Error, Result};
use crate::filter::{filter_dataset, score_sequence, FilterSource, FilterSpec, Selection};
use crate::generation::{
    build_gen_record, build_lm_vocab, generation_fidelity_eval, sample, train_lm, GenRecord, GeneratedText, LmConfig,
    LmModel, SamplerConfig,
};
use crate::optim::TrainConfig;
use crate::simfilter::similarity_filter_dataset;
use crate::text::{build_vocab, load_dataset, tokenize, LabeledDataset, TokenizeMode, Vocab};
use crate::train::{accuracy, train_classifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Fraction of top-attention tokens placed in each record.
    pub keep_fraction: f64,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Training records used for the language model (all if 0).
    pub max_train_records: usize,
    /// Test records prompted per regime.
    pub num_prompts: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.2,
            lm: LmConfig::default(),
            train: TrainConfig::language_model(),
            sampler: SamplerConfig::default(),
            max_train_records: 0,
            num_prompts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Path to a JSON-lines dataset, or `synthetic`.
    pub dataset: String,
    pub synthetic: SyntheticSpec,
    pub num_classes: Option<usize>,
    /// Vocabulary cap for file datasets.
    pub vocab_size: usize,
    /// Trailing share of the records held out for evaluation.
    pub test_fraction: f64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub filter: FilterSpec,
    pub filter_source: FilterSource,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub generation: GenerationConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: "synthetic".into(),
            synthetic: SyntheticSpec::default(),
            num_classes: None,
            vocab_size: 30_000,
            test_fraction: 0.2,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            filter: FilterSpec::default(),
            filter_source: FilterSource::Trained,
            fractions: vec![0.06, 0.25, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            generation: GenerationConfig::default(),
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    /// Sized to train in seconds on one CPU core.
    pub fn desk_scale() -> Self {
        let encoder = EncoderConfig { num_layers: 2, num_heads: 2, model_dim: 32, ff_dim: 64, max_len: 64, ..Default::default() };
        let lm = LmConfig { num_layers: 2, num_heads: 2, model_dim: 32, ff_dim: 64, max_len: 48, ..Default::default() };
        Self {
            encoder,
            train: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
            generation: GenerationConfig {
                lm,
                train: TrainConfig { learning_rate: 2e-3, warmup_steps: 20, ..TrainConfig::language_model() },
                sampler: SamplerConfig { min_len: 10, max_len: 30, ..SamplerConfig::default() },
                max_train_records: 0,
                num_prompts: 100,
                ..GenerationConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction must be in (0, 1)"));
        }
        self.filter.validate_for(self.encoder.num_layers)?;
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(invalid(format!("fraction {f} outside (0, 1]")));
        }
        if !self.is_synthetic() && !Path::new(&self.dataset).exists() {
            return Err(invalid(format!("dataset {} does not exist", self.dataset)));
        }
        self.generation.sampler.validate()
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset == "synthetic"
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Vocabulary and the train/test split of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Planted keyword positions of the test records (synthetic data only).
    pub test_keywords: Option<Vec<Vec<usize>>>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (dataset, keywords, max_vocab) = if cfg.is_synthetic() {
        let s = make_synthetic(&cfg.synthetic)?;
        (s.dataset, Some(s.keyword_positions), cfg.synthetic.vocab_size)
    } else {
        (load_dataset(&cfg.dataset, cfg.num_classes)?, None, cfg.vocab_size)
    };
    let n = dataset.len();
    let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(invalid(format!("cannot split {n} records with test_fraction {}", cfg.test_fraction)));
    }
    let train = dataset.slice(0..n - n_test);
    let test = dataset.slice(n - n_test..n);
    let vocab = build_vocab(&train.texts(), max_vocab)?;
    let test_keywords = keywords.map(|k| k[n - n_test..].to_vec());
    Ok(Prepared { vocab, train, test, test_keywords })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopBottomRow {
    pub seed: u64,
    pub full: f64,
    pub top: f64,
    pub bottom: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub seed: u64,
    pub filter_recall: f64,
    pub random_recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub seed: u64,
    pub with_label: f64,
    pub without_label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRun {
    pub row: FidelityRow,
    pub with_label: Vec<GeneratedText>,
    pub without_label: Vec<GeneratedText>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionCurves {
    pub attention: Vec<CurvePoint>,
    pub similarity: Vec<CurvePoint>,
    /// `(keep fraction, seed, mean achieved reduction)` of the similarity filter.
    pub similarity_reduction: Vec<(f64, u64, f64)>,
}

pub fn mean<T>(rows: &[T], f: impl Fn(&T) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
}

fn derived_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64
}

/// Prepared data plus the full-length classifiers, trained once per seed.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub prep: Prepared,
    full: BTreeMap<u64, EncoderModel<f32>>,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let prep = prepare(&cfg)?;
        Ok(Self { cfg, prep, full: BTreeMap::new() })
    }

    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.prep.vocab.len(),
            num_classes: self.prep.train.num_classes,
            seed,
            ..self.cfg.encoder.clone()
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.cfg.train.clone() }
    }

    /// Fresh classifier for `seed`, fine-tuned on `data`.
    pub fn fine_tune(&self, data: &LabeledDataset, seed: u64) -> Result<EncoderModel<f32>> {
        let seqs = data.tokenize(&self.prep.vocab, self.cfg.encoder.max_len)?;
        let model = EncoderModel::new(self.encoder_config(seed))?;
        Ok(train_classifier(model, &seqs, &data.labels(), &self.train_config(seed))?.0)
    }

    pub fn evaluate(&self, model: &EncoderModel<f32>, data: &LabeledDataset) -> Result<f64> {
        let seqs = data.tokenize(&self.prep.vocab, model.config().max_len)?;
        accuracy(model, &seqs, &data.labels())
    }

    pub fn full_model(&mut self, seed: u64) -> Result<&EncoderModel<f32>> {
        if !self.full.contains_key(&seed) {
            log::info!("training the full-length classifier for seed {seed}");
            let m = self.fine_tune(&self.prep.train, seed)?;
            self.full.insert(seed, m);
        }
        Ok(&self.full[&seed])
    }

    /// The model whose attention drives filtering for `seed`.
    pub fn filter_model(&mut self, seed: u64) -> Result<EncoderModel<f32>> {
        match self.cfg.filter_source {
            FilterSource::Trained => self.full_model(seed).cloned(),
            FilterSource::Untrained => EncoderModel::new(self.encoder_config(seed)),
        }
    }

    /// Accuracy of the full-length classifier on the test set filtered with
    /// each layer in turn; `x` is the layer index.
    pub fn layer_sweep(&mut self) -> Result<Vec<CurvePoint>> {
        let mut points = Vec::new();
        for seed in self.cfg.seeds.clone() {
            let filterer = self.filter_model(seed)?;
            let classifier = self.full_model(seed)?.clone();
            for layer in 0..self.cfg.encoder.num_layers {
                let spec = FilterSpec { layer, ..self.cfg.filter };
                let filtered = filter_dataset(&filterer, &self.prep.vocab, &self.prep.test, &spec, Selection::Top)?;
                let acc = self.evaluate(&classifier, &filtered.dataset)?;
                log::info!("seed {seed} layer {layer}: accuracy {acc:.4}");
                points.push(CurvePoint { x: layer as f64, accuracy: acc, n_eval: self.prep.test.len(), seed });
            }
        }
        Ok(points)
    }

    /// Full-length, top-filtered and bottom-filtered fine-tunes, all scored on
    /// the full-length test set.
    pub fn top_bottom(&mut self) -> Result<Vec<TopBottomRow>> {
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            let filterer = self.filter_model(seed)?;
            let full_model = self.full_model(seed)?.clone();
            let full = self.evaluate(&full_model, &self.prep.test)?;
            let mut acc = [0.0; 2];
            for (slot, selection) in [Selection::Top, Selection::Bottom].into_iter().enumerate() {
                acc[slot] = if self.cfg.filter.keep_fraction == 1.0 {
                    full
                } else {
                    let filtered = filter_dataset(&filterer, &self.prep.vocab, &self.prep.train, &self.cfg.filter, selection)?;
                    let m = self.fine_tune(&filtered.dataset, seed)?;
                    self.evaluate(&m, &self.prep.test)?
                };
            }
            let row = TopBottomRow { seed, full, top: acc[0], bottom: acc[1] };
            log::info!("{row:?}");
            rows.push(row);
        }
        Ok(rows)
    }

    /// Accuracy versus keep fraction for attention filtering and for
    /// similarity filtering (reduction target `1 - fraction`).
    pub fn reduction_curve(&mut self, fractions: &[f64]) -> Result<ReductionCurves> {
        if fractions.is_empty() {
            return Err(Error::EmptyInput("fractions"));
        }
        let mut out = ReductionCurves { attention: vec![], similarity: vec![], similarity_reduction: vec![] };
        let n_eval = self.prep.test.len();
        for seed in self.cfg.seeds.clone() {
            let filterer = self.filter_model(seed)?;
            let full_model = self.full_model(seed)?.clone();
            let full = self.evaluate(&full_model, &self.prep.test)?;
            for &f in fractions {
                let (att, sim, reduction) = if f == 1.0 {
                    (full, full, 0.0)
                } else {
                    let spec = FilterSpec { keep_fraction: f, ..self.cfg.filter };
                    let filtered = filter_dataset(&filterer, &self.prep.vocab, &self.prep.train, &spec, Selection::Top)?;
                    let att = self.evaluate(&self.fine_tune(&filtered.dataset, seed)?, &self.prep.test)?;
                    let simf = similarity_filter_dataset(&filterer, &self.prep.vocab, &self.prep.train, 1.0 - f)?;
                    let sim = self.evaluate(&self.fine_tune(&simf.dataset, seed)?, &self.prep.test)?;
                    (att, sim, simf.mean_reduction)
                };
                log::info!("seed {seed} fraction {f}: attention {att:.4} similarity {sim:.4}");
                out.attention.push(CurvePoint { x: f, accuracy: att, n_eval, seed });
                out.similarity.push(CurvePoint { x: f, accuracy: sim, n_eval, seed });
                out.similarity_reduction.push((f, seed, reduction));
            }
        }
        Ok(out)
    }

    /// Planted-keyword recall of attention filtering on the test set, against
    /// a seeded uniform selection of the same size.
    pub fn keyword_recall(&mut self) -> Result<Vec<RecallRow>> {
        let keywords = self
            .prep
            .test_keywords
            .clone()
            .ok_or_else(|| invalid("keyword recall needs the synthetic dataset"))?;
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            let filterer = self.filter_model(seed)?;
            let filtered = filter_dataset(&filterer, &self.prep.vocab, &self.prep.test, &self.cfg.filter, Selection::Top)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, usize::MAX));
            let (mut f_sum, mut r_sum) = (0.0, 0.0);
            for (rec, kw) in filtered.records.iter().zip(&keywords) {
                f_sum += keyword_recall(&rec.kept, kw);
                r_sum += keyword_recall(&random_selection(rec.orig_tokens, rec.kept_tokens, &mut rng), kw);
            }
            let n = filtered.records.len() as f64;
            let row = RecallRow { seed, filter_recall: f_sum / n, random_recall: r_sum / n };
            log::info!("{row:?}");
            rows.push(row);
        }
        Ok(rows)
    }

    /// Generation records for `data` built from the filter model's attention.
    pub fn gen_records(&mut self, data: &LabeledDataset, seed: u64, with_label: bool) -> Result<Vec<GenRecord>> {
        let filterer = self.filter_model(seed)?;
        let g = &self.cfg.generation;
        data.records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let source = rec.joined_text();
                let seq = tokenize(&source, &self.prep.vocab, filterer.config().max_len, TokenizeMode::Classifier)?;
                let scores = score_sequence(&filterer, &seq, self.cfg.filter.layer)?;
                let label = with_label.then_some(rec.label);
                build_gen_record(label, &seq, &source, &self.prep.vocab, &scores, g.keep_fraction, &source, derived_seed(seed, i))
            })
            .collect()
    }

    /// Builds records, trains a language model, samples for held-out prompts
    /// with and without the label slot, and scores both with the full-length
    /// classifier.
    pub fn generation_fidelity(&mut self, seed: u64) -> Result<FidelityRun> {
        let g = self.cfg.generation.clone();
        let mut train = self.prep.train.clone();
        if g.max_train_records > 0 && train.len() > g.max_train_records {
            train = train.slice(0..g.max_train_records);
        }
        let records = self.gen_records(&train, seed, true)?;
        let (lm, lm_vocab) = train_generator(&records, &g, train.num_classes, seed)?;

        let n = g.num_prompts.min(self.prep.test.len());
        let test = self.prep.test.slice(0..n);
        let mut regimes = Vec::new();
        for with_label in [true, false] {
            let prompts = self.gen_records(&test, seed, with_label)?;
            let mut texts = Vec::with_capacity(n);
            for (i, (p, rec)) in prompts.iter().zip(&test.records).enumerate() {
                let sampler = SamplerConfig { seed: derived_seed(seed, i), ..g.sampler.clone() };
                let ids = p.encode_prompt(&lm_vocab)?;
                let out = sample(&lm, &lm_vocab, &ids, &sampler)?;
                texts.push(GeneratedText { intended_label: Some(rec.label), text: out.text, seed: sampler.seed });
            }
            regimes.push(texts);
        }
        let classifier = self.full_model(seed)?.clone();
        let row = FidelityRow {
            seed,
            with_label: generation_fidelity_eval(&classifier, &self.prep.vocab, &regimes[0])?,
            without_label: generation_fidelity_eval(&classifier, &self.prep.vocab, &regimes[1])?,
        };
        log::info!("{row:?}");
        let without_label = regimes.pop().expect("two regimes");
        let with_label = regimes.pop().expect("two regimes");
        Ok(FidelityRun { row, with_label, without_label })
    }
}

/// Language model and its vocabulary, trained on serialized records.
pub fn train_generator(
    records: &[GenRecord],
    g: &GenerationConfig,
    num_classes: usize,
    seed: u64,
) -> Result<(LmModel<f32>, Vocab)> {
    let vocab = build_lm_vocab(records, g.lm.vocab_size.max(crate::text::NUM_RESERVED), num_classes)?;
    let lm_cfg = LmConfig { vocab_size: vocab.len(), seed, ..g.lm.clone() };
    let corpus = records.iter().map(|r| r.encode(&vocab, lm_cfg.max_len)).collect::<Result<Vec<_>>>()?;
    let (lm, _) = train_lm(LmModel::new(lm_cfg)?, &corpus, &TrainConfig { seed, ..g.train.clone() })?;
    Ok((lm, vocab))
}

pub fn run_layer_sweep(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>> {
    Session::new(cfg.clone())?.layer_sweep()
}

pub fn run_top_bottom(cfg: &ExperimentConfig) -> Result<Vec<TopBottomRow>> {
    Session::new(cfg.clone())?.top_bottom()
}

pub fn run_reduction_curve(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<ReductionCurves> {
    Session::new(cfg.clone())?.reduction_curve(fractions)
}

pub fn run_generation_fidelity(cfg: &ExperimentConfig) -> Result<Vec<FidelityRun>> {
    let mut s = Session::new(cfg.clone())?;
    cfg.seeds.iter().map(|&seed| s.generation_fidelity(seed)).collect()
}
