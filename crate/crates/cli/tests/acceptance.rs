//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use attnshort::bertscore::{pair_score, score_vectors, EncoderEmbedder, TokenEmbedder};
use attnshort::filter::{filter_sequence, FilterSpec, TokenScores};
use attnshort::generation::sampler::draw;
use attnshort::generation::{build_lm_vocab, constrain_logits, sample, GenRecord, LmConfig, LmModel, SamplerConfig};
use attnshort::gradcheck::grad_check;
use attnshort::harness::curves::mean_at;
use attnshort::harness::experiments::{mean, run_generation_fidelity, ExperimentConfig, Session};
use attnshort::simfilter::shorten_text;
use attnshort::text::{build_vocab, split_sentences, words, NUM_RESERVED};
use attnshort::{EncoderConfig, EncoderModel, TokenizedSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_seq(rng: &mut impl Rng, vocab: usize, max: usize) -> TokenizedSequence {
    let m = rng.random_range(1..=max);
    TokenizedSequence::classifier((0..m).map(|_| rng.random_range(NUM_RESERVED..vocab)).collect(), vec![None; m])
}

fn attention_validity() -> Outcome {
    let model = EncoderModel::<f32>::new(EncoderConfig { seed: 17, ..EncoderConfig::default() }).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut pad_nonzero, mut rows) = (0.0f64, 0usize, 0usize);
    for _ in 0..25 {
        let batch: Vec<TokenizedSequence> = (0..4).map(|_| random_seq(&mut rng, 1024, 100)).collect();
        let out = model.forward(&batch).map_err(|e| e.to_string())?;
        for (seq, at) in batch.iter().zip(&out.attention) {
            for head in at.weights.iter().flatten() {
                for i in 0..seq.len() {
                    let row = head.row(i);
                    worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                    pad_nonzero += row[seq.len()..].iter().filter(|&&v| v != 0.0).count();
                    rows += 1;
                }
            }
        }
    }
    check(worst <= 1e-6 && pad_nonzero == 0, format!("{rows} rows, max |sum-1| = {worst:.2e}, non-zero PAD entries = {pad_nonzero}"))
}

fn gradient_fidelity() -> Outcome {
    let cfg = EncoderConfig { num_layers: 1, num_heads: 1, model_dim: 8, ff_dim: 32, vocab_size: 32, max_len: 16, seed: 3, ..EncoderConfig::default() };
    let model = EncoderModel::<f64>::new(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..4 {
        let seq = random_seq(&mut rng, 32, 12);
        let r = grad_check(&model, &seq, case % 2, 1e-5, usize::MAX, case as u64).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked += r.num_checked;
    }
    check(worst < 1e-4, format!("{checked} coordinates, max relative error {worst:.2e}"))
}

/// Sort by (score desc, index asc), take k, restore order.
fn oracle_top(scores: &[f64], p: f64) -> Vec<usize> {
    let m = scores.len();
    let k = ((p * m as f64).round() as usize).max(1).min(m);
    let mut idx: Vec<usize> = (0..m).collect();
    for a in 0..m {
        for b in 0..m - 1 - a {
            let (x, y) = (idx[b], idx[b + 1]);
            if scores[y] > scores[x] || (scores[y] == scores[x] && y < x) {
                idx.swap(b, b + 1);
            }
        }
    }
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    kept
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for case in 0..1000 {
        let m = rng.random_range(3..=64);
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..m).map(|_| f64::from(rng.random_range(0u8..5))).collect()
        } else {
            (0..m).map(|_| rng.random::<f64>()).collect()
        };
        let p = rng.random_range(0.01..=1.0);
        let seq = TokenizedSequence::classifier((0..m).map(|i| NUM_RESERVED + i).collect(), vec![None; m]);
        let spec = FilterSpec::new(0, p).map_err(|e| e.to_string())?;
        let out = filter_sequence(&seq, &TokenScores { scores: scores.clone() }, &spec).map_err(|e| e.to_string())?;
        let want = oracle_top(&scores, p);
        let ids: Vec<usize> = want.iter().map(|&i| NUM_RESERVED + i).collect();
        if out.kept != want || out.seq.content_ids() != ids.as_slice() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("1000 vectors, {mismatches} mismatches"))
}

struct Shared {
    session: Session,
}

fn top_bottom(shared: &mut Shared) -> Outcome {
    let rows = shared.session.top_bottom().map_err(|e| e.to_string())?;
    let (full, top, bottom) = (mean(&rows, |r| r.full), mean(&rows, |r| r.top), mean(&rows, |r| r.bottom));
    check(
        top - bottom >= 0.05 && full - top <= 0.05,
        format!("mean full {full:.4}, top {top:.4}, bottom {bottom:.4}: top-bottom {:.4} (>= 0.05), full-top {:.4} (<= 0.05)", top - bottom, full - top),
    )
}

fn keyword_recall(shared: &mut Shared) -> Outcome {
    let rows = shared.session.keyword_recall().map_err(|e| e.to_string())?;
    let (f, r) = (mean(&rows, |r| r.filter_recall), mean(&rows, |r| r.random_recall));
    check(f >= 0.8 && (r - 0.5).abs() <= 0.05, format!("filter recall {f:.4} (>= 0.8), random recall {r:.4} (0.5 +/- 0.05)"))
}

fn layer_sweep(shared: &mut Shared) -> Outcome {
    let points = shared.session.layer_sweep().map_err(|e| e.to_string())?;
    let last = shared.session.cfg.encoder.num_layers - 1;
    let first = mean_at(&points, 0.0).unwrap_or(f64::NAN);
    let late = mean_at(&points, last as f64).unwrap_or(f64::NAN);
    check(first >= late - 0.02, format!("layer 0 {first:.4} vs layer {last} {late:.4} (>= late - 0.02)"))
}

fn similarity_contract() -> Outcome {
    let long = ["the quick brown fox jumps over the lazy dog near the river bank .", "a long and winding road leads far into the distant hills today ."];
    let short = ["it rains .", "birds sing loudly .", "cats nap .", "we left early .", "time flies ."];
    let mut texts = Vec::new();
    for i in 0..20 {
        let l = long[i % 2];
        let mut sents: Vec<&str> = short.iter().copied().cycle().skip(i).take(2 + i % 3).collect();
        sents.insert(i % sents.len(), l);
        sents.push(l);
        texts.push(sents.join(" "));
    }
    let vocab = build_vocab(&texts, 200).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig { num_layers: 2, num_heads: 2, model_dim: 32, ff_dim: 64, vocab_size: vocab.len(), max_len: 32, seed: 5, ..EncoderConfig::default() };
    let model = EncoderModel::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    let mut runs = 0;
    for target in [0.1, 0.3, 0.45] {
        for (ti, text) in texts.iter().enumerate() {
            let (_, plan) = shorten_text(&model, &vocab, text, target).map_err(|e| e.to_string())?;
            let lens: Vec<usize> = split_sentences(text).iter().map(|s| words(s).len()).collect();
            runs += 1;
            if plan.achieved_reduction < target {
                failures.push(format!("text {ti} target {target}: achieved {}", plan.achieved_reduction));
            }
            for e in &plan.eliminations {
                let survivor = if e.eliminated == e.pair.0 { e.pair.1 } else { e.pair.0 };
                if lens[e.eliminated] < lens[survivor] {
                    failures.push(format!("text {ti}: eliminated a shorter sentence"));
                }
            }
        }
    }
    check(failures.is_empty(), format!("{runs} texts, {} violations {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()))
}

/// Fixed vectors per word, keyed by the word itself.
struct TableEmbedder(BTreeMap<&'static str, Vec<f64>>);

impl TokenEmbedder for TableEmbedder {
    fn token_embeddings(&self, text: &str) -> attnshort::Result<Vec<Vec<f64>>> {
        Ok(text.split_whitespace().map(|w| self.0[w].clone()).collect())
    }
}

fn bertscore_oracle() -> Outcome {
    let texts = ["a b c", "d e f g h"];
    let vocab = build_vocab(&texts, 32).map_err(|e| e.to_string())?;
    let model = EncoderModel::<f32>::new(EncoderConfig { num_layers: 2, num_heads: 2, model_dim: 16, ff_dim: 32, vocab_size: vocab.len(), max_len: 16, seed: 1, ..EncoderConfig::default() })
        .map_err(|e| e.to_string())?;
    let same = pair_score(&EncoderEmbedder { model: &model, vocab: &vocab }, "d e f g h", "d e f g h").map_err(|e| e.to_string())?;
    let self_err = [same.precision, same.recall, same.f1].iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    let stub = TableEmbedder(BTreeMap::from([("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]));
    let hand = pair_score(&stub, "x y", "x").map_err(|e| e.to_string())?;
    let hand_err = (hand.precision - 1.0).abs().max((hand.recall - 0.5).abs()).max((hand.f1 - 2.0 / 3.0).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut duality = 0.0f64;
    for _ in 0..100 {
        let mut gen = |n: usize| (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
        let (a, b) = (gen(3), gen(5));
        let ab = score_vectors(&a, &b).map_err(|e| e.to_string())?;
        let ba = score_vectors(&b, &a).map_err(|e| e.to_string())?;
        duality = duality.max((ab.precision - ba.recall).abs()).max((ab.recall - ba.precision).abs());
    }
    check(
        self_err <= 1e-6 && hand_err <= 1e-6 && duality <= 1e-9,
        format!("identical {self_err:.1e}, hand case ({:.4}, {:.4}, {:.4}) err {hand_err:.1e}, duality {duality:.1e}", hand.precision, hand.recall, hand.f1),
    )
}

fn sampler_constraints() -> Outcome {
    let words_list: Vec<String> = (0..60).map(|i| format!("t{i}")).collect();
    let records: Vec<GenRecord> = (0..40)
        .map(|i| GenRecord { label: Some(i % 2), top_tokens: vec![words_list[i].clone()], target: words_list[i..i + 10].join(" ") })
        .collect();
    let vocab = build_lm_vocab(&records, 128, 2).map_err(|e| e.to_string())?;
    let lm = LmModel::<f32>::new(LmConfig { num_layers: 1, num_heads: 2, model_dim: 16, ff_dim: 32, vocab_size: vocab.len(), max_len: 112, dropout: 0.0, seed: 2 })
        .map_err(|e| e.to_string())?;
    let standard = SamplerConfig { temperature: 0.9, top_k: 30, top_p: 0.7, repetition_penalty: 3.0, min_len: 100, max_len: 100, seed: 0, early_stop: true };
    let (mut draws, mut outside) = (0usize, 0usize);
    for (i, r) in records.iter().cycle().take(100).enumerate() {
        let prompt = r.encode_prompt(&vocab).map_err(|e| e.to_string())?;
        let g = sample(&lm, &vocab, &prompt, &SamplerConfig { seed: i as u64, ..standard.clone() }).map_err(|e| e.to_string())?;
        for s in &g.steps {
            draws += 1;
            outside += usize::from(!s.top_k.contains(&s.token));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cold = SamplerConfig { temperature: 1e-4, top_k: 1000, top_p: 1.0, repetition_penalty: 1.0, ..standard.clone() };
    let mut hits = 0;
    let mut soft_err = 0.0f64;
    for _ in 0..10_000 {
        let logits: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let best = (0..50).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).expect("non-empty");
        let probs = constrain_logits(&logits, &[], &cold).map_err(|e| e.to_string())?;
        let support: Vec<usize> = (0..50).filter(|&i| probs[i] > 0.0).collect();
        hits += usize::from(draw(&probs, &support, &mut rng) == best);

        let identity = SamplerConfig { temperature: 1.0, ..cold.clone() };
        let p = constrain_logits(&logits, &[], &identity).map_err(|e| e.to_string())?;
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (pi, l) in p.iter().zip(&logits) {
            soft_err = soft_err.max((pi - l.exp() / z).abs());
        }
    }
    let freq = hits as f64 / 10_000.0;
    check(
        draws >= 10_000 && outside == 0 && freq > 0.999 && soft_err <= 1e-9,
        format!("{draws} draws, {outside} outside the candidate set; argmax frequency {freq:.4}; softmax error {soft_err:.1e}"),
    )
}

fn generation_fidelity() -> Outcome {
    let runs = run_generation_fidelity(&ExperimentConfig::desk_scale()).map_err(|e| e.to_string())?;
    let with = mean(&runs, |r| r.row.with_label);
    let without = mean(&runs, |r| r.row.without_label);
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.2}/{:.2}", r.row.with_label, r.row.without_label)).collect();
    check(with >= without, format!("with label {with:.4} vs without {without:.4} (per seed {})", per_seed.join(" ")))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).expect("under dir").to_path_buf(), std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn run_recipes(work: &Path) -> Result<(), String> {
    let small = [
        "--seeds", "0,1", "--epochs", "2",
        "--set", "synthetic.num_records=240", "--set", "synthetic.sentence_len=6",
        "--set", "generation.num_prompts=8", "--set", "generation.max_train_records=60",
        "--set", "generation.train.epochs=1", "--fractions", "0.25,1.0",
    ];
    let steps: Vec<Vec<&str>> = vec![
        vec!["--output-dir", "train", "train"],
        vec!["--output-dir", "sweep", "sweep"],
        vec!["--output-dir", "topbottom", "topbottom"],
        vec!["--output-dir", "curve", "curve"],
        vec!["--output-dir", "recall", "recall"],
        vec!["--output-dir", "fidelity", "fidelity"],
        vec!["synth", "--output", "data.jsonl"],
        vec!["filter", "--model", "train/encoder.ckpt", "--vocab", "train/vocab.txt", "--input", "data.jsonl", "--output", "filtered.jsonl"],
        vec!["genbuild", "--model", "train/encoder.ckpt", "--vocab", "train/vocab.txt", "--input", "data.jsonl", "--output", "records.txt"],
        vec!["--output-dir", "lm", "gentrain", "--records", "records.txt"],
        vec!["gensample", "--lm", "lm/lm.ckpt", "--lm-vocab", "lm/lm_vocab.txt", "--records", "records.txt", "--output", "generated.jsonl"],
    ];
    for step in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_attnshort"))
            .current_dir(work)
            .args(small)
            .args(&step)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{step:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = tmp.path().join("work");
    std::fs::create_dir(&work).map_err(|e| e.to_string())?;
    run_recipes(&work)?;
    let first = snapshot(&work);
    std::fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
    std::fs::create_dir(&work).map_err(|e| e.to_string())?;
    run_recipes(&work)?;
    let second = snapshot(&work);
    let differing: Vec<&PathBuf> = first.iter().filter(|(k, v)| second.get(*k) != Some(*v)).map(|(k, _)| k).collect();
    let csv = first.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    let ckpt = first.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    check(
        first.len() == second.len() && differing.is_empty() && csv > 0 && ckpt > 0,
        format!("{} files ({csv} CSV, {ckpt} checkpoints) compared, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

fn main() {
    // The runner passes libtest flags; list requests get an empty listing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let over = elapsed > budget;
        let (status, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {budget:?} budget")),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(status == "FAIL");
        println!("criterion {id:>2} {status} {name} [{:.1}s]: {detail}", elapsed.as_secs_f64());
    };
    let min = |m: u64| Duration::from_secs(60 * m);

    report(1, "attention validity", Duration::from_secs(30), &mut attention_validity);
    report(2, "gradient fidelity", min(1), &mut gradient_fidelity);
    report(3, "filter oracle equivalence", Duration::from_secs(10), &mut filter_oracle);

    let cfg = ExperimentConfig::desk_scale();
    let started = Instant::now();
    match Session::new(cfg) {
        Ok(session) => {
            let mut shared = Shared { session };
            report(4, "top vs bottom fine-tuning", min(15), &mut || top_bottom(&mut shared));
            report(5, "planted keyword recall", min(2), &mut || keyword_recall(&mut shared));
            let left = min(15).saturating_sub(started.elapsed());
            report(6, "early vs late layer filtering", left, &mut || layer_sweep(&mut shared));
        }
        Err(e) => {
            for (id, name) in [(4, "top vs bottom fine-tuning"), (5, "planted keyword recall"), (6, "early vs late layer filtering")] {
                report(id, name, min(15), &mut || Err(format!("setup failed: {e}")));
            }
        }
    }
    report(7, "similarity filter contract", min(1), &mut similarity_contract);
    report(8, "embedding score oracle", Duration::from_secs(10), &mut bertscore_oracle);
    report(9, "sampler constraints", min(1), &mut sampler_constraints);
    report(10, "label-conditioned generation fidelity", min(30), &mut generation_fidelity);
    report(11, "recipe determinism", min(30), &mut determinism);

    println!("acceptance: {} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
