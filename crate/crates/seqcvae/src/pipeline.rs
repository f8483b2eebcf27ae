//! Subcommand implementations behind the CLI: each function reads and
//! writes the conventional artifact names under the configured output
//! directory (`corpus_*.jsonl`, `blm.sqcv`, `latest.sqcv`, `metrics.csv`,
//! `samples.jsonl`, `report.json`, `latent_means.csv`).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{ParameterStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_vocab, generate_synthetic, load_jsonl, split, Dataset, SceneGrammar, VocabIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_position_histograms, write_report};
use crate::metrics::{tokenize, EvalReport, NgramStats};
use crate::model::SeqCvae;
use crate::sample::{
    consensus_rerank, decode_with_trajectory, export_latent_means, interpolate, nearest_neighbors,
    sample_captions, write_sample_sets, SampleSet,
};
use crate::train::{
    expected_shapes, pretrain_backward_lm, records_from_dataset, train, TrainSummary,
};

fn grammar_for(cfg: &RunConfig) -> Result<SceneGrammar> {
    match &cfg.corpus.grammar_path {
        Some(p) => SceneGrammar::load(Path::new(p)),
        None => Ok(SceneGrammar::default_desk()),
    }
}

fn corpus_path(cfg: &RunConfig, part: &str) -> std::path::PathBuf {
    cfg.out_dir().join(format!("corpus_{part}.jsonl"))
}

/// Load the three splits written by `gen-corpus`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    Ok((
        load_jsonl(&corpus_path(cfg, "train"))?,
        load_jsonl(&corpus_path(cfg, "val"))?,
        load_jsonl(&corpus_path(cfg, "test"))?,
    ))
}

/// Generate the synthetic corpus, split it and persist everything.
pub fn cmd_gen_corpus(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved()?;
    let grammar = grammar_for(cfg)?;
    let data = generate_synthetic(
        &grammar,
        cfg.corpus.n_scenes,
        cfg.corpus.captions_per_scene,
        cfg.corpus.feature_dim,
        cfg.seed,
    )?;
    let (tr, va, te) = split(&data, cfg.corpus.split, cfg.seed)?;
    tr.save_jsonl(&corpus_path(cfg, "train"))?;
    va.save_jsonl(&corpus_path(cfg, "val"))?;
    te.save_jsonl(&corpus_path(cfg, "test"))?;
    Ok(())
}

fn build_model(cfg: &RunConfig, vocab: &VocabIndex, feature_dim: usize) -> SeqCvae {
    let dims = cfg.model.dims(vocab.len(), feature_dim);
    SeqCvae::new(dims, cfg.model.variant, cfg.seed)
}

fn load_model(cfg: &RunConfig, vocab: &VocabIndex, feature_dim: usize, path: &Path) -> Result<SeqCvae> {
    let template = build_model(cfg, vocab, feature_dim);
    let ck = Checkpoint::load(path)?;
    let params = ck.to_params(&expected_shapes(&template.params))?;
    Ok(SeqCvae::from_parts(template.dims, template.variant, params))
}

/// Pretrain the backward LM and store its weights in `blm.sqcv`.
pub fn cmd_pretrain_blm(cfg: &RunConfig) -> Result<Vec<f64>> {
    let (tr, _, _) = load_splits(cfg)?;
    let vocab = build_vocab(&tr, cfg.corpus.min_count);
    let mut model = build_model(cfg, &vocab, tr.feature_dim);
    let records = records_from_dataset(&tr, &vocab);
    let history = pretrain_backward_lm(
        &mut model,
        &records,
        cfg.pretrain.steps,
        cfg.pretrain.batch_size,
        cfg.pretrain.lr,
        cfg.seed,
    )?;
    let ck = Checkpoint::from_params(
        serde_json::to_value(cfg)?,
        Some(vocab),
        cfg.pretrain.steps as u64,
        &model.params,
        &BTreeMap::new(),
    );
    ck.save(&cfg.out_dir().join("blm.sqcv"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir().join("pretrain_loss.csv"))?);
    writeln!(f, "step,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    Ok(history)
}

/// Train the model, seeding the frozen backward LM from `blm.sqcv` when it
/// exists. Writes `metrics.csv` and `latest.sqcv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.write_resolved()?;
    let (tr, _, _) = load_splits(cfg)?;
    let vocab = build_vocab(&tr, cfg.corpus.min_count);
    let mut model = build_model(cfg, &vocab, tr.feature_dim);
    let blm_path = cfg.out_dir().join("blm.sqcv");
    if blm_path.exists() {
        let ck = Checkpoint::load(&blm_path)?;
        copy_blm_params(&ck, &mut model.params)?;
    }
    let records = records_from_dataset(&tr, &vocab);
    let out_dir = cfg.out_dir();
    train(&mut model, &records, &cfg.train, Some(&vocab), Some(&out_dir))
}

fn copy_blm_params(ck: &Checkpoint, params: &mut ParameterStore) -> Result<()> {
    for (name, shape) in expected_shapes(params) {
        if !name.starts_with("blm.") {
            continue;
        }
        let key = format!("param/{name}");
        let stored = ck.tensors.get(&key).ok_or_else(|| Error::CheckpointShape {
            name: name.clone(),
            stored: vec![],
            expected: shape.clone(),
        })?;
        if stored.shape() != &shape[..] {
            return Err(Error::CheckpointShape {
                name,
                stored: stored.shape().to_vec(),
                expected: shape,
            });
        }
        params.get_mut(&name).data_mut().copy_from_slice(stored.data());
    }
    Ok(())
}

fn test_conditions(cfg: &RunConfig, te: &Dataset) -> Vec<(String, Vec<f64>)> {
    let n = cfg.sample.num_conditions.unwrap_or(te.conditions.len());
    te.conditions
        .iter()
        .take(n)
        .map(|c| (c.cond_id.clone(), c.features.clone()))
        .collect()
}

/// Sample K captions per test condition, consensus-rerank them against
/// pooled neighbor references, and write `samples.jsonl` plus the
/// trajectory sidecar.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Vec<SampleSet>> {
    let (tr, _, te) = load_splits(cfg)?;
    let vocab = build_vocab(&tr, cfg.corpus.min_count);
    let model = load_model(cfg, &vocab, tr.feature_dim, &cfg.out_dir().join("latest.sqcv"))?;
    let docs: Vec<Vec<Vec<String>>> = tr
        .conditions
        .iter()
        .map(|c| c.captions.iter().map(|s| tokenize(s)).collect())
        .collect();
    let stats = NgramStats::from_documents(&docs);

    let mut sets = Vec::new();
    for (cond_id, features) in test_conditions(cfg, &te) {
        let mut set = sample_captions(
            &model,
            &vocab,
            &cond_id,
            &features,
            cfg.sample.k,
            cfg.sample.temperature,
            cfg.sample.max_len,
            cfg.seed,
            cfg.sample.mode,
        )?;
        let neighbors = nearest_neighbors(&features, &tr, cfg.eval.neighbors);
        let refs: Vec<String> = neighbors
            .iter()
            .flat_map(|&i| tr.conditions[i].captions.iter().cloned())
            .collect();
        if !refs.is_empty() {
            consensus_rerank(&mut set, &refs, &stats)?;
        }
        sets.push(set);
    }
    write_sample_sets(
        &sets,
        &cfg.out_dir().join("samples.jsonl"),
        &cfg.out_dir().join("trajectories.sqcv"),
    )?;
    Ok(sets)
}

/// Interpolate between two sampled trajectories of the first test
/// condition over the standard α grid; writes `interpolations.jsonl`.
pub fn cmd_interpolate(cfg: &RunConfig) -> Result<()> {
    let (tr, _, te) = load_splits(cfg)?;
    let vocab = build_vocab(&tr, cfg.corpus.min_count);
    let model = load_model(cfg, &vocab, tr.feature_dim, &cfg.out_dir().join("latest.sqcv"))?;
    let conds = test_conditions(cfg, &te);
    let (cond_id, features) = conds.first().ok_or(Error::EmptyCorpus)?;
    let set = sample_captions(
        &model,
        &vocab,
        cond_id,
        features,
        2,
        cfg.sample.temperature,
        cfg.sample.max_len,
        cfg.seed,
        cfg.sample.mode,
    )?;
    let alphas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let steps = interpolate(
        &model,
        &vocab,
        cond_id,
        features,
        &set.trajectories[0],
        &set.trajectories[1],
        &alphas,
        cfg.sample.max_len,
    )?;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(cfg.out_dir().join("interpolations.jsonl"))?);
    for s in &steps {
        let row = serde_json::json!({
            "cond_id": cond_id,
            "alpha": s.alpha,
            "caption": s.caption.raw_text,
            "out_of_range": s.out_of_range,
        });
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Score `samples.jsonl` against the test references; writes `report.json`
/// and `position_hist.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let (tr, _, te) = load_splits(cfg)?;
    let sets = crate::sample::read_sample_sets(&cfg.out_dir().join("samples.jsonl"))?;
    let report = evaluate(&sets, &te, &tr, cfg.eval.top_n)?;
    write_report(&report, &cfg.out_dir().join("report.json"))?;
    write_position_histograms(&sets, &cfg.out_dir().join("position_hist.csv"))?;
    Ok(report)
}

/// Export intention-model means behind generated tokens as
/// `latent_means.csv`; returns the row count.
pub fn cmd_export_latents(cfg: &RunConfig) -> Result<usize> {
    let (tr, _, te) = load_splits(cfg)?;
    let vocab = build_vocab(&tr, cfg.corpus.min_count);
    let model = load_model(cfg, &vocab, tr.feature_dim, &cfg.out_dir().join("latest.sqcv"))?;
    let conds = test_conditions(cfg, &te);
    export_latent_means(
        &model,
        &vocab,
        &conds,
        cfg.sample.max_len,
        cfg.seed,
        &cfg.out_dir().join("latent_means.csv"),
    )
}

/// Toy-scale end-to-end gradient check; returns the max relative error
/// over trainable parameters.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<f64> {
    use crate::model::{CaptionRecord, ModelDims};
    let dims = ModelDims {
        vocab: 12,
        embed: 4,
        latent: 4,
        hidden: 8,
        cond: 4,
        blm_hidden: 4,
        enc_hidden: 8,
    };
    let variant = cfg.model.variant;
    let model = SeqCvae::new(dims, variant, cfg.seed);
    let mut rng = crate::rng::stream_rng(cfg.seed, "gradcheck-data");
    use rand::Rng;
    let batch: Vec<CaptionRecord> = (0..4)
        .map(|i| {
            let words: Vec<usize> = (0..3).map(|_| rng.gen_range(4..12)).collect();
            let mut tokens = vec![crate::corpus::BOS];
            tokens.extend(words);
            tokens.push(crate::corpus::EOS);
            CaptionRecord {
                cond_id: format!("g{i}"),
                tokens,
                condition: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                raw_text: String::new(),
            }
        })
        .collect();
    let seed = cfg.seed;
    // λ = 1 keeps the auxiliary-path gradients above the finite-difference
    // noise floor; the backward LM is validated on its own loss elsewhere.
    // Each parameter is checked at two step sizes and scored by the better
    // one: truncation error grows with eps while roundoff shrinks, and the
    // crossover lands on different parameters per instance. A wrong
    // analytic gradient fails at every step size.
    let check = |eps: f64| {
        let batch = batch.clone();
        crate::autodiff::grad_check_filtered(
            move |p, tape: &mut Tape| {
                let m = SeqCvae::from_parts(dims, variant, p.clone());
                let mut eps_rng = crate::rng::stream_rng(seed, "gradcheck-eps");
                let l = m.elbo_loss(tape, &batch, 0.8, 1.0, &mut eps_rng)?;
                Ok(l.total_node)
            },
            &model.params,
            eps,
            |name| !name.starts_with("blm."),
        )
    };
    let coarse = check(3e-4)?;
    let fine = check(1e-4)?;
    let max = fine
        .per_param
        .iter()
        .map(|(name, &e)| e.min(coarse.per_param[name]))
        .fold(0.0f64, f64::max);
    Ok(max)
}

/// Per-sentence bound check material: ELBO estimate and IWAE-style bound
/// over K posterior draws, sharing the same draws so the log-mean-exp
/// dominates the mean by construction of Jensen's inequality.
pub fn bound_pair(model: &SeqCvae, record: &crate::model::CaptionRecord, k: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = crate::rng::stream_rng(seed, &format!("bound/{}", record.cond_id));
    let mut log_ws = Vec::with_capacity(k);
    for _ in 0..k {
        log_ws.push(model.log_importance_weight(record, &mut rng)?);
    }
    let elbo = log_ws.iter().sum::<f64>() / k as f64;
    let max = log_ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let iwae = max + (log_ws.iter().map(|w| (w - max).exp()).sum::<f64>() / k as f64).ln();
    Ok((elbo, iwae))
}

/// Greedy decode helper used by examples; decodes the trajectory of a
/// fresh sample.
pub fn greedy_caption(model: &SeqCvae, vocab: &VocabIndex, cond_id: &str, cond: &[f64], max_len: usize, seed: u64) -> Result<String> {
    let set = sample_captions(model, vocab, cond_id, &cond.to_vec(), 1, 0.0, max_len, seed, crate::sample::LatentMode::Mean)?;
    let replay = decode_with_trajectory(model, vocab, cond_id, &cond.to_vec(), &set.trajectories[0], max_len)?;
    Ok(replay.raw_text)
}
