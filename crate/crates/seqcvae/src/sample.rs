//! Test-time generation: ancestral sampling alternating intention-model
//! draws and decoder draws, greedy trajectory replay, latent-trajectory
//! interpolation, consensus re-ranking and latent-mean export.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::blocks::GaussianNodes;
use crate::checkpoint::Checkpoint;
use crate::corpus::{Dataset, VocabIndex, BOS, EOS};
use crate::error::{Error, Result};
use crate::metrics::{cider, tokenize, NgramStats};
use crate::model::{standard_normal, CaptionRecord, ConditionVector, LatentTrajectory, ModelVariant, SeqCvae};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// z drawn from the prior (default; diversity needs it).
    Sample,
    /// z fixed to the prior mean.
    Mean,
}

/// K generated captions for one condition. `ranking` is a permutation of
/// 0..K−1; identity until re-ranking runs.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub cond_id: String,
    pub captions: Vec<CaptionRecord>,
    pub trajectories: Vec<LatentTrajectory>,
    /// metric name → per-caption values, aligned with `captions`.
    pub scores: BTreeMap<String, Vec<f64>>,
    pub ranking: Vec<usize>,
    /// Captions that hit max_len without emitting EOS.
    pub truncated: Vec<bool>,
}

impl SampleSet {
    pub fn k(&self) -> usize {
        self.captions.len()
    }

    /// Captions in ranking order, best first.
    pub fn ranked_captions(&self) -> Vec<&CaptionRecord> {
        self.ranking.iter().map(|&i| &self.captions[i]).collect()
    }

    pub fn top_n(&self, n: usize) -> Vec<&CaptionRecord> {
        self.ranked_captions().into_iter().take(n).collect()
    }
}

struct GenOutcome {
    tokens: Vec<usize>,
    trajectory: LatentTrajectory,
    prior_means: Vec<Vec<f64>>,
    truncated: bool,
}

/// One generation pass. `forced` replays a fixed trajectory with greedy
/// decoding; otherwise z comes from the prior per `mode` and tokens are
/// drawn from softmax(logits/temperature) (temperature 0 = argmax).
fn generate(
    model: &SeqCvae,
    cond: &ConditionVector,
    max_len: usize,
    temperature: f64,
    rng: &mut impl Rng,
    mode: LatentMode,
    forced: Option<&[Vec<f64>]>,
) -> Result<GenOutcome> {
    let mut tape = Tape::new();
    let cond_node = model.condition_node(&mut tape, cond)?;
    let mut tokens = vec![BOS];
    let mut trajectory: LatentTrajectory = Vec::new();
    let mut prior_means = Vec::new();

    let mut z_prev = model.zero_latent(&mut tape);
    let mut prior_state = model.prior_zero_state(&mut tape);
    let mut dec_state = model.decoder_zero_state(&mut tape);
    let mut prev_token = BOS;
    let mut single_z: Option<crate::autodiff::NodeId> = None;
    let mut truncated = true;

    for t in 0..max_len {
        // prior parameters for this step
        let gaussian: GaussianNodes = match model.variant {
            ModelVariant::CvaeSingleZ => {
                // fixed standard-normal prior over the single sentence latent
                GaussianNodes {
                    mean: model.zero_latent(&mut tape),
                    log_var: model.zero_latent(&mut tape),
                }
            }
            ModelVariant::ZforcingShared => {
                let g = model.prior_gaussian_shared(&mut tape, dec_state.h)?;
                g
            }
            _ => {
                let (g, next) =
                    model.intention_step(&mut tape, z_prev, prev_token, cond_node, prior_state)?;
                prior_state = next;
                g
            }
        };
        prior_means.push(tape.value(gaussian.mean).data().to_vec());

        let z = if let Some(traj) = forced {
            let idx = t.min(traj.len() - 1);
            tape.constant(Tensor::vector(traj[idx].clone()))
        } else if model.variant == ModelVariant::CvaeSingleZ {
            if let Some(z) = single_z {
                z
            } else {
                let z = draw_latent(model, &mut tape, gaussian, mode, rng)?;
                single_z = Some(z);
                z
            }
        } else {
            draw_latent(model, &mut tape, gaussian, mode, rng)?
        };
        trajectory.push(tape.value(z).data().to_vec());

        let (logits, next_dec) = model.decoder_step(&mut tape, prev_token, z, cond_node, dec_state)?;
        dec_state = next_dec;
        let logit_values = tape.value(logits).data().to_vec();
        let token = if forced.is_some() || temperature == 0.0 {
            argmax(&logit_values)
        } else {
            sample_token(&logit_values, temperature, rng)
        };
        tokens.push(token);
        z_prev = z;
        prev_token = token;
        if token == EOS {
            truncated = false;
            break;
        }
    }
    Ok(GenOutcome { tokens, trajectory, prior_means, truncated })
}

fn draw_latent(
    model: &SeqCvae,
    tape: &mut Tape,
    gaussian: GaussianNodes,
    mode: LatentMode,
    rng: &mut impl Rng,
) -> Result<crate::autodiff::NodeId> {
    match mode {
        LatentMode::Mean => Ok(gaussian.mean),
        LatentMode::Sample => {
            let eps = standard_normal(rng, model.dims.latent);
            model.reparameterize(tape, gaussian, &eps)
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn record_from(model_cond_id: &str, cond: &ConditionVector, vocab: &VocabIndex, tokens: Vec<usize>) -> CaptionRecord {
    let raw_text = vocab.decode_caption(&tokens);
    CaptionRecord {
        cond_id: model_cond_id.to_string(),
        tokens,
        condition: cond.clone(),
        raw_text,
    }
}

/// Sample K captions for one condition. Each caption owns an RNG stream
/// derived from (seed, cond_id, k), so results are independent of K and of
/// sampling order.
#[allow(clippy::too_many_arguments)]
pub fn sample_captions(
    model: &SeqCvae,
    vocab: &VocabIndex,
    cond_id: &str,
    cond: &ConditionVector,
    k: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
    mode: LatentMode,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::Infeasible("K must be at least 1".into()));
    }
    let mut captions = Vec::with_capacity(k);
    let mut trajectories = Vec::with_capacity(k);
    let mut truncated = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = stream_rng(seed, &format!("sample/{cond_id}/{i}"));
        let out = generate(model, cond, max_len, temperature, &mut rng, mode, None)?;
        captions.push(record_from(cond_id, cond, vocab, out.tokens));
        trajectories.push(out.trajectory);
        truncated.push(out.truncated);
    }
    Ok(SampleSet {
        cond_id: cond_id.to_string(),
        captions,
        trajectories,
        scores: BTreeMap::new(),
        ranking: (0..k).collect(),
        truncated,
    })
}

/// Greedy argmax decoding with z_t fixed from the trajectory; the final z
/// is reused past its end. Deterministic.
pub fn decode_with_trajectory(
    model: &SeqCvae,
    vocab: &VocabIndex,
    cond_id: &str,
    cond: &ConditionVector,
    trajectory: &[Vec<f64>],
    max_len: usize,
) -> Result<CaptionRecord> {
    if trajectory.is_empty() {
        return Err(Error::Infeasible("trajectory must be nonempty".into()));
    }
    let mut rng = stream_rng(0, "unused");
    let out = generate(model, cond, max_len, 0.0, &mut rng, LatentMode::Mean, Some(trajectory))?;
    Ok(record_from(cond_id, cond, vocab, out.tokens))
}

#[derive(Debug, Clone)]
pub struct InterpolationStep {
    pub alpha: f64,
    pub caption: CaptionRecord,
    /// Set when α lies outside [0, 1] (extrapolation).
    pub out_of_range: bool,
}

/// Per-position linear interpolation z_t = (1−α)·z_t^A + α·z_t^B; the
/// shorter trajectory is padded by repeating its final latent. α ∈ {0, 1}
/// reuses the endpoint trajectory unchanged, so those decodes are exact.
#[allow(clippy::too_many_arguments)]
pub fn interpolate(
    model: &SeqCvae,
    vocab: &VocabIndex,
    cond_id: &str,
    cond: &ConditionVector,
    traj_a: &[Vec<f64>],
    traj_b: &[Vec<f64>],
    alphas: &[f64],
    max_len: usize,
) -> Result<Vec<InterpolationStep>> {
    if traj_a.is_empty() || traj_b.is_empty() {
        return Err(Error::Infeasible("interpolation endpoints must be nonempty".into()));
    }
    let len = traj_a.len().max(traj_b.len());
    let pad = |traj: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = traj.to_vec();
        while out.len() < len {
            out.push(traj.last().unwrap().clone());
        }
        out
    };
    let a = pad(traj_a);
    let b = pad(traj_b);
    let mut steps = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let traj: Vec<Vec<f64>> = if alpha == 0.0 {
            a.clone()
        } else if alpha == 1.0 {
            b.clone()
        } else {
            a.iter()
                .zip(&b)
                .map(|(za, zb)| {
                    za.iter().zip(zb).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
                })
                .collect()
        };
        let caption = decode_with_trajectory(model, vocab, cond_id, cond, &traj, max_len)?;
        steps.push(InterpolationStep {
            alpha,
            caption,
            out_of_range: !(0.0..=1.0).contains(&alpha),
        });
    }
    Ok(steps)
}

/// Indices of the m nearest training conditions by Euclidean distance on
/// the condition vectors; brute-force scan, ties broken by index.
pub fn nearest_neighbors(cond: &[f64], train: &Dataset, m: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = train
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d: f64 = c
                .features
                .iter()
                .zip(cond)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (i, d)
        })
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(m).map(|(i, _)| i).collect()
}

/// Score every sampled caption by CIDEr against the pooled neighbor
/// references and install the descending ranking on the set. Stores the
/// per-caption scores under `consensus_cider`.
pub fn consensus_rerank(
    set: &mut SampleSet,
    neighbor_refs: &[String],
    stats: &NgramStats,
) -> Result<()> {
    if neighbor_refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let refs: Vec<Vec<String>> = neighbor_refs.iter().map(|r| tokenize(r)).collect();
    let mut scores = Vec::with_capacity(set.k());
    for cap in &set.captions {
        let tokens = tokenize(&cap.raw_text);
        let score = if tokens.is_empty() { 0.0 } else { cider(&tokens, &refs, stats)? };
        scores.push(score);
    }
    let mut ranking: Vec<usize> = (0..set.k()).collect();
    ranking.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    set.scores.insert("consensus_cider".to_string(), scores);
    set.ranking = ranking;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleSetRow {
    cond_id: String,
    captions: Vec<String>,
    scores: BTreeMap<String, Vec<f64>>,
    ranking: Vec<usize>,
    trajectories_path: String,
    truncated: Vec<bool>,
}

/// Write sample sets as JSON lines plus a trajectory sidecar in the
/// checkpoint container (tensor `traj/<cond_id>/<k>`, shape `[T, Z]`).
pub fn write_sample_sets(sets: &[SampleSet], path: &Path, traj_path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for set in sets {
        for (i, traj) in set.trajectories.iter().enumerate() {
            let t = traj.len();
            let z = traj.first().map(|v| v.len()).unwrap_or(0);
            let data: Vec<f64> = traj.iter().flatten().copied().collect();
            tensors.insert(format!("traj/{}/{i}", set.cond_id), Tensor::new(vec![t, z], data));
        }
    }
    let sidecar = Checkpoint::new(serde_json::Value::Null, None, 0, 0, tensors);
    sidecar.save(traj_path)?;

    let traj_name = traj_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        let row = SampleSetRow {
            cond_id: set.cond_id.clone(),
            captions: set.captions.iter().map(|c| c.raw_text.clone()).collect(),
            scores: set.scores.clone(),
            ranking: set.ranking.clone(),
            trajectories_path: traj_name.clone(),
            truncated: set.truncated.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(())
}

/// Read sample sets back; trajectories are restored from the sidecar
/// living next to `path`.
pub fn read_sample_sets(path: &Path) -> Result<Vec<SampleSet>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut sets = Vec::new();
    let mut sidecar: Option<Checkpoint> = None;
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SampleSetRow = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: ln + 1,
            msg: e.to_string(),
        })?;
        if sidecar.is_none() && !row.trajectories_path.is_empty() {
            let traj_path = path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&row.trajectories_path);
            if traj_path.exists() {
                sidecar = Some(Checkpoint::load(&traj_path)?);
            }
        }
        let trajectories: Vec<LatentTrajectory> = (0..row.captions.len())
            .map(|i| {
                sidecar
                    .as_ref()
                    .and_then(|ck| ck.tensors.get(&format!("traj/{}/{i}", row.cond_id)))
                    .map(|t| {
                        let z = t.shape()[1];
                        t.data().chunks(z).map(|c| c.to_vec()).collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        let captions = row
            .captions
            .iter()
            .map(|text| CaptionRecord {
                cond_id: row.cond_id.clone(),
                tokens: Vec::new(),
                condition: Vec::new(),
                raw_text: text.clone(),
            })
            .collect();
        sets.push(SampleSet {
            cond_id: row.cond_id,
            captions,
            trajectories,
            scores: row.scores,
            ranking: row.ranking,
            truncated: row.truncated,
        });
    }
    Ok(sets)
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// descending order with matching eigenvectors (rows).
pub fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (values, vectors)
}

/// Project rows onto the top-2 principal components of their covariance.
/// Degenerate data (fewer than 2 rows, zero variance) projects to zeros.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in i..d {
                cov[i][j] += ci * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (_, vectors) = symmetric_eigen(cov);
    let axis = |k: usize| -> Vec<f64> { vectors.get(k).cloned().unwrap_or_else(|| vec![0.0; d]) };
    let (v1, v2) = (axis(0), axis(1.min(d.saturating_sub(1))));
    rows.iter()
        .map(|r| {
            let mut x = 0.0;
            let mut y = 0.0;
            for i in 0..d {
                let c = r[i] - mean[i];
                x += c * v1[i];
                if d > 1 {
                    y += c * v2[i];
                }
            }
            (x, y)
        })
        .collect()
}

/// One exported row: the intention-model mean behind an emitted word.
#[derive(Debug, Clone)]
pub struct LatentMeanRow {
    pub cond_id: String,
    pub position: usize,
    pub word: String,
    pub mean: Vec<f64>,
}

/// Generate one seeded sample per condition and collect the prior mean
/// μ_t^T behind every emitted token (EOS included).
pub fn collect_latent_means(
    model: &SeqCvae,
    vocab: &VocabIndex,
    conditions: &[(String, ConditionVector)],
    max_len: usize,
    seed: u64,
) -> Result<Vec<LatentMeanRow>> {
    let mut rows = Vec::new();
    for (cond_id, cond) in conditions {
        let mut rng = stream_rng(seed, &format!("latent-export/{cond_id}"));
        let out = generate(model, cond, max_len, 1.0, &mut rng, LatentMode::Sample, None)?;
        // tokens[0] is BOS; emitted word t corresponds to prior_means[t−1]
        for (t, &token) in out.tokens[1..].iter().enumerate() {
            rows.push(LatentMeanRow {
                cond_id: cond_id.clone(),
                position: t + 1,
                word: vocab.decode(token).to_string(),
                mean: out.prior_means[t].clone(),
            });
        }
    }
    Ok(rows)
}

/// Write the latent-mean table as CSV with a trailing 2-D PCA projection
/// pair. Returns the row count.
pub fn export_latent_means(
    model: &SeqCvae,
    vocab: &VocabIndex,
    conditions: &[(String, ConditionVector)],
    max_len: usize,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let rows = collect_latent_means(model, vocab, conditions, max_len, seed)?;
    let proj = pca_2d(&rows.iter().map(|r| r.mean.clone()).collect::<Vec<_>>());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = model.dims.latent;
    let mu_cols: Vec<String> = (0..dim).map(|i| format!("mu_{i}")).collect();
    writeln!(out, "cond_id,position,word,{},pca_x,pca_y", mu_cols.join(","))?;
    for (row, (px, py)) in rows.iter().zip(&proj) {
        let mu: Vec<String> = row.mean.iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{px},{py}",
            row.cond_id,
            row.position,
            row.word,
            mu.join(",")
        )?;
    }
    Ok(rows.len())
}
