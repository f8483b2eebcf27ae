//! The three coupled networks and the per-timestep bound: decoder
//! p(x_t | x_<t, z_≤t, I), learnable intention prior p(z_t | z_<t, x_<t, I),
//! two-stage smoothing encoder q(z_t | z_{t−1}, x, I) with the auxiliary
//! backward-representation regression, plus the ablation variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParameterStore, Tape, Tensor};
use crate::blocks::{Activation, EmbeddingTable, GaussianHead, GaussianNodes, LstmCell, LstmState, Mlp};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Conditioning input (the image embedding stand-in).
pub type ConditionVector = Vec<f64>;

/// Tokenized BOS-prefixed, EOS-terminated sequence paired with its
/// condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub cond_id: String,
    pub tokens: Vec<usize>,
    pub condition: ConditionVector,
    pub raw_text: String,
}

impl CaptionRecord {
    /// Word positions x_1..x_T (EOS included as x_T, BOS and trailing PAD
    /// stripped).
    pub fn words(&self) -> &[usize] {
        let start = usize::from(self.tokens.first() == Some(&BOS));
        let end = self
            .tokens
            .iter()
            .position(|&t| t == EOS)
            .map(|i| i + 1)
            .unwrap_or(self.tokens.len());
        &self.tokens[start..end]
    }
}

/// Sequence of sampled z_t vectors, one per generated position.
pub type LatentTrajectory = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Full model; the backward LM is trained on the corpus.
    SeqCvae,
    /// Alias configuration of the full model, named for clarity in
    /// ablation tables.
    SeqCvaeBrnn,
    /// Prior conditions on z_<t only; the word-embedding input slot is
    /// zero-filled.
    SeqCvaePriorNox,
    /// Prior is a fixed standard normal at every step.
    SeqCvaeConstPrior,
    /// One latent for the whole sentence.
    CvaeSingleZ,
    /// Prior, decoder and posterior share one forward LSTM.
    ZforcingShared,
}

impl ModelVariant {
    pub fn uses_shared_lstm(self) -> bool {
        matches!(self, ModelVariant::ZforcingShared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    /// Word-embedding width E.
    pub embed: usize,
    /// Latent width Z.
    pub latent: usize,
    /// LSTM hidden width H.
    pub hidden: usize,
    /// Condition-vector width D.
    pub cond: usize,
    /// Backward LM hidden width (the regression target width).
    pub blm_hidden: usize,
    /// Encoder-MLP hidden width.
    pub enc_hidden: usize,
}

impl ModelDims {
    /// The full-scale defaults (Z = 512 etc.); tests shrink these.
    pub fn full_scale(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 512,
            latent: 512,
            hidden: 512,
            cond: 512,
            blm_hidden: 512,
            enc_hidden: 512,
        }
    }

    pub fn desk(vocab: usize, cond: usize) -> Self {
        ModelDims {
            vocab,
            embed: 16,
            latent: 16,
            hidden: 32,
            cond,
            blm_hidden: 24,
            enc_hidden: 32,
        }
    }
}

/// Per-batch loss terms. `total = reconstruction + kl_weight·kl + aux`,
/// each averaged over the batch; `aux` carries the λ factor.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub aux: f64,
    pub kl_weight: f64,
    pub total: f64,
    /// Node to run backward() on.
    pub total_node: NodeId,
    /// Mean raw ‖g(μ_t^E) − h_t^B‖² per position t (1-based index t−1).
    pub aux_by_pos: Vec<f64>,
    /// Total word positions across the batch.
    pub step_count: usize,
    /// Total predicted tokens (equals step_count).
    pub token_count: usize,
}

pub struct SeqCvae {
    pub dims: ModelDims,
    pub variant: ModelVariant,
    pub params: ParameterStore,
    /// When false (default) the backward LM is excluded from gradients.
    pub train_blm: bool,
    embed: EmbeddingTable,
    dec_lstm: LstmCell,
    prior_lstm: LstmCell,
    prior_head: GaussianHead,
    enc_fwd: LstmCell,
    enc_mlp: Mlp,
    enc_head: GaussianHead,
    g_mlp: Mlp,
    shared_lstm: LstmCell,
    blm_embed: EmbeddingTable,
    blm_lstm: LstmCell,
}

impl SeqCvae {
    pub fn new(dims: ModelDims, variant: ModelVariant, seed: u64) -> Self {
        let mut params = ParameterStore::new(seed);
        let model = Self::layout(dims, variant, params.seed());
        model.create_params_into(&mut params);
        SeqCvae { params, ..model }
    }

    /// Rebuild a model around an existing (e.g. loaded) parameter store.
    pub fn from_parts(dims: ModelDims, variant: ModelVariant, params: ParameterStore) -> Self {
        let model = Self::layout(dims, variant, params.seed());
        SeqCvae { params, ..model }
    }

    fn layout(dims: ModelDims, variant: ModelVariant, seed: u64) -> Self {
        let dec_in = dims.embed + dims.latent + dims.cond;
        let prior_in = dims.latent + dims.embed + dims.cond;
        let enc_fwd_in = dims.embed + dims.cond;
        let enc_mlp_in = dims.latent + dims.hidden + dims.blm_hidden + dims.cond;
        SeqCvae {
            dims,
            variant,
            params: ParameterStore::new(seed),
            train_blm: false,
            embed: EmbeddingTable::new("embed", dims.vocab, dims.embed),
            dec_lstm: LstmCell::new("dec.lstm", dec_in, dims.hidden),
            prior_lstm: LstmCell::new("prior.lstm", prior_in, dims.hidden),
            prior_head: GaussianHead::new("prior.head", dims.hidden, dims.latent),
            enc_fwd: LstmCell::new("enc.fwd", enc_fwd_in, dims.hidden),
            enc_mlp: Mlp::new("enc.mlp", enc_mlp_in, vec![(dims.enc_hidden, Activation::Tanh)]),
            enc_head: GaussianHead::new("enc.head", dims.enc_hidden, dims.latent),
            g_mlp: Mlp::new(
                "g",
                dims.latent,
                vec![(dims.enc_hidden, Activation::Tanh), (dims.blm_hidden, Activation::Linear)],
            ),
            shared_lstm: LstmCell::new("shared.lstm", dec_in, dims.hidden),
            blm_embed: EmbeddingTable::new("blm.embed", dims.vocab, dims.embed),
            blm_lstm: LstmCell::new("blm.lstm", dims.embed, dims.blm_hidden),
        }
    }

    fn create_params_into(&self, store: &mut ParameterStore) {
        let dims = self.dims;
        self.embed.create_params(store);
        if self.variant.uses_shared_lstm() {
            self.shared_lstm.create_params(store);
        } else {
            self.dec_lstm.create_params(store);
            self.prior_lstm.create_params(store);
            self.enc_fwd.create_params(store);
        }
        store.create("dec.out.w", vec![dims.vocab, dims.hidden], crate::autodiff::Init::FanIn(dims.hidden));
        store.create("dec.out.b", vec![dims.vocab], crate::autodiff::Init::Zeros);
        self.prior_head.create_params(store);
        self.enc_mlp.create_params(store);
        self.enc_head.create_params(store);
        self.g_mlp.create_params(store);
        self.blm_embed.create_params(store);
        self.blm_lstm.create_params(store);
        store.create("blm.out.w", vec![dims.vocab, dims.blm_hidden], crate::autodiff::Init::FanIn(dims.blm_hidden));
        store.create("blm.out.b", vec![dims.vocab], crate::autodiff::Init::Zeros);
    }

    fn blm_frozen(&self) -> bool {
        !self.train_blm
    }

    pub fn zero_latent(&self, tape: &mut Tape) -> NodeId {
        tape.constant(Tensor::zeros(vec![self.dims.latent]))
    }

    pub fn condition_node(&self, tape: &mut Tape, cond: &ConditionVector) -> Result<NodeId> {
        if cond.len() != self.dims.cond {
            return Err(Error::ShapeMismatch {
                op: "condition",
                left: vec![cond.len()],
                right: vec![self.dims.cond],
            });
        }
        Ok(tape.constant(Tensor::vector(cond.clone())))
    }

    pub fn decoder_zero_state(&self, tape: &mut Tape) -> LstmState {
        self.dec_lstm.zero_state(tape)
    }

    pub fn prior_zero_state(&self, tape: &mut Tape) -> LstmState {
        self.prior_lstm.zero_state(tape)
    }

    /// One decoder step: input concat(embed(prev), z_t, I); logits from a
    /// linear head on the new hidden state.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        prev_token: usize,
        z: NodeId,
        cond: NodeId,
        state: LstmState,
    ) -> Result<(NodeId, LstmState)> {
        let emb = self.embed.lookup(tape, &self.params, false, prev_token)?;
        let input = tape.concat(&[emb, z, cond])?;
        let cell = if self.variant.uses_shared_lstm() { &self.shared_lstm } else { &self.dec_lstm };
        let next = cell.step(tape, &self.params, false, input, state)?;
        let logits = self.output_logits(tape, next.h)?;
        Ok((logits, next))
    }

    fn output_logits(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let w = self.params.inject(tape, "dec.out.w", false);
        let b = self.params.inject(tape, "dec.out.b", false);
        let wh = tape.matmul(w, h)?;
        tape.add(wh, b)
    }

    /// One intention-model step. For t = 1 pass a zero z_prev and BOS.
    /// Variant PriorNox zero-fills the word-embedding slot; ConstPrior
    /// returns a standard normal without touching the LSTM.
    pub fn intention_step(
        &self,
        tape: &mut Tape,
        z_prev: NodeId,
        x_prev: usize,
        cond: NodeId,
        state: LstmState,
    ) -> Result<(GaussianNodes, LstmState)> {
        if self.variant == ModelVariant::SeqCvaeConstPrior {
            let mean = self.zero_latent(tape);
            let log_var = self.zero_latent(tape);
            return Ok((GaussianNodes { mean, log_var }, state));
        }
        let emb = if self.variant == ModelVariant::SeqCvaePriorNox {
            tape.constant(Tensor::zeros(vec![self.dims.embed]))
        } else {
            self.embed.lookup(tape, &self.params, false, x_prev)?
        };
        let input = tape.concat(&[z_prev, emb, cond])?;
        let next = self.prior_lstm.step(tape, &self.params, false, input, state)?;
        let gaussian = self.prior_head.forward(tape, &self.params, false, next.h)?;
        Ok((gaussian, next))
    }

    /// Prior parameters for the shared-LSTM variant, read off the shared
    /// hidden state h_{t−1}^S.
    pub fn prior_gaussian_shared(&self, tape: &mut Tape, h: NodeId) -> Result<GaussianNodes> {
        self.prior_head.forward(tape, &self.params, false, h)
    }

    /// Two-stage encoder step: MLP over concat(z_prev, h_t^F, h_t^B, I)
    /// yields Gaussian parameters; the returned scalar is the raw
    /// ‖g(μ_t^E) − h_t^B‖² (the λ factor is applied by the caller).
    pub fn encoder_step(
        &self,
        tape: &mut Tape,
        z_prev: NodeId,
        h_fwd: NodeId,
        h_bwd: NodeId,
        cond: NodeId,
    ) -> Result<(GaussianNodes, NodeId)> {
        let input = tape.concat(&[z_prev, h_fwd, h_bwd, cond])?;
        let trunk = self.enc_mlp.forward(tape, &self.params, false, input)?;
        let gaussian = self.enc_head.forward(tape, &self.params, false, trunk)?;
        let fitted = self.g_mlp.forward(tape, &self.params, false, gaussian.mean)?;
        let diff = tape.sub(fitted, h_bwd)?;
        let aux = tape.sq_l2(diff)?;
        Ok((gaussian, aux))
    }

    /// Run the backward LM right-to-left over `words` (= x_1..x_T). The
    /// returned vector aligns h_t^B at index t−1; h_t^B summarizes x_≥t.
    /// Tokens out of range map to UNK.
    pub fn backward_lm_encode(&self, tape: &mut Tape, words: &[usize]) -> Result<Vec<NodeId>> {
        let frozen = self.blm_frozen();
        let mut states = vec![NodeId(0); words.len()];
        let mut state = self.blm_lstm.zero_state(tape);
        for t in (0..words.len()).rev() {
            let token = if words[t] < self.dims.vocab { words[t] } else { crate::corpus::UNK };
            let emb = self.blm_embed.lookup(tape, &self.params, frozen, token)?;
            state = self.blm_lstm.step(tape, &self.params, frozen, emb, state)?;
            states[t] = state.h;
        }
        Ok(states)
    }

    /// Backward-LM logits for predicting the token preceding the consumed
    /// suffix.
    pub fn blm_logits(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let frozen = self.blm_frozen();
        let w = self.params.inject(tape, "blm.out.w", frozen);
        let b = self.params.inject(tape, "blm.out.b", frozen);
        let wh = tape.matmul(w, h)?;
        tape.add(wh, b)
    }

    /// z = μ + exp(½·log σ²) ⊙ ε with ε treated as a constant.
    pub fn reparameterize(&self, tape: &mut Tape, q: GaussianNodes, eps: &[f64]) -> Result<NodeId> {
        let half_lv = tape.scale(q.log_var, 0.5)?;
        let std = tape.exp(half_lv)?;
        let eps_node = tape.constant(Tensor::vector(eps.to_vec()));
        let scaled = tape.mul(std, eps_node)?;
        tape.add(q.mean, scaled)
    }

    /// Closed-form KL between diagonal Gaussians, summed over dimensions.
    pub fn kl_diag_gaussian(&self, tape: &mut Tape, q: GaussianNodes, p: GaussianNodes) -> Result<NodeId> {
        kl_diag_gaussian(tape, q, p)
    }

    /// Sample ε for one latent draw.
    fn draw_eps(&self, rng: &mut impl Rng) -> Vec<f64> {
        standard_normal(rng, self.dims.latent)
    }

    /// Teacher-forced bound over a batch. All three terms are averaged
    /// over batch items; `lambda` scales the aux penalty.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        batch: &[CaptionRecord],
        kl_weight: f64,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.variant == ModelVariant::CvaeSingleZ {
            return self.single_z_variant_loss(tape, batch, kl_weight, lambda, rng);
        }
        let mut recon_terms = Vec::new();
        let mut kl_terms = Vec::new();
        let mut aux_terms = Vec::new();
        let mut aux_by_pos_sum: Vec<f64> = Vec::new();
        let mut aux_by_pos_n: Vec<usize> = Vec::new();
        let mut step_count = 0usize;

        for record in batch {
            let words = record.words();
            let t_len = words.len();
            if t_len == 0 {
                continue;
            }
            let cond = self.condition_node(tape, &record.condition)?;
            let h_bwd = self.backward_lm_encode(tape, words)?;

            // forward-stage states h_t^F over x_≤t
            let mut h_fwd = Vec::with_capacity(t_len);
            if self.variant.uses_shared_lstm() {
                // filled inside the main loop; the shared cell consumes z
                h_fwd.clear();
            } else {
                let mut state = self.enc_fwd.zero_state(tape);
                for &w in words {
                    let emb = self.embed.lookup(tape, &self.params, false, w)?;
                    let input = tape.concat(&[emb, cond])?;
                    state = self.enc_fwd.step(tape, &self.params, false, input, state)?;
                    h_fwd.push(state.h);
                }
            }

            let mut z_prev = self.zero_latent(tape);
            let mut prior_state = self.prior_zero_state(tape);
            let mut dec_state = self.decoder_zero_state(tape);
            let mut shared_state = self.shared_lstm.zero_state(tape);
            let mut prev_token = BOS;
            for t in 0..t_len {
                let target = words[t];
                if target == PAD {
                    continue;
                }
                let fwd_summary = if self.variant.uses_shared_lstm() {
                    shared_state.h
                } else {
                    h_fwd[t]
                };
                let (q, aux_t) = self.encoder_step(tape, z_prev, fwd_summary, h_bwd[t], cond)?;
                let eps = self.draw_eps(rng);
                let z_t = self.reparameterize(tape, q, &eps)?;

                let (p, next_prior) = if self.variant.uses_shared_lstm() {
                    let g = self.prior_head.forward(tape, &self.params, false, shared_state.h)?;
                    (g, prior_state)
                } else {
                    self.intention_step(tape, z_prev, prev_token, cond, prior_state)?
                };
                prior_state = next_prior;
                let kl_t = kl_diag_gaussian(tape, q, p)?;
                kl_terms.push(kl_t);

                let logits = if self.variant.uses_shared_lstm() {
                    let emb = self.embed.lookup(tape, &self.params, false, prev_token)?;
                    let input = tape.concat(&[emb, z_t, cond])?;
                    shared_state = self.shared_lstm.step(tape, &self.params, false, input, shared_state)?;
                    self.output_logits(tape, shared_state.h)?
                } else {
                    let (logits, next_dec) = self.decoder_step(tape, prev_token, z_t, cond, dec_state)?;
                    dec_state = next_dec;
                    logits
                };
                let xent = tape.softmax_xent(logits, target)?;
                recon_terms.push(xent);

                aux_terms.push(aux_t);
                let raw = tape.value(aux_t).item();
                if aux_by_pos_sum.len() <= t {
                    aux_by_pos_sum.resize(t + 1, 0.0);
                    aux_by_pos_n.resize(t + 1, 0);
                }
                aux_by_pos_sum[t] += raw;
                aux_by_pos_n[t] += 1;

                z_prev = z_t;
                prev_token = target;
                step_count += 1;
            }
        }
        self.combine(tape, batch.len(), recon_terms, kl_terms, aux_terms, kl_weight, lambda, aux_by_pos_sum, aux_by_pos_n, step_count)
    }

    /// Single-latent ablation: one z from q(z | x, I) built from the last
    /// forward hidden and the first backward hidden, fed at every decoder
    /// step; one KL term against the standard normal.
    pub fn single_z_variant_loss(
        &self,
        tape: &mut Tape,
        batch: &[CaptionRecord],
        kl_weight: f64,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut recon_terms = Vec::new();
        let mut kl_terms = Vec::new();
        let mut aux_terms = Vec::new();
        let mut aux_by_pos_sum: Vec<f64> = Vec::new();
        let mut aux_by_pos_n: Vec<usize> = Vec::new();
        let mut step_count = 0usize;

        for record in batch {
            let words = record.words();
            let t_len = words.len();
            if t_len == 0 {
                continue;
            }
            let cond = self.condition_node(tape, &record.condition)?;
            let h_bwd = self.backward_lm_encode(tape, words)?;
            let mut state = self.enc_fwd.zero_state(tape);
            for &w in words {
                let emb = self.embed.lookup(tape, &self.params, false, w)?;
                let input = tape.concat(&[emb, cond])?;
                state = self.enc_fwd.step(tape, &self.params, false, input, state)?;
            }
            let z0 = self.zero_latent(tape);
            let (q, aux) = self.encoder_step(tape, z0, state.h, h_bwd[0], cond)?;
            let eps = self.draw_eps(rng);
            let z = self.reparameterize(tape, q, &eps)?;
            let std_normal = GaussianNodes {
                mean: self.zero_latent(tape),
                log_var: self.zero_latent(tape),
            };
            kl_terms.push(kl_diag_gaussian(tape, q, std_normal)?);
            aux_terms.push(aux);
            if aux_by_pos_sum.is_empty() {
                aux_by_pos_sum.resize(1, 0.0);
                aux_by_pos_n.resize(1, 0);
            }
            aux_by_pos_sum[0] += tape.value(aux).item();
            aux_by_pos_n[0] += 1;

            let mut dec_state = self.decoder_zero_state(tape);
            let mut prev_token = BOS;
            for &target in words {
                if target == PAD {
                    continue;
                }
                let (logits, next) = self.decoder_step(tape, prev_token, z, cond, dec_state)?;
                dec_state = next;
                recon_terms.push(tape.softmax_xent(logits, target)?);
                prev_token = target;
                step_count += 1;
            }
        }
        self.combine(tape, batch.len(), recon_terms, kl_terms, aux_terms, kl_weight, lambda, aux_by_pos_sum, aux_by_pos_n, step_count)
    }

    #[allow(clippy::too_many_arguments)]
    fn combine(
        &self,
        tape: &mut Tape,
        batch_len: usize,
        recon_terms: Vec<NodeId>,
        kl_terms: Vec<NodeId>,
        aux_terms: Vec<NodeId>,
        kl_weight: f64,
        lambda: f64,
        aux_by_pos_sum: Vec<f64>,
        aux_by_pos_n: Vec<usize>,
        step_count: usize,
    ) -> Result<LossBreakdown> {
        let inv_b = 1.0 / batch_len as f64;
        let sum_nodes = |tape: &mut Tape, terms: &[NodeId]| -> Result<NodeId> {
            let mut acc = tape.constant(Tensor::scalar(0.0));
            for &t in terms {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        };
        let recon_sum = sum_nodes(tape, &recon_terms)?;
        let recon = tape.scale(recon_sum, inv_b)?;
        let kl_sum = sum_nodes(tape, &kl_terms)?;
        let kl = tape.scale(kl_sum, inv_b)?;
        let aux_sum = sum_nodes(tape, &aux_terms)?;
        let aux = tape.scale(aux_sum, lambda * inv_b)?;

        let weighted_kl = tape.scale(kl, kl_weight)?;
        let partial = tape.add(recon, weighted_kl)?;
        let total_node = tape.add(partial, aux)?;

        let aux_by_pos = aux_by_pos_sum
            .iter()
            .zip(&aux_by_pos_n)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();

        Ok(LossBreakdown {
            reconstruction: tape.value(recon).item(),
            kl: tape.value(kl).item(),
            aux: tape.value(aux).item(),
            kl_weight,
            total: tape.value(total_node).item(),
            total_node,
            aux_by_pos,
            step_count,
            token_count: step_count,
        })
    }

    /// One posterior-sample importance weight ln p(x, z | I) − ln q(z | x, I)
    /// for a held-out caption. The mean of these over draws estimates the
    /// bound; log-mean-exp estimates the log-likelihood.
    pub fn log_importance_weight(&self, record: &CaptionRecord, rng: &mut impl Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let words = record.words().to_vec();
        if words.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cond = self.condition_node(&mut tape, &record.condition)?;
        let h_bwd = self.backward_lm_encode(&mut tape, &words)?;
        let mut h_fwd = Vec::with_capacity(words.len());
        let mut state = self.enc_fwd.zero_state(&mut tape);
        for &w in &words {
            let emb = self.embed.lookup(&mut tape, &self.params, false, w)?;
            let input = tape.concat(&[emb, cond])?;
            state = self.enc_fwd.step(&mut tape, &self.params, false, input, state)?;
            h_fwd.push(state.h);
        }

        let mut log_w = 0.0;
        let mut z_prev = self.zero_latent(&mut tape);
        let mut prior_state = self.prior_zero_state(&mut tape);
        let mut dec_state = self.decoder_zero_state(&mut tape);
        let mut prev_token = BOS;
        for (t, &target) in words.iter().enumerate() {
            let (q, _) = self.encoder_step(&mut tape, z_prev, h_fwd[t], h_bwd[t], cond)?;
            let eps = self.draw_eps(rng);
            let z_t = self.reparameterize(&mut tape, q, &eps)?;
            let z_val = tape.value(z_t).data().to_vec();
            let q_mean = tape.value(q.mean).data().to_vec();
            let q_lv = tape.value(q.log_var).data().to_vec();
            log_w -= gaussian_log_pdf(&q_mean, &q_lv, &z_val);

            let (p, next_prior) = self.intention_step(&mut tape, z_prev, prev_token, cond, prior_state)?;
            prior_state = next_prior;
            let p_mean = tape.value(p.mean).data().to_vec();
            let p_lv = tape.value(p.log_var).data().to_vec();
            log_w += gaussian_log_pdf(&p_mean, &p_lv, &z_val);

            let (logits, next_dec) = self.decoder_step(&mut tape, prev_token, z_t, cond, dec_state)?;
            dec_state = next_dec;
            let xent = tape.softmax_xent(logits, target)?;
            log_w -= tape.value(xent).item();

            z_prev = z_t;
            prev_token = target;
        }
        Ok(log_w)
    }
}

/// Closed-form KL(q‖p) between diagonal Gaussians given as (mean, log-var)
/// tape nodes, summed over dimensions.
pub fn kl_diag_gaussian(tape: &mut Tape, q: GaussianNodes, p: GaussianNodes) -> Result<NodeId> {
    let dim = tape.value(q.mean).numel();
    if tape.value(p.mean).numel() != dim {
        return Err(Error::ShapeMismatch {
            op: "kl_diag_gaussian",
            left: tape.value(q.mean).shape().to_vec(),
            right: tape.value(p.mean).shape().to_vec(),
        });
    }
    let lv_diff = tape.sub(q.log_var, p.log_var)?;
    let var_ratio = tape.exp(lv_diff)?;
    let mean_diff = tape.sub(q.mean, p.mean)?;
    let mean_sq = tape.mul(mean_diff, mean_diff)?;
    let neg_p_lv = tape.neg(p.log_var)?;
    let inv_p_var = tape.exp(neg_p_lv)?;
    let mahalanobis = tape.mul(mean_sq, inv_p_var)?;
    let sum_terms = tape.add(var_ratio, mahalanobis)?;
    let inner = tape.sub(sum_terms, lv_diff)?;
    let s = tape.sum(inner)?;
    let centered = tape.add_scalar(s, -(dim as f64))?;
    tape.scale(centered, 0.5)
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_pdf(mean: &[f64], log_var: &[f64], x: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_var)
        .zip(x)
        .map(|((m, lv), xv)| {
            let inv_var = (-lv).exp();
            -0.5 * (ln_2pi + lv + (xv - m) * (xv - m) * inv_var)
        })
        .sum()
}

/// Box–Muller draws; kept explicit so sampling streams are portable.
pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}
