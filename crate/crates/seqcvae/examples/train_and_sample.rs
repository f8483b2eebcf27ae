//! End-to-end run on a synthetic corpus: generate scenes, pretrain the
//! backward LM, train the sequential CVAE and sample a handful of
//! captions per held-out condition.

use seqcvae::config::RunConfig;
use seqcvae::corpus::build_vocab;
use seqcvae::pipeline::{
    cmd_gen_corpus, cmd_pretrain_blm, cmd_sample, cmd_train, load_splits,
};

fn main() -> seqcvae::Result<()> {
    let dir = std::env::temp_dir().join("seqcvae-example-train");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.seed = 13;
    cfg.train.seed = 13;
    cfg.out = dir.to_string_lossy().into_owned();
    cfg.corpus.n_scenes = 24;
    cfg.corpus.captions_per_scene = 3;
    cfg.corpus.feature_dim = 8;
    cfg.pretrain.steps = 150;
    cfg.train.steps = 1200;
    cfg.train.batch_size = 8;
    cfg.train.checkpoint_every = 1200;
    cfg.sample.k = 6;
    cfg.sample.max_len = 14;
    cfg.sample.num_conditions = Some(2);

    cmd_gen_corpus(&cfg)?;
    let (train, _, test) = load_splits(&cfg)?;
    let vocab = build_vocab(&train, cfg.corpus.min_count);
    println!(
        "corpus: {} train / {} test conditions, vocab {}",
        train.conditions.len(),
        test.conditions.len(),
        vocab.len()
    );

    let blm = cmd_pretrain_blm(&cfg)?;
    println!(
        "backward LM: loss {:.3} -> {:.3} over {} steps",
        blm.first().unwrap(),
        blm.last().unwrap(),
        blm.len()
    );

    let summary = cmd_train(&cfg)?;
    println!(
        "train: final loss {:.3} (recon {:.3}, kl {:.3})\n",
        summary.final_loss, summary.final_recon, summary.final_kl
    );

    for set in cmd_sample(&cfg)? {
        println!("condition {} (consensus order):", set.cond_id);
        for cap in set.ranked_captions() {
            println!("  {}", cap.raw_text);
        }
    }
    Ok(())
}
