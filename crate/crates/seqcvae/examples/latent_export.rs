//! Export the intention-prior means behind each generated word together
//! with a 2D PCA projection, the raw material for latent-space plots.

use seqcvae::config::RunConfig;
use seqcvae::pipeline::{cmd_export_latents, cmd_gen_corpus, cmd_train};

fn main() -> seqcvae::Result<()> {
    let dir = std::env::temp_dir().join("seqcvae-example-latents");
    std::fs::create_dir_all(&dir)?;

    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.train.seed = 5;
    cfg.out = dir.to_string_lossy().into_owned();
    cfg.corpus.n_scenes = 24;
    cfg.corpus.captions_per_scene = 3;
    cfg.train.steps = 80;
    cfg.train.batch_size = 8;
    cfg.train.checkpoint_every = 80;
    cfg.sample.num_conditions = Some(2);

    cmd_gen_corpus(&cfg)?;
    cmd_train(&cfg)?;
    let rows = cmd_export_latents(&cfg)?;

    let path = cfg.out_dir().join("latent_means.csv");
    println!("wrote {rows} rows to {}\n", path.display());
    let text = std::fs::read_to_string(&path)?;
    for line in text.lines().take(8) {
        // header carries one mu_i column per latent dimension plus the
        // PCA coordinates
        let short: String = line.chars().take(100).collect();
        println!("{short}");
    }
    Ok(())
}
