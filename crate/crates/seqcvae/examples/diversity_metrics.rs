//! Walk through the accuracy and diversity metrics on hand-sized inputs:
//! BLEU and consensus CIDEr against references, then the set-level
//! diversity suite over a diverse and a collapsed caption set.

use seqcvae::metrics::{
    bleu, cider, distinct_fraction, div_n, mbleu4, tokenize, NgramStats,
};

fn main() -> seqcvae::Result<()> {
    let refs: Vec<Vec<String>> = [
        "a man rides a horse on the beach",
        "the man is riding his horse near the sea",
    ]
    .iter()
    .map(|s| tokenize(s))
    .collect();

    let docs = vec![
        refs.clone(),
        vec![tokenize("a dog chases the ball in the park")],
        vec![tokenize("two children play near the bridge")],
        vec![tokenize("a woman carries a basket through the market")],
    ];
    let stats = NgramStats::from_documents(&docs);

    println!("candidate scores against {} references:", refs.len());
    for cand in [
        "a man rides a horse on the beach",
        "a man rides a horse",
        "the horse stands alone",
    ] {
        let toks = tokenize(cand);
        println!(
            "  {:<38} B4 {:.3}  CIDEr {:.3}",
            format!("{cand:?}"),
            bleu(&toks, &refs, 4)?,
            cider(&toks, &refs, &stats)?
        );
    }

    let diverse = [
        "a man rides a horse on the beach",
        "the rider gallops along the shore",
        "someone crosses the sand on horseback",
    ];
    let collapsed = [
        "a man rides a horse on the beach",
        "a man rides a horse on the beach",
        "a man rides a horse on the shore",
    ];
    for (label, caps) in [("diverse", diverse), ("collapsed", collapsed)] {
        let texts: Vec<String> = caps.iter().map(|s| s.to_string()).collect();
        let toks: Vec<Vec<String>> = caps.iter().map(|s| tokenize(s)).collect();
        println!(
            "\n{label} set: distinct {:.2}  mBLEU-4 {:.3}  Div-1 {:.3}  Div-2 {:.3}",
            distinct_fraction(&texts),
            mbleu4(&toks)?,
            div_n(&toks, 1),
            div_n(&toks, 2)
        );
    }
    Ok(())
}
