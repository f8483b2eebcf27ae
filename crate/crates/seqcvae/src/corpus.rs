//! Synthetic condition+caption corpora with known ground-truth diversity,
//! JSONL ingestion, vocabulary construction and deterministic splits.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::rng::stream_rng;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Token ↔ id bijection with fixed specials BOS=0, EOS=1, PAD=2, UNK=3.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VocabIndex {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl VocabIndex {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        VocabIndex { tokens, index }
    }

    /// Rebuild the lookup map, needed after serde deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn decode(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// BOS-prefixed, EOS-terminated id sequence.
    pub fn encode_caption(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().map(|t| self.encode(t)));
        ids.push(EOS);
        ids
    }

    /// Words between BOS and EOS, space-joined.
    pub fn decode_caption(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .map(|&id| self.decode(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One conditioning input with its reference captions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub cond_id: String,
    pub features: Vec<f64>,
    pub captions: Vec<String>,
    /// Closed-form count of distinct valid captions, when known (synthetic
    /// scenes only).
    pub valid_caption_count: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub conditions: Vec<ConditionRecord>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn num_captions(&self) -> usize {
        self.conditions.iter().map(|c| c.captions.len()).sum()
    }

    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.conditions.iter().flat_map(|c| c.captions.iter().map(|s| s.as_str()))
    }

    /// FNV-1a over a canonical rendering; used for determinism checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for c in &self.conditions {
            feed(c.cond_id.as_bytes());
            for f in &c.features {
                feed(&f.to_le_bytes());
            }
            for cap in &c.captions {
                feed(cap.as_bytes());
            }
        }
        h
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in &self.conditions {
            for cap in &c.captions {
                let line = serde_json::json!({
                    "cond_id": c.cond_id,
                    "features": c.features,
                    "caption": cap,
                });
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub lexicon: Vec<String>,
}

/// Template-based caption grammar. A scene activates a fixed-size subset
/// of each attribute's lexicon; its set of valid captions is the product
/// of the active choice sets over the slots of each template.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGrammar {
    pub attributes: Vec<AttributeSpec>,
    /// Each template is a word list; `{name}` items are attribute slots.
    pub templates: Vec<Vec<String>>,
    pub choices_per_attribute: usize,
}

impl SceneGrammar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Desk-scale default: ~120-token vocabulary, captions of 5–12 words.
    pub fn default_desk() -> Self {
        let lex = |words: &[&str]| words.iter().map(|s| s.to_string()).collect();
        SceneGrammar {
            attributes: vec![
                AttributeSpec {
                    name: "subject".into(),
                    lexicon: lex(&[
                        "man", "woman", "dog", "cat", "boy", "girl", "horse", "bird", "rider",
                        "child", "farmer", "player",
                    ]),
                },
                AttributeSpec {
                    name: "verb".into(),
                    lexicon: lex(&[
                        "watches", "chases", "carries", "follows", "passes", "greets", "finds",
                        "holds", "pushes", "pulls", "feeds", "draws",
                    ]),
                },
                AttributeSpec {
                    name: "object".into(),
                    lexicon: lex(&[
                        "ball", "kite", "bike", "wagon", "basket", "drum", "flag", "ladder",
                        "bucket", "lantern", "wheel", "rope",
                    ]),
                },
                AttributeSpec {
                    name: "place".into(),
                    lexicon: lex(&[
                        "park", "field", "beach", "market", "garden", "street", "harbor", "yard",
                        "meadow", "bridge", "station", "forest",
                    ]),
                },
                AttributeSpec {
                    name: "mood".into(),
                    lexicon: lex(&[
                        "quiet", "busy", "sunny", "windy", "bright", "foggy", "crowded", "calm",
                        "rainy", "dusty", "noisy", "cold",
                    ]),
                },
            ],
            templates: vec![
                vec![
                    "the", "{subject}", "{verb}", "the", "{object}", "in", "the", "{mood}",
                    "{place}",
                ]
                .into_iter()
                .map(String::from)
                .collect(),
                vec!["a", "{subject}", "{verb}", "a", "{object}", "near", "the", "{place}"]
                    .into_iter()
                    .map(String::from)
                    .collect(),
                vec![
                    "one", "{mood}", "day", "the", "{subject}", "{verb}", "the", "{object}",
                ]
                .into_iter()
                .map(String::from)
                .collect(),
            ],
            choices_per_attribute: 2,
        }
    }

    fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    fn slot_name(word: &str) -> Option<&str> {
        word.strip_prefix('{').and_then(|w| w.strip_suffix('}'))
    }

    /// Distinct valid captions for one scene: sum over templates of the
    /// product of choice-set sizes over that template's slots.
    pub fn valid_caption_count(&self, choices: &[Vec<String>]) -> u64 {
        self.templates
            .iter()
            .map(|tpl| {
                tpl.iter()
                    .map(|w| match Self::slot_name(w) {
                        Some(name) => {
                            let idx = self.attr_index(name).expect("unknown slot");
                            choices[idx].len() as u64
                        }
                        None => 1,
                    })
                    .product::<u64>()
            })
            .sum()
    }

    /// Enumerate every valid caption of a scene.
    pub fn enumerate_captions(&self, choices: &[Vec<String>]) -> Vec<String> {
        let mut out = Vec::new();
        for tpl in &self.templates {
            let mut partial: Vec<Vec<String>> = vec![Vec::new()];
            for w in tpl {
                let options: Vec<&str> = match Self::slot_name(w) {
                    Some(name) => {
                        let idx = self.attr_index(name).expect("unknown slot");
                        choices[idx].iter().map(|s| s.as_str()).collect()
                    }
                    None => vec![w.as_str()],
                };
                let mut next = Vec::with_capacity(partial.len() * options.len());
                for p in &partial {
                    for o in &options {
                        let mut q = p.clone();
                        q.push((*o).to_string());
                        next.push(q);
                    }
                }
                partial = next;
            }
            out.extend(partial.into_iter().map(|ws| ws.join(" ")));
        }
        out
    }

    /// True if `caption` is a valid realization of the scene.
    pub fn matches(&self, choices: &[Vec<String>], caption: &str) -> bool {
        self.enumerate_captions(choices).iter().any(|c| c == caption)
    }
}

/// Draw per-scene attribute choices.
fn draw_choices(grammar: &SceneGrammar, rng: &mut impl Rng) -> Vec<Vec<String>> {
    grammar
        .attributes
        .iter()
        .map(|attr| {
            let mut lex = attr.lexicon.clone();
            lex.shuffle(rng);
            lex.truncate(grammar.choices_per_attribute.min(attr.lexicon.len()));
            lex
        })
        .collect()
}

/// Deterministic pseudo-random embedding basis vector for one lexical
/// choice.
fn basis_vector(seed: u64, attr: &str, word: &str, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, &format!("featbasis/{attr}/{word}"));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Generate a synthetic dataset: each scene gets a noisy attribute
/// embedding as its condition vector and `captions_per_scene` distinct
/// captions drawn uniformly from its valid set.
pub fn generate_synthetic(
    grammar: &SceneGrammar,
    n_scenes: usize,
    captions_per_scene: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = stream_rng(seed, "corpus");
    let mut conditions = Vec::with_capacity(n_scenes);
    for scene in 0..n_scenes {
        let choices = draw_choices(grammar, &mut rng);
        let count = grammar.valid_caption_count(&choices);
        if (captions_per_scene as u64) > count {
            return Err(Error::Infeasible(format!(
                "requested {captions_per_scene} captions per scene but the grammar admits only {count}"
            )));
        }
        let mut valid = grammar.enumerate_captions(&choices);
        valid.shuffle(&mut rng);
        valid.truncate(captions_per_scene);

        let mut features = vec![0.0; feature_dim];
        for (attr, chosen) in grammar.attributes.iter().zip(&choices) {
            for word in chosen {
                for (f, b) in features.iter_mut().zip(basis_vector(seed, &attr.name, word, feature_dim)) {
                    *f += b;
                }
            }
        }
        for f in features.iter_mut() {
            *f += rng.gen_range(-0.05..0.05);
        }

        conditions.push(ConditionRecord {
            cond_id: format!("scene-{scene:04}"),
            features,
            captions: valid,
            valid_caption_count: Some(count),
        });
    }
    Ok(Dataset { conditions, feature_dim })
}

#[derive(Deserialize)]
struct JsonlRow {
    cond_id: String,
    features: Vec<f64>,
    caption: String,
}

/// Load a JSONL dataset; rows sharing a cond_id are grouped under one
/// condition with multiple reference captions.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, ConditionRecord> = HashMap::new();
    let mut feature_dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        match feature_dim {
            None => feature_dim = Some(row.features.len()),
            Some(d) if d != row.features.len() => {
                return Err(Error::Malformed {
                    line: lineno + 1,
                    msg: format!("feature dimension {} != {}", row.features.len(), d),
                })
            }
            _ => {}
        }
        by_id
            .entry(row.cond_id.clone())
            .or_insert_with(|| {
                order.push(row.cond_id.clone());
                ConditionRecord {
                    cond_id: row.cond_id,
                    features: row.features,
                    captions: Vec::new(),
                    valid_caption_count: None,
                }
            })
            .captions
            .push(row.caption);
    }
    let conditions = order.into_iter().map(|id| by_id.remove(&id).unwrap()).collect();
    Ok(Dataset { conditions, feature_dim: feature_dim.unwrap_or(0) })
}

/// Frequency-indexed vocabulary: tokens with count ≥ min_count, ordered by
/// frequency descending then lexicographic.
pub fn build_vocab(dataset: &Dataset, min_count: usize) -> VocabIndex {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in dataset.all_captions() {
        for tok in tokenize(caption) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(entries.into_iter().map(|(t, _)| t));
    VocabIndex::from_tokens(tokens)
}

/// Split at condition granularity by seeded shuffle. A nonzero ratio that
/// would receive no conditions is an error.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (r_train, r_val, r_test) = ratios;
    assert!(
        ((r_train + r_val + r_test) - 1.0).abs() < 1e-9,
        "split ratios must sum to 1"
    );
    let n = dataset.conditions.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "split"));

    let n_train = (r_train * n as f64).round() as usize;
    let n_val = (r_val * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let n_test = n - n_train - n_val;
    for (count, ratio) in [(n_train, r_train), (n_val, r_val), (n_test, r_test)] {
        if ratio > 0.0 && count == 0 {
            return Err(Error::Infeasible(format!(
                "split ratio {ratio} yields an empty split over {n} conditions"
            )));
        }
    }
    let take = |range: &[usize]| Dataset {
        conditions: range.iter().map(|&i| dataset.conditions[i].clone()).collect(),
        feature_dim: dataset.feature_dim,
    };
    Ok((
        take(&idx[..n_train]),
        take(&idx[n_train..n_train + n_val]),
        take(&idx[n_train + n_val..]),
    ))
}
