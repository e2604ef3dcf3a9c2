//! Seeded synthetic datasets for retrieval and ranking.
//!
//! Vocabulary ids are frequency ranks: every feature draws its ids from a
//! Zipf law over `0..vocab`, so id 0 is the most frequent value.
//!
//! Retrieval targets come from a planted latent model. Each label has a
//! latent vector; each of the first `head_items` query ids has its own full
//! `latent_dim` vector, while the remaining ids share a few cluster centroids
//! that live in the first `coarse_dim` coordinates only. Wide embeddings
//! therefore pay off on head ids and are wasted on the tail.
//!
//! Ranking labels threshold a planted utility `x_context . y_item + bias_item`
//! and flip with probability `label_noise`.
//!
//! The on-disk format is little-endian:
//!
//! ```text
//! magic      8 bytes  "NISDATA\0"
//! version    u32      1
//! task       u32      0 = retrieval, 1 = ranking
//! features   u32      F, followed by F u64 vocabulary sizes
//! counts     3 x u64  train, validation, test
//! records    each: u32 payload length in bytes, then per feature
//!            u32 id count and that many u32 ids, then u32 label
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NisError, Result};
use crate::tensor::dot;

const MAGIC: &[u8; 8] = b"NISDATA\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    Ranking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Drives the label.
    Primary,
    /// A coarsened copy of the first primary feature.
    Derived,
    /// Independent of everything.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub vocab: usize,
    pub kind: FeatureKind,
    /// Ids per example for noise features.
    #[serde(default = "one")]
    pub bag_size: usize,
}

fn one() -> usize {
    1
}

impl FeatureSpec {
    pub fn new(name: &str, vocab: usize, kind: FeatureKind) -> Self {
        FeatureSpec {
            name: name.to_string(),
            vocab,
            kind,
            bag_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalPlant {
    pub num_labels: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub head_items: usize,
    #[serde(default = "default_coarse_dim")]
    pub coarse_dim: usize,
    #[serde(default = "default_tail_clusters")]
    pub tail_clusters: usize,
    /// Softmax temperature of the target distribution; lower is more deterministic.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_latent_dim() -> usize {
    16
}

fn default_coarse_dim() -> usize {
    2
}

fn default_tail_clusters() -> usize {
    8
}

fn default_temperature() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingPlant {
    #[serde(default = "default_ranking_latent")]
    pub latent_dim: usize,
    #[serde(default)]
    pub label_noise: f64,
}

fn default_ranking_latent() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub examples: usize,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub retrieval: Option<RetrievalPlant>,
    #[serde(default)]
    pub ranking: Option<RankingPlant>,
}

fn default_zipf() -> f64 {
    1.1
}

fn default_split() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.examples == 0 {
            return Err(NisError::config("task.examples must be positive"));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(NisError::config("zipf_exponent must be positive"));
        }
        check_ratios(&self.split)?;
        if self.features.is_empty() {
            return Err(NisError::config("at least one feature is required"));
        }
        for f in &self.features {
            if f.vocab == 0 || f.bag_size == 0 {
                return Err(NisError::config(format!("feature `{}` needs positive vocab and bag_size", f.name)));
            }
        }
        let primaries = self.features.iter().filter(|f| f.kind == FeatureKind::Primary).count();
        match self.kind {
            TaskKind::Retrieval => {
                let p = self
                    .retrieval
                    .as_ref()
                    .ok_or_else(|| NisError::config("retrieval task needs a [task.retrieval] table"))?;
                if primaries != 1 {
                    return Err(NisError::config("retrieval needs exactly one primary feature"));
                }
                if p.num_labels < 2 || p.latent_dim == 0 || p.coarse_dim == 0 || p.coarse_dim > p.latent_dim {
                    return Err(NisError::config("retrieval plant: need num_labels >= 2 and 1 <= coarse_dim <= latent_dim"));
                }
                if p.tail_clusters == 0 || !(p.temperature > 0.0) {
                    return Err(NisError::config("retrieval plant: tail_clusters and temperature must be positive"));
                }
            }
            TaskKind::Ranking => {
                let p = self
                    .ranking
                    .as_ref()
                    .ok_or_else(|| NisError::config("ranking task needs a [task.ranking] table"))?;
                if primaries != 2 {
                    return Err(NisError::config("ranking needs exactly two primary features (context, item)"));
                }
                if !(0.0..0.5).contains(&p.label_noise) {
                    return Err(NisError::config("label_noise must lie in [0, 0.5)"));
                }
                if p.latent_dim == 0 {
                    return Err(NisError::config("ranking latent_dim must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Number of output classes for retrieval, 2 for ranking.
    pub fn num_labels(&self) -> usize {
        match self.kind {
            TaskKind::Retrieval => self.retrieval.as_ref().map_or(0, |p| p.num_labels),
            TaskKind::Ranking => 2,
        }
    }
}

/// One example: a bag of ids per feature and a label (target id or 0/1).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub features: Vec<Vec<u32>>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub kind: TaskKind,
    pub vocabs: Vec<usize>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Inverse-CDF Zipf sampler over ranks `0..n` with mass proportional to
/// `(rank + 1)^-exponent`.
#[derive(Clone, Debug)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, exponent: f64) -> Result<Self> {
        if n == 0 || !(exponent > 0.0) {
            return Err(NisError::config("Zipf needs n > 0 and a positive exponent"));
        }
        let mut cdf = Vec::with_capacity(n);
        let mut total = 0.0;
        for k in 0..n {
            total += ((k + 1) as f64).powf(-exponent);
            cdf.push(total);
        }
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Zipf { cdf })
    }

    pub fn probability(&self, k: usize) -> f64 {
        if k == 0 {
            self.cdf[0]
        } else {
            self.cdf[k] - self.cdf[k - 1]
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

fn check_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(NisError::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Deterministic shuffle, then train/validation/test partition by `ratios`.
pub fn split_dataset(mut examples: Vec<Example>, ratios: [f64; 3], seed: u64) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    check_ratios(&ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let test = examples.split_off(n_train + n_val);
    let val = examples.split_off(n_train);
    Ok((examples, val, test))
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Planted latent vector of every primary-feature id in a retrieval task.
pub fn retrieval_item_latents(vocab: usize, plant: &RetrievalPlant, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let l = plant.latent_dim;
    let centroid_scale = (l as f64 / plant.coarse_dim as f64).sqrt();
    let centroids: Vec<Vec<f64>> = (0..plant.tail_clusters)
        .map(|_| {
            let mut c = gaussian_vec(plant.coarse_dim, centroid_scale, rng);
            c.resize(l, 0.0);
            c
        })
        .collect();
    (0..vocab)
        .map(|k| {
            if k < plant.head_items {
                gaussian_vec(l, 1.0, rng)
            } else {
                centroids[k % plant.tail_clusters].clone()
            }
        })
        .collect()
}

struct DerivedMap {
    /// Index of the primary feature a derived feature coarsens.
    source: usize,
    source_vocab: usize,
}

impl DerivedMap {
    fn map(&self, id: usize, vocab: usize) -> u32 {
        (id * vocab / self.source_vocab) as u32
    }
}

fn feature_bags<R: Rng + ?Sized>(
    features: &[FeatureSpec],
    samplers: &[Zipf],
    primaries: &[usize],
    derived: &DerivedMap,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    let mut bags: Vec<Vec<u32>> = vec![Vec::new(); features.len()];
    for (i, f) in features.iter().enumerate() {
        if f.kind == FeatureKind::Primary {
            bags[i].push(primaries[i] as u32);
        }
    }
    for (i, f) in features.iter().enumerate() {
        match f.kind {
            FeatureKind::Primary => {}
            FeatureKind::Derived => {
                let src = bags[derived.source][0] as usize;
                bags[i].push(derived.map(src, f.vocab));
            }
            FeatureKind::Noise => {
                for _ in 0..f.bag_size {
                    bags[i].push(samplers[i].sample(rng) as u32);
                }
            }
        }
    }
    bags
}

/// Generates a retrieval dataset from `config` and `seed`.
pub fn gen_retrieval_dataset(config: &TaskConfig, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    if config.kind != TaskKind::Retrieval {
        return Err(NisError::config("gen_retrieval_dataset needs a retrieval task"));
    }
    let plant = config.retrieval.as_ref().expect("validated");
    let features = &config.features;
    let primary = features.iter().position(|f| f.kind == FeatureKind::Primary).expect("validated");
    let samplers = features
        .iter()
        .map(|f| Zipf::new(f.vocab, config.zipf_exponent))
        .collect::<Result<Vec<_>>>()?;
    let derived = DerivedMap {
        source: primary,
        source_vocab: features[primary].vocab,
    };

    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(1);
    let items = retrieval_item_latents(features[primary].vocab, plant, &mut latent_rng);
    let labels: Vec<Vec<f64>> = (0..plant.num_labels)
        .map(|_| gaussian_vec(plant.latent_dim, 1.0, &mut latent_rng))
        .collect();
    let scale = 1.0 / (plant.temperature * (plant.latent_dim as f64).sqrt());

    // Target CDFs are computed lazily per query id and cached.
    let mut target_cdfs: Vec<Option<Vec<f64>>> = vec![None; features[primary].vocab];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut examples = Vec::with_capacity(config.examples);
    for _ in 0..config.examples {
        let mut ids = vec![0; features.len()];
        ids[primary] = samplers[primary].sample(&mut rng);
        let bags = feature_bags(features, &samplers, &ids, &derived, &mut rng);
        let q = ids[primary];
        let cdf = target_cdfs[q].get_or_insert_with(|| {
            let logits: Vec<f64> = labels.iter().map(|u| scale * dot(&items[q], u)).collect();
            let mut p = vec![0.0; logits.len()];
            crate::autodiff::softmax_into(&logits, &mut p);
            let mut acc = 0.0;
            p.iter()
                .map(|x| {
                    acc += x;
                    acc
                })
                .collect()
        });
        let u: f64 = rng.random();
        let label = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32;
        examples.push(Example { features: bags, label });
    }
    finish(config, examples, seed)
}

/// The planted ranking utility, exposed so tests can score with it.
pub struct RankingPlanted {
    pub context: Vec<Vec<f64>>,
    pub item: Vec<Vec<f64>>,
    pub item_bias: Vec<f64>,
}

impl RankingPlanted {
    pub fn utility(&self, context: usize, item: usize) -> f64 {
        dot(&self.context[context], &self.item[item]) + self.item_bias[item]
    }
}

fn ranking_plant(config: &TaskConfig, seed: u64) -> (RankingPlanted, [usize; 2]) {
    let plant = config.ranking.as_ref().expect("validated");
    let p: Vec<usize> = config
        .features
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == FeatureKind::Primary)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let s = 1.0 / (plant.latent_dim as f64).sqrt().sqrt();
    let context = (0..config.features[p[0]].vocab)
        .map(|_| gaussian_vec(plant.latent_dim, s, &mut rng))
        .collect();
    let item = (0..config.features[p[1]].vocab)
        .map(|_| gaussian_vec(plant.latent_dim, s, &mut rng))
        .collect();
    let item_bias = (0..config.features[p[1]].vocab)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    (
        RankingPlanted {
            context,
            item,
            item_bias,
        },
        [p[0], p[1]],
    )
}

/// The planted utility of a ranking task; regenerating it needs only the config and seed.
pub fn ranking_planted(config: &TaskConfig, seed: u64) -> Result<RankingPlanted> {
    config.validate()?;
    Ok(ranking_plant(config, seed).0)
}

/// Generates a ranking dataset from `config` and `seed`.
pub fn gen_ranking_dataset(config: &TaskConfig, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    if config.kind != TaskKind::Ranking {
        return Err(NisError::config("gen_ranking_dataset needs a ranking task"));
    }
    let noise = config.ranking.as_ref().expect("validated").label_noise;
    let (planted, [c, a]) = ranking_plant(config, seed);
    let features = &config.features;
    let samplers = features
        .iter()
        .map(|f| Zipf::new(f.vocab, config.zipf_exponent))
        .collect::<Result<Vec<_>>>()?;
    let derived = DerivedMap {
        source: c,
        source_vocab: features[c].vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut examples = Vec::with_capacity(config.examples);
    for _ in 0..config.examples {
        let mut ids = vec![0; features.len()];
        ids[c] = samplers[c].sample(&mut rng);
        ids[a] = samplers[a].sample(&mut rng);
        let bags = feature_bags(features, &samplers, &ids, &derived, &mut rng);
        let mut label = planted.utility(ids[c], ids[a]) > 0.0;
        if rng.random::<f64>() < noise {
            label = !label;
        }
        examples.push(Example {
            features: bags,
            label: label as u32,
        });
    }
    finish(config, examples, seed)
}

fn finish(config: &TaskConfig, examples: Vec<Example>, seed: u64) -> Result<DatasetSplit> {
    let (train, val, test) = split_dataset(examples, config.split, seed)?;
    Ok(DatasetSplit {
        kind: config.kind,
        vocabs: config.features.iter().map(|f| f.vocab).collect(),
        train,
        val,
        test,
    })
}

/// Generates whichever dataset `config.kind` names.
pub fn generate(config: &TaskConfig, seed: u64) -> Result<DatasetSplit> {
    match config.kind {
        TaskKind::Retrieval => gen_retrieval_dataset(config, seed),
        TaskKind::Ranking => gen_ranking_dataset(config, seed),
    }
}

impl DatasetSplit {
    pub fn num_features(&self) -> usize {
        self.vocabs.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let kind: u32 = match self.kind {
            TaskKind::Retrieval => 0,
            TaskKind::Ranking => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&(self.vocabs.len() as u32).to_le_bytes());
        for &v in &self.vocabs {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for part in [&self.train, &self.val, &self.test] {
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
        }
        for ex in self.train.iter().chain(&self.val).chain(&self.test) {
            let payload: usize = ex.features.iter().map(|b| 4 + 4 * b.len()).sum::<usize>() + 4;
            out.extend_from_slice(&(payload as u32).to_le_bytes());
            for bag in &ex.features {
                out.extend_from_slice(&(bag.len() as u32).to_le_bytes());
                for id in bag {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
            out.extend_from_slice(&ex.label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NisError::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NisError::Format(format!("dataset format version {version}, expected {FORMAT_VERSION}")));
        }
        let kind = match r.u32()? {
            0 => TaskKind::Retrieval,
            1 => TaskKind::Ranking,
            k => return Err(NisError::Format(format!("unknown task kind {k}"))),
        };
        let nf = r.u32()? as usize;
        let vocabs = (0..nf).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let counts = [r.u64()?, r.u64()?, r.u64()?];
        let mut parts: Vec<Vec<Example>> = Vec::with_capacity(3);
        for &count in &counts {
            let mut part = Vec::new();
            for _ in 0..count {
                let payload = r.u32()? as usize;
                let start = r.pos;
                let mut features = Vec::with_capacity(nf);
                for (f, &vocab) in vocabs.iter().enumerate() {
                    let n = r.u32()? as usize;
                    let bag = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    if let Some(&bad) = bag.iter().find(|&&id| id as usize >= vocab) {
                        return Err(NisError::Format(format!("feature {f} id {bad} outside vocabulary {vocab}")));
                    }
                    features.push(bag);
                }
                let label = r.u32()?;
                if r.pos - start != payload {
                    return Err(NisError::Format("record length prefix does not match its contents".into()));
                }
                part.push(Example { features, label });
            }
            parts.push(part);
        }
        if r.pos != bytes.len() {
            return Err(NisError::Format("trailing bytes after the last record".into()));
        }
        let test = parts.pop().expect("three parts");
        let val = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(DatasetSplit {
            kind,
            vocabs,
            train,
            val,
            test,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| NisError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| NisError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NisError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NisError::Format("truncated dataset file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
