//! Planted-alignment synthetic scenes and the on-disk feature container.
//!
//! A scene samples a handful of latent objects; every visual-feature row is
//! its object's latent plus noise, and every concept row is the embedding of
//! a concept word plus noise. The feature-to-object map is kept as a planted
//! assignment for generator validation only — training never sees it.
//!
//! On disk a bundle is a `.miaf` file: a fixed 14-byte header (magic "MIAF",
//! version u16, n u32, d_h u32, all little-endian), the I and T matrices as
//! row-major f32, then a JSON block with tokens, captions, and the planted
//! assignment.

use crate::decoders::Vocabulary;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const MAGIC: &[u8; 4] = b"MIAF";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;
/// Caps on header-declared sizes; anything larger is a corrupt header, not
/// an allocation request.
const MAX_DIM: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    UnsupportedVersion { found: u16 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("scene vocabulary too small: need {needed} object words, have {available}")]
    VocabTooSmall { needed: usize, available: usize },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

/// Word lists the generator draws objects, attributes, and relations from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneWords {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
}

impl Default for SceneWords {
    fn default() -> Self {
        let list = |words: &[&str]| words.iter().map(|s| s.to_string()).collect();
        Self {
            objects: list(&[
                "dog", "cat", "bike", "woman", "man", "boat", "zebra", "bus", "vase", "table",
                "monitor", "suitcase",
            ]),
            attributes: list(&["young", "black", "red", "large", "small", "dry", "tall", "white"]),
            relations: list(&["sitting", "holding", "riding", "near", "standing", "driving"]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Rows per modality; 49 mirrors grid features, 36 region features.
    pub n_features: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub d_h: usize,
    pub visual_noise_sigma: f64,
    pub concept_noise_sigma: f64,
    pub words: SceneWords,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(n_features: usize, d_h: usize, seed: u64) -> Self {
        Self {
            n_features,
            min_objects: 2,
            max_objects: 6,
            d_h,
            visual_noise_sigma: 0.3,
            concept_noise_sigma: 0.3,
            words: SceneWords::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_features == 0 || self.d_h == 0 {
            return Err(DataError::InvalidConfig("n_features and d_h must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(DataError::InvalidConfig(format!(
                "object range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.n_features {
            return Err(DataError::InvalidConfig(format!(
                "up to {} objects but only {} features",
                self.max_objects, self.n_features
            )));
        }
        if self.visual_noise_sigma < 0.0 || self.concept_noise_sigma < 0.0 {
            return Err(DataError::InvalidConfig("noise sigmas must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One image's worth of features: the visual matrix I, the concept matrix T,
/// the concept tokens behind T's rows, reference captions, and the planted
/// feature-to-object assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_id: u64,
    pub visual: Tensor,
    pub textual: Tensor,
    pub concept_tokens: Vec<String>,
    pub captions: Vec<Vec<String>>,
    pub planted_assignment: Vec<usize>,
}

impl FeatureBundle {
    pub fn n(&self) -> usize {
        self.visual.dims2().expect("visual is a matrix").0
    }

    pub fn d_h(&self) -> usize {
        self.visual.dims2().expect("visual is a matrix").1
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Embedding of a word, stable across scenes under one base seed.
fn word_embedding(word: &str, d_h: usize, base_seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::for_stream(base_seed, fnv1a64(word.as_bytes()));
    (0..d_h).map(|_| rng.normal()).collect()
}

/// Generates one scene, deterministically from (cfg.seed, image_id).
pub fn generate_scene(cfg: &SceneConfig, image_id: u64) -> Result<FeatureBundle, DataError> {
    cfg.validate()?;
    let mut rng = SplitMix64::for_stream(cfg.seed, image_id);
    let n = cfg.n_features;
    let d = cfg.d_h;

    let n_objects = cfg.min_objects + rng.index(cfg.max_objects - cfg.min_objects + 1);
    if cfg.words.objects.len() < n_objects {
        return Err(DataError::VocabTooSmall {
            needed: n_objects,
            available: cfg.words.objects.len(),
        });
    }

    // Distinct object words via partial shuffle of the index list.
    let mut object_idx: Vec<usize> = (0..cfg.words.objects.len()).collect();
    for i in 0..n_objects {
        let j = i + rng.index(object_idx.len() - i);
        object_idx.swap(i, j);
    }
    let object_words: Vec<&str> =
        object_idx[..n_objects].iter().map(|&i| cfg.words.objects[i].as_str()).collect();

    let latents: Vec<Vec<f64>> =
        (0..n_objects).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();

    // Every object owns at least one feature row; the rest land uniformly.
    let mut assignment = vec![0usize; n];
    for (row, slot) in assignment.iter_mut().enumerate().take(n_objects) {
        *slot = row;
    }
    for slot in assignment.iter_mut().skip(n_objects) {
        *slot = rng.index(n_objects);
    }

    let mut visual = Vec::with_capacity(n * d);
    for &obj in &assignment {
        for j in 0..d {
            visual.push(latents[obj][j] + cfg.visual_noise_sigma * rng.normal());
        }
    }

    // Objects by how many regions they own, most first; ties by object index
    // to keep generation deterministic.
    let mut counts = vec![0usize; n_objects];
    for &obj in &assignment {
        counts[obj] += 1;
    }
    let mut by_freq: Vec<usize> = (0..n_objects).collect();
    by_freq.sort_by_key(|&o| (std::cmp::Reverse(counts[o]), o));

    let attr = cfg.words.attributes[rng.index(cfg.words.attributes.len())].clone();
    let rel = cfg.words.relations[rng.index(cfg.words.relations.len())].clone();

    // Top concepts first, then the caption's attribute and relation words,
    // cycled to fill all n rows.
    let mut base_tokens: Vec<String> =
        by_freq.iter().map(|&o| object_words[o].to_string()).collect();
    base_tokens.push(attr.clone());
    base_tokens.push(rel.clone());
    let concept_tokens: Vec<String> =
        (0..n).map(|i| base_tokens[i % base_tokens.len()].clone()).collect();

    let mut textual = Vec::with_capacity(n * d);
    for tok in &concept_tokens {
        let emb = word_embedding(tok, d, cfg.seed);
        for &e in &emb {
            textual.push(e + cfg.concept_noise_sigma * rng.normal());
        }
    }

    let obj1 = object_words[by_freq[0]].to_string();
    let obj2 = object_words[by_freq[1 % by_freq.len()]].to_string();
    let caption: Vec<String> =
        ["a", &attr, &obj1, &rel, "a", &obj2].iter().map(|s| s.to_string()).collect();

    Ok(FeatureBundle {
        image_id,
        visual: Tensor::matrix(n, d, visual).expect("generated shape"),
        textual: Tensor::matrix(n, d, textual).expect("generated shape"),
        concept_tokens,
        captions: vec![caption],
        planted_assignment: assignment,
    })
}

/// Generates `count` scenes with image ids 0..count. Scenes derive
/// independent seed streams, so the parallel and sequential paths produce
/// identical bundles.
pub fn generate_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<FeatureBundle>, DataError> {
    #[cfg(feature = "parallel")]
    {
        (0..count as u64).into_par_iter().map(|id| generate_scene(cfg, id)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count as u64).map(|id| generate_scene(cfg, id)).collect()
    }
}

/// Sequential twin of [`generate_scenes`]; the bench suite compares the two.
pub fn generate_scenes_seq(cfg: &SceneConfig, count: usize) -> Result<Vec<FeatureBundle>, DataError> {
    (0..count as u64).map(|id| generate_scene(cfg, id)).collect()
}

/// Fraction of features whose nearest per-object centroid matches the
/// planted assignment. Validates that scenes carry learnable structure.
pub fn planted_recovery_accuracy(bundle: &FeatureBundle) -> f64 {
    let (n, d) = bundle.visual.dims2().expect("matrix");
    let n_objects = bundle.planted_assignment.iter().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; d]; n_objects];
    let mut counts = vec![0usize; n_objects];
    for (row, &obj) in bundle.planted_assignment.iter().enumerate() {
        counts[obj] += 1;
        for j in 0..d {
            centroids[obj][j] += bundle.visual.get2(row, j);
        }
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= cnt.max(1) as f64;
        }
    }
    let mut correct = 0;
    for (row, &obj) in bundle.planted_assignment.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (o, c) in centroids.iter().enumerate() {
            let dist: f64 =
                (0..d).map(|j| (bundle.visual.get2(row, j) - c[j]).powi(2)).sum();
            if dist < best_d {
                best_d = dist;
                best = o;
            }
        }
        if best == obj {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    image_id: u64,
    concept_tokens: Vec<String>,
    captions: Vec<Vec<String>>,
    planted_assignment: Vec<usize>,
}

fn push_f32_matrix(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a bundle to the `.miaf` layout. Matrices are stored as f32.
pub fn write_bundle(path: &Path, bundle: &FeatureBundle) -> Result<(), DataError> {
    let (n, d) = bundle
        .visual
        .dims2()
        .ok_or_else(|| DataError::Format("visual features must be a matrix".into()))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * n * d);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    push_f32_matrix(&mut bytes, &bundle.visual);
    push_f32_matrix(&mut bytes, &bundle.textual);
    let meta = BundleMeta {
        image_id: bundle.image_id,
        concept_tokens: bundle.concept_tokens.clone(),
        captions: bundle.captions.clone(),
        planted_assignment: bundle.planted_assignment.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| DataError::Format(e.to_string()))?;
    bytes.extend_from_slice(&json);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn read_f32_matrix(bytes: &[u8], rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .take(rows * cols)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::matrix(rows, cols, data).expect("validated length")
}

/// Parses a `.miaf` file. Corruption yields a typed [`DataError`]; this
/// never panics on malformed input.
pub fn read_bundle(path: &Path) -> Result<FeatureBundle, DataError> {
    let bytes = fs::read(path)?;
    parse_bundle(&bytes)
}

pub fn parse_bundle(bytes: &[u8]) -> Result<FeatureBundle, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { needed: HEADER_LEN, found: bytes.len() });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if &magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion { found: version });
    }
    let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as u64;
    let d = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as u64;
    if n == 0 || d == 0 || n > MAX_DIM || d > MAX_DIM {
        return Err(DataError::Format(format!("implausible dimensions n={n}, d_h={d}")));
    }
    let payload = (2 * n * d * 4) as usize;
    let needed = HEADER_LEN + payload;
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, found: bytes.len() });
    }
    let (n, d) = (n as usize, d as usize);
    let visual = read_f32_matrix(&bytes[HEADER_LEN..], n, d);
    let textual = read_f32_matrix(&bytes[HEADER_LEN + payload / 2..], n, d);
    for (t, name) in [(&visual, "visual"), (&textual, "textual")] {
        t.validate_finite(name).map_err(|e| DataError::Format(e.to_string()))?;
    }
    let meta: BundleMeta = serde_json::from_slice(&bytes[needed..])
        .map_err(|e| DataError::Format(format!("metadata block: {e}")))?;
    if meta.concept_tokens.len() != n {
        return Err(DataError::Format(format!(
            "{} concept tokens for {} feature rows",
            meta.concept_tokens.len(),
            n
        )));
    }
    if meta.planted_assignment.len() != n {
        return Err(DataError::Format(format!(
            "{} planted entries for {} feature rows",
            meta.planted_assignment.len(),
            n
        )));
    }
    if meta.captions.is_empty() || meta.captions.iter().any(|c| c.is_empty()) {
        return Err(DataError::Format("bundle needs at least one nonempty caption".into()));
    }
    Ok(FeatureBundle {
        image_id: meta.image_id,
        visual,
        textual,
        concept_tokens: meta.concept_tokens,
        captions: meta.captions,
        planted_assignment: meta.planted_assignment,
    })
}

/// Vocabulary over every caption and concept token in the corpus; ids are
/// stable because insertion is lexicographic after the reserved block.
pub fn build_vocab(bundles: &[FeatureBundle]) -> Vocabulary {
    let words = bundles.iter().flat_map(|b| {
        b.captions.iter().flatten().cloned().chain(b.concept_tokens.iter().cloned())
    });
    Vocabulary::from_words(words)
}

/// Writes a dataset directory: scene_NNNNN.miaf files plus vocab.json.
pub fn write_dataset(dir: &Path, bundles: &[FeatureBundle]) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for bundle in bundles {
        let path = dir.join(format!("scene_{:05}.miaf", bundle.image_id));
        write_bundle(&path, bundle)?;
        files.push(path);
    }
    let vocab = build_vocab(bundles);
    let vocab_json =
        serde_json::to_string_pretty(&vocab).map_err(|e| DataError::Format(e.to_string()))?;
    fs::write(dir.join("vocab.json"), vocab_json.as_bytes())?;
    Ok(files)
}

/// Loads every `.miaf` file (sorted by name) and the vocabulary.
pub fn load_dataset(dir: &Path) -> Result<(Vec<FeatureBundle>, Vocabulary), DataError> {
    let vocab_bytes = fs::read(dir.join("vocab.json"))?;
    let vocab: Vocabulary = serde_json::from_slice(&vocab_bytes)
        .map_err(|e| DataError::Format(format!("vocab.json: {e}")))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "miaf"))
        .collect();
    paths.sort();
    let bundles = paths.iter().map(|p| read_bundle(p)).collect::<Result<Vec<_>, _>>()?;
    Ok((bundles, vocab))
}
