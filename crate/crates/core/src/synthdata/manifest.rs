use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::describe::{describe, Descriptions, OppositionAnnotation};
use super::lexicon::{tokenize, NegationLexicon};
use super::raster::{decode_png, encode_png, rasterize};
use super::scene::{generate_scene, SceneConfig};
use super::{json_error, DataError};
use crate::diffcore::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    pub category: String,
    pub bbox: [f64; 4],
    pub descriptions: Descriptions,
}

impl ManifestEntry {
    pub fn from_annotation(annotation: OppositionAnnotation, png: &[u8]) -> Self {
        Self {
            image_id: annotation.image_id,
            image_file: None,
            image_b64: Some(B64.encode(png)),
            category: annotation.category,
            bbox: annotation.bbox,
            descriptions: annotation.descriptions,
        }
    }

    pub fn annotation(&self) -> OppositionAnnotation {
        OppositionAnnotation {
            image_id: self.image_id.clone(),
            category: self.category.clone(),
            bbox: self.bbox,
            descriptions: self.descriptions.clone(),
        }
    }

    /// Decodes the entry's raster; relative image files resolve against `base_dir`.
    pub fn load_image(&self, base_dir: Option<&Path>) -> Result<NdArray, DataError> {
        let bytes = match (&self.image_b64, &self.image_file) {
            (Some(b), _) => B64
                .decode(b)
                .map_err(|e| DataError::Manifest(format!("{}: bad base64: {e}", self.image_id)))?,
            (None, Some(f)) => {
                let p = Path::new(f);
                let p = match base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.to_path_buf(),
                };
                std::fs::read(&p).map_err(|e| DataError::Io(format!("{}: {e}", p.display())))?
            }
            (None, None) => return Err(DataError::Manifest(format!("{}: no image", self.image_id))),
        };
        decode_png(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_tag: Option<SplitTag>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            split_tag: None,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, lexicon: &NegationLexicon) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate image id {}", e.image_id)));
            }
            if e.image_b64.is_none() && e.image_file.is_none() {
                return Err(DataError::Manifest(format!("{}: no image", e.image_id)));
            }
            e.annotation().validate(lexicon)?;
        }
        Ok(())
    }

    /// The interchange form: a JSON array of entries.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    pub fn from_json(text: &str, lexicon: &NegationLexicon) -> Result<Self, DataError> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
        let m = Self::new(entries);
        m.validate(lexicon)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path, lexicon: &NegationLexicon) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, lexicon)
    }

    pub fn load_images(&self, base_dir: Option<&Path>) -> Result<Vec<NdArray>, DataError> {
        self.entries.iter().map(|e| e.load_image(base_dir)).collect()
    }
}

/// `count` scenes with embedded PNG rasters; a pure function of its inputs.
pub fn generate_manifest(seed: u64, count: usize, config: &SceneConfig) -> Result<DatasetManifest, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    while entries.len() < count {
        let scene_seed: u64 = rng.gen();
        if !seen.insert(scene_seed) {
            continue;
        }
        let scene = generate_scene(scene_seed, config)?;
        let png = encode_png(&rasterize(&scene))?;
        entries.push(ManifestEntry::from_annotation(describe(&scene)?, &png));
    }
    Ok(DatasetManifest {
        entries,
        split_tag: None,
        seed,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub phrases: usize,
    pub tokens: usize,
    pub negation_words: usize,
    pub negation_per_1000_tokens: f64,
    pub negated_phrase_share: f64,
    pub per_category: BTreeMap<String, usize>,
    pub per_attribute: BTreeMap<String, usize>,
    pub per_negation_word: BTreeMap<String, usize>,
}

pub fn dataset_stats(manifest: &DatasetManifest, lexicon: &NegationLexicon) -> DatasetStats {
    let mut s = DatasetStats::default();
    let mut negated_phrases = 0usize;
    for e in &manifest.entries {
        s.images += 1;
        *s.per_category.entry(e.category.clone()).or_default() += 1;
        for (key, phrase) in &e.descriptions {
            s.phrases += 1;
            *s.per_attribute.entry(key.attribute.as_str().to_string()).or_default() += 1;
            let toks = tokenize(phrase);
            s.tokens += toks.len();
            let mut negs = 0;
            for t in toks.iter().filter(|t| lexicon.is_negation(t)) {
                negs += 1;
                *s.per_negation_word.entry(t.clone()).or_default() += 1;
            }
            s.negation_words += negs;
            negated_phrases += (negs > 0) as usize;
        }
    }
    if s.tokens > 0 {
        s.negation_per_1000_tokens = 1000.0 * s.negation_words as f64 / s.tokens as f64;
    }
    if s.phrases > 0 {
        s.negated_phrase_share = negated_phrases as f64 / s.phrases as f64;
    }
    s
}

/// Category-stratified train/test split.
pub fn split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_cat: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_cat.entry(e.category.as_str()).or_default().push(i);
    }
    let eligible: Vec<(&str, usize)> = by_cat
        .iter()
        .filter(|(cat, idx)| {
            if idx.len() < 2 {
                log::warn!("category {cat} has {} image(s); assigned wholly to train", idx.len());
            }
            idx.len() >= 2
        })
        .map(|(c, idx)| (*c, idx.len()))
        .collect();
    // Largest-remainder apportionment of the overall test count.
    let pool: usize = eligible.iter().map(|(_, n)| n).sum();
    let total = (test_fraction * pool as f64).round() as usize;
    let mut quota: BTreeMap<&str, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for &(c, n) in &eligible {
        let exact = test_fraction * n as f64;
        quota.insert(c, (exact.floor() as usize).min(n - 1));
        remainders.push((exact - exact.floor(), c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let mut assigned: usize = quota.values().sum();
    for (_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= total {
            break;
        }
        let n = by_cat[c].len();
        let q = quota.get_mut(c).unwrap();
        if *q + 1 < n {
            *q += 1;
            assigned += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; manifest.entries.len()];
    for (c, idx) in &by_cat {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(quota.get(c).copied().unwrap_or(0)) {
            is_test[i] = true;
        }
    }
    let pick = |want: bool, tag: SplitTag| DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(e, _)| e.clone())
            .collect(),
        split_tag: Some(tag),
        seed,
    };
    Ok((pick(false, SplitTag::Train), pick(true, SplitTag::Test)))
}
