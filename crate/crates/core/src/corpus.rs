//! Synthetic multilingual corpora with controllable {source-speech,
//! target-text} pair sets.
//!
//! Every utterance starts from a shared semantic token sequence. Each source
//! language renders semantics into feature motifs (its "acoustics"); each
//! target language renders the same semantics into text through a fixed
//! bijection, playing the role of an exact machine-translation service. The
//! generator therefore knows the reference translation for every pair, and
//! which pairs appear in training is an explicit experiment lever.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::FeatureSequence;
use crate::tensor::Tensor;

const SOURCE_NAMES: &[&str] = &["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L"];
const TARGET_NAMES: &[&str] = &["M", "N", "O", "P", "Q", "R", "S", "T"];

/// Minimum L2 distance required between same-token motifs of different
/// source languages, so languages stay acoustically tellable-apart.
pub const MOTIF_DISTANCE_FLOOR: f64 = 0.5;

/// Scale of the per-language mean vector that every motif of a source
/// language is drawn around. Languages are separated regions of feature
/// space, not just distinct token banks; a branch fit to one language's
/// region does not automatically cover another's.
pub const LANGUAGE_MEAN_SCALE: f64 = 1.5;

/// Number of feature-space directions a language's motifs vary along. Each
/// language draws its own directions, so the coordinates that discriminate
/// meaning inside one language carry no signal inside another — the property
/// that makes single-source expansion branches fail off their home region.
pub const LANGUAGE_SUBSPACE_DIM: usize = 6;

/// Base size of a language's phone inventory. Motifs are sequences of phones
/// drawn from this pool, so a single frame is ambiguous between the many
/// tokens sharing that phone; identity lives in the transition structure,
/// which is what makes encoder lookahead worth anything.
pub const PHONES_PER_LANGUAGE: usize = 8;

/// The language inventory of one experiment: per-source motif banks and
/// per-target text bijections, all derived from one seed.
#[derive(Debug, Clone)]
pub struct LanguageSuite {
    pub seed: u64,
    pub v_sem: usize,
    pub feature_dim: usize,
    source_langs: Vec<String>,
    target_langs: Vec<String>,
    /// motifs[lang][semantic token] = 2-4 × D feature matrix
    motifs: HashMap<String, Vec<Tensor>>,
    /// bijections[lang][semantic token (0-based)] = text token (1-based)
    bijections: HashMap<String, Vec<usize>>,
    /// Semantic tokens each source language's corpus talks about. Like real
    /// per-language speech corpora, coverage is partial and staggered, so a
    /// branch trained on one source's translations has seen only that
    /// corpus's content.
    supports: HashMap<String, Vec<usize>>,
}

/// Deterministic per-item seed derivation: FNV-1a over the salt folded into
/// the global seed with a splitmix64 scramble.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in salt.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn make_suite(
    num_source: usize,
    num_target: usize,
    v_sem: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<LanguageSuite> {
    if num_source == 0 || num_target == 0 || v_sem == 0 || feature_dim == 0 {
        return Err(Error::Contract("suite dimensions must be positive".into()));
    }
    if num_source > SOURCE_NAMES.len() || num_target > TARGET_NAMES.len() {
        return Err(Error::Contract(format!(
            "at most {} sources and {} targets supported",
            SOURCE_NAMES.len(),
            TARGET_NAMES.len()
        )));
    }
    let source_langs: Vec<String> = SOURCE_NAMES[..num_source].iter().map(|s| s.to_string()).collect();
    let target_langs: Vec<String> = TARGET_NAMES[..num_target].iter().map(|s| s.to_string()).collect();

    for attempt in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("suite-{attempt}")));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let subspace_dim = LANGUAGE_SUBSPACE_DIM.min(feature_dim);
        let gain = (feature_dim as f64 / subspace_dim as f64).sqrt();
        let num_phones = PHONES_PER_LANGUAGE.max((v_sem as f64).sqrt().ceil() as usize + 2);
        let mut motifs = HashMap::new();
        let mut all_sequences_ok = true;
        'langs: for (lang_idx, lang) in source_langs.iter().enumerate() {
            let mean: Vec<f64> = (0..feature_dim)
                .map(|_| LANGUAGE_MEAN_SCALE * normal.sample(&mut rng))
                .collect();
            let basis = orthonormal_basis(&mut rng, feature_dim, subspace_dim);
            // The language's phone inventory: frame vectors confined to its
            // own subspace around its own mean.
            let phones: Vec<Vec<f64>> = (0..num_phones)
                .map(|_| {
                    let z: Vec<f64> =
                        (0..subspace_dim).map(|_| normal.sample(&mut rng)).collect();
                    (0..feature_dim)
                        .map(|d| {
                            let spread: f64 =
                                (0..subspace_dim).map(|k| basis[k][d] * z[k]).sum();
                            mean[d] + gain * spread
                        })
                        .collect()
                })
                .collect();
            // Languages have characteristic rhythms: every motif of a
            // language has that language's length, within the 2..=4 frame
            // range. Fixed rhythm keeps each language self-synchronizing.
            let len_menu: &[usize] = match lang_idx % 3 {
                0 => &[2],
                1 => &[3],
                _ => &[4],
            };
            // Prefix-free phone sequences keep utterances uniquely parseable
            // while sharing frames between tokens.
            let mut sequences: Vec<Vec<usize>> = Vec::with_capacity(v_sem);
            for _ in 0..v_sem {
                let mut placed = false;
                for _ in 0..1000 {
                    let len = len_menu[rng.gen_range(0..len_menu.len())];
                    let seq: Vec<usize> =
                        (0..len).map(|_| rng.gen_range(0..num_phones)).collect();
                    let clashes = sequences
                        .iter()
                        .any(|s| s.starts_with(&seq) || seq.starts_with(s));
                    if !clashes {
                        sequences.push(seq);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    all_sequences_ok = false;
                    break 'langs;
                }
            }
            let mut bank = Vec::with_capacity(v_sem);
            for seq in &sequences {
                let mut vals = Vec::with_capacity(seq.len() * feature_dim);
                for &p in seq {
                    vals.extend_from_slice(&phones[p]);
                }
                bank.push(Tensor::new(vec![seq.len(), feature_dim], vals)?);
            }
            motifs.insert(lang.clone(), bank);
        }
        if !all_sequences_ok {
            continue;
        }
        let mut bijections = HashMap::new();
        for lang in &target_langs {
            let mut perm: Vec<usize> = (1..=v_sem).collect();
            perm.shuffle(&mut rng);
            bijections.insert(lang.clone(), perm);
        }
        let mut supports = HashMap::new();
        for (i, lang) in source_langs.iter().enumerate() {
            supports.insert(lang.clone(), support_window(i, num_source, v_sem));
        }
        let suite = LanguageSuite {
            seed,
            v_sem,
            feature_dim,
            source_langs: source_langs.clone(),
            target_langs: target_langs.clone(),
            motifs,
            bijections,
            supports,
        };
        if num_source < 2 || suite.min_cross_lang_motif_distance() > MOTIF_DISTANCE_FLOOR {
            return Ok(suite);
        }
    }
    Err(Error::Generation(format!(
        "motif distinctness floor {MOTIF_DISTANCE_FLOOR} unreachable after 100 retries"
    )))
}

/// Semantic coverage of source corpus `i` of `n`: a wrapped window over the
/// token space. Windows are staggered so consecutive languages overlap while
/// distant ones share little or nothing, yet any two consecutive languages
/// cover everything (odd-indexed windows are wider).
fn support_window(i: usize, n: usize, v_sem: usize) -> Vec<usize> {
    if n == 1 {
        return (0..v_sem).collect();
    }
    let stride = v_sem / n;
    let width = (v_sem / 2 + if i % 2 == 1 { stride } else { 0 }).clamp(2, v_sem);
    (0..width).map(|k| (i * stride + k) % v_sem).collect()
}

/// Random orthonormal set of `k` direction vectors in `dim` dimensions
/// (Gram-Schmidt over Gaussian draws).
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

impl LanguageSuite {
    pub fn source_langs(&self) -> &[String] {
        &self.source_langs
    }

    pub fn target_langs(&self) -> &[String] {
        &self.target_langs
    }

    /// Semantic tokens this source language's corpus covers.
    pub fn source_support(&self, source_lang: &str) -> Result<&[usize]> {
        self.supports
            .get(source_lang)
            .map(|s| s.as_slice())
            .ok_or_else(|| Error::Contract(format!("unknown source language {source_lang}")))
    }

    pub fn motif(&self, source_lang: &str, semantic: usize) -> Result<&Tensor> {
        self.motifs
            .get(source_lang)
            .ok_or_else(|| Error::Contract(format!("unknown source language {source_lang}")))?
            .get(semantic)
            .ok_or_else(|| Error::Contract(format!("semantic token {semantic} out of range")))
    }

    /// Smallest L2 distance between same-token motifs of two different
    /// source languages; motifs of different length count as infinitely far.
    pub fn min_cross_lang_motif_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.source_langs.iter().enumerate() {
            for b in &self.source_langs[i + 1..] {
                for s in 0..self.v_sem {
                    let ma = &self.motifs[a][s];
                    let mb = &self.motifs[b][s];
                    if ma.shape != mb.shape {
                        continue;
                    }
                    let d2: f64 = ma
                        .values
                        .iter()
                        .zip(&mb.values)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    min = min.min(d2.sqrt());
                }
            }
        }
        min
    }

    /// Text rendering: apply the target language's bijection tokenwise.
    pub fn render_text(&self, semantics: &[usize], target_lang: &str) -> Result<Vec<usize>> {
        let bij = self
            .bijections
            .get(target_lang)
            .ok_or_else(|| Error::Contract(format!("unknown target language {target_lang}")))?;
        semantics
            .iter()
            .map(|&s| {
                bij.get(s)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("semantic token {s} out of range")))
            })
            .collect()
    }

    /// Inverse of [`LanguageSuite::render_text`].
    pub fn invert_text(&self, tokens: &[usize], target_lang: &str) -> Result<Vec<usize>> {
        let bij = self
            .bijections
            .get(target_lang)
            .ok_or_else(|| Error::Contract(format!("unknown target language {target_lang}")))?;
        tokens
            .iter()
            .map(|&t| {
                bij.iter()
                    .position(|&b| b == t)
                    .ok_or_else(|| Error::Contract(format!("text token {t} not in bijection")))
            })
            .collect()
    }

    /// Acoustic rendering: concatenated motifs plus i.i.d. Gaussian noise.
    pub fn render_utterance(
        &self,
        semantics: &[usize],
        source_lang: &str,
        noise_sigma: f64,
        noise_seed: u64,
    ) -> Result<FeatureSequence> {
        let langs = vec![source_lang; semantics.len()];
        self.render_utterance_mixed(semantics, &langs, noise_sigma, noise_seed)
            .map(|f| f.with_source_lang(source_lang))
    }

    /// Code-switched rendering: per-token source languages over one semantic
    /// sequence. The target text is still fully determined by the semantics.
    pub fn render_utterance_mixed(
        &self,
        semantics: &[usize],
        source_langs: &[&str],
        noise_sigma: f64,
        noise_seed: u64,
    ) -> Result<FeatureSequence> {
        if semantics.is_empty() {
            return Err(Error::Contract("cannot render an empty utterance".into()));
        }
        if semantics.len() != source_langs.len() {
            return Err(Error::Contract(
                "one source language per semantic token required".into(),
            ));
        }
        let mut frames: Vec<f64> = Vec::new();
        let mut t = 0;
        for (&s, lang) in semantics.iter().zip(source_langs) {
            let motif = self.motif(lang, s)?;
            frames.extend_from_slice(&motif.values);
            t += motif.shape[0];
        }
        if noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, noise_sigma).expect("noise distribution");
            for v in frames.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        FeatureSequence::new(Tensor::new(vec![t, self.feature_dim], frames)?)
    }
}

// ── corpus generation ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairSpec {
    pub source: String,
    pub target: String,
}

impl PairSpec {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        PairSpec {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub train_per_pair: usize,
    pub test_per_pair: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn defaults(seed: u64) -> Self {
        GenConfig {
            train_per_pair: 200,
            test_per_pair: 50,
            min_len: 3,
            max_len: 8,
            noise_sigma: 0.05,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub utt_id: String,
    pub source_lang: String,
    pub target_lang: String,
    pub feature_path: String,
    pub target_ids: Vec<usize>,
    pub semantic_ids: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub rows: Vec<ManifestRow>,
}

impl CorpusManifest {
    pub fn pair_histogram(&self) -> BTreeMap<(String, String), usize> {
        let mut hist = BTreeMap::new();
        for r in &self.rows {
            *hist
                .entry((r.source_lang.clone(), r.target_lang.clone()))
                .or_insert(0) += 1;
        }
        hist
    }

    pub fn has_pair(&self, source: &str, target: &str) -> bool {
        self.rows
            .iter()
            .any(|r| r.source_lang == source && r.target_lang == target)
    }

    pub fn filter<'a>(
        &'a self,
        pred: impl Fn(&ManifestRow) -> bool + 'a,
    ) -> impl Iterator<Item = &'a ManifestRow> {
        self.rows.iter().filter(move |r| pred(r))
    }

    pub fn split_rows(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

/// Generate features and a manifest for exactly the requested pair set.
/// Train and test semantic sequences are disjoint across the whole manifest,
/// so a test utterance's content is never seen in training under any pair.
pub fn generate_corpus(
    suite: &LanguageSuite,
    pairs: &[PairSpec],
    cfg: &GenConfig,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    if pairs.is_empty() {
        return Err(Error::Contract("pair set must be nonempty".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Contract(format!(
            "bad length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    for p in pairs {
        suite.motif(&p.source, 0)?;
        suite.render_text(&[0], &p.target)?;
    }
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(feat_dir.display().to_string(), e))?;

    // Utterance content is drawn from the source corpus's own coverage.
    let draw_semantics = |support: &[usize], utt_seed: u64, attempt: u64| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(utt_seed.wrapping_add(attempt));
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        (0..len).map(|_| support[rng.gen_range(0..support.len())]).collect()
    };

    let mut manifest = CorpusManifest::default();
    let mut train_sequences: HashSet<Vec<usize>> = HashSet::new();

    for split in [Split::Train, Split::Test] {
        for pair in pairs {
            let count = match split {
                Split::Train => cfg.train_per_pair,
                Split::Test => cfg.test_per_pair,
            };
            let support = suite.source_support(&pair.source)?;
            for i in 0..count {
                let utt_id = format!("{}-{}-{}-{i:04}", pair.source, pair.target, split.as_str());
                let utt_seed = derive_seed(cfg.seed, &utt_id);
                let mut semantics = draw_semantics(support, utt_seed, 0);
                if split == Split::Test {
                    let mut attempt = 1u64;
                    while train_sequences.contains(&semantics) {
                        semantics = draw_semantics(support, utt_seed, attempt);
                        attempt += 1;
                    }
                } else {
                    train_sequences.insert(semantics.clone());
                }
                let feats = suite.render_utterance(
                    &semantics,
                    &pair.source,
                    cfg.noise_sigma,
                    derive_seed(utt_seed, "noise"),
                )?;
                let rel_path = format!("features/{utt_id}.bin");
                write_features(&out_dir.join(&rel_path), feats.frames())?;
                manifest.rows.push(ManifestRow {
                    utt_id,
                    source_lang: pair.source.clone(),
                    target_lang: pair.target.clone(),
                    feature_path: rel_path,
                    target_ids: suite.render_text(&semantics, &pair.target)?,
                    semantic_ids: semantics,
                    split,
                });
            }
        }
    }
    Ok(manifest)
}

// ── file formats ─────────────────────────────────────────────────────

/// Feature file: u32 LE frame count, u32 LE feature dim, then T*D f64 LE.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(&(frames.shape[0] as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(frames.shape[1] as u32).to_le_bytes()).map_err(io_err)?;
    for v in &frames.values {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; t * d * 8];
    file.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![t, d], values)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_ids(field: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| t.parse::<usize>().map_err(|_| Error::Data(format!("bad id {t} in manifest"))))
        .collect()
}

/// Manifest: one row per utterance, tab-separated:
/// id, source_lang, target_lang, feature_path, target ids, semantic ids, split.
pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.utt_id,
            r.source_lang,
            r.target_lang,
            r.feature_path,
            join_ids(&r.target_ids),
            join_ids(&r.semantic_ids),
            r.split.as_str()
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut manifest = CorpusManifest::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!(
                "manifest line {}: want 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let split = match fields[6] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Data(format!("unknown split {other}"))),
        };
        manifest.rows.push(ManifestRow {
            utt_id: fields[0].to_string(),
            source_lang: fields[1].to_string(),
            target_lang: fields[2].to_string(),
            feature_path: fields[3].to_string(),
            target_ids: parse_ids(fields[4])?,
            semantic_ids: parse_ids(fields[5])?,
            split,
        });
    }
    Ok(manifest)
}

/// Load a manifest row's features relative to the manifest's directory.
pub fn load_row_features(manifest_dir: &Path, row: &ManifestRow) -> Result<FeatureSequence> {
    let path: PathBuf = manifest_dir.join(&row.feature_path);
    let frames = read_features(&path)?;
    Ok(FeatureSequence::new(frames)?.with_source_lang(&row.source_lang))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_suites() {
        let a = make_suite(4, 2, 20, 16, 7).unwrap();
        let b = make_suite(4, 2, 20, 16, 7).unwrap();
        assert_eq!(a.source_langs(), b.source_langs());
        for lang in a.source_langs() {
            for s in 0..20 {
                assert_eq!(a.motif(lang, s).unwrap().values, b.motif(lang, s).unwrap().values);
            }
        }
        for lang in a.target_langs() {
            assert_eq!(
                a.render_text(&[0, 5, 19], lang).unwrap(),
                b.render_text(&[0, 5, 19], lang).unwrap()
            );
        }
    }

    #[test]
    fn suite_shapes_match_request() {
        let s = make_suite(4, 2, 20, 16, 1).unwrap();
        assert_eq!(s.source_langs().len(), 4);
        assert_eq!(s.target_langs().len(), 2);
        for lang in s.source_langs() {
            for sem in 0..20 {
                let m = s.motif(lang, sem).unwrap();
                assert!(m.shape[0] >= 2 && m.shape[0] <= 4);
                assert_eq!(m.shape[1], 16);
            }
        }
    }

    #[test]
    fn motif_banks_clear_the_distance_floor() {
        let s = make_suite(4, 2, 20, 16, 3).unwrap();
        assert!(s.min_cross_lang_motif_distance() > MOTIF_DISTANCE_FLOOR);
    }

    #[test]
    fn noiseless_single_token_is_exactly_its_motif() {
        let s = make_suite(2, 1, 8, 8, 11).unwrap();
        let feats = s.render_utterance(&[3], "A", 0.0, 99).unwrap();
        assert_eq!(feats.frames().values, s.motif("A", 3).unwrap().values);
        assert_eq!(feats.source_lang(), Some("A"));
    }

    #[test]
    fn same_noise_seed_renders_identically() {
        let s = make_suite(2, 1, 8, 8, 13).unwrap();
        let a = s.render_utterance(&[1, 2, 3], "B", 0.1, 5).unwrap();
        let b = s.render_utterance(&[1, 2, 3], "B", 0.1, 5).unwrap();
        assert_eq!(a.frames().values, b.frames().values);
        let c = s.render_utterance(&[1, 2, 3], "B", 0.1, 6).unwrap();
        assert_ne!(a.frames().values, c.frames().values);
    }

    #[test]
    fn snr_at_sigma_point_one_is_in_band() {
        let s = make_suite(1, 1, 8, 16, 17).unwrap();
        let sigma = 0.1;
        let mut signal_power = 0.0;
        let mut noise_power = 0.0;
        let mut samples = 0usize;
        for i in 0..1000u64 {
            let sem = [(i % 8) as usize, ((i / 8) % 8) as usize];
            let clean = s.render_utterance(&sem, "A", 0.0, i).unwrap();
            let noisy = s.render_utterance(&sem, "A", sigma, i).unwrap();
            for (c, n) in clean.frames().values.iter().zip(&noisy.frames().values) {
                signal_power += c * c;
                noise_power += (n - c) * (n - c);
                samples += 1;
            }
        }
        // The additive noise must measure as sigma^2 per sample, and the SNR
        // must match signal power over that.
        let measured_sigma2 = noise_power / samples as f64;
        assert!(
            measured_sigma2 > 0.5 * sigma * sigma && measured_sigma2 < 2.0 * sigma * sigma,
            "noise variance {measured_sigma2} vs sigma^2 {}",
            sigma * sigma
        );
        let snr = signal_power / noise_power;
        let expect = (signal_power / samples as f64) / (sigma * sigma);
        assert!(
            snr > expect * 0.5 && snr < expect * 2.0,
            "snr {snr} outside band around {expect}"
        );
    }

    #[test]
    fn text_rendering_is_invertible_and_target_dependent() {
        let s = make_suite(2, 2, 12, 8, 19).unwrap();
        let sem = vec![0, 5, 11, 5];
        let m = s.render_text(&sem, "M").unwrap();
        let n = s.render_text(&sem, "N").unwrap();
        assert_eq!(s.invert_text(&m, "M").unwrap(), sem);
        assert_eq!(s.invert_text(&n, "N").unwrap(), sem);
        assert_ne!(m, n, "independent bijections should differ on this input");
        assert!(s.render_text(&[], "M").unwrap().is_empty());
    }

    #[test]
    fn code_switched_utterance_has_single_target_text() {
        let s = make_suite(2, 1, 8, 8, 23).unwrap();
        let sem = vec![1, 2, 3];
        let mixed = s
            .render_utterance_mixed(&sem, &["A", "B", "A"], 0.0, 0)
            .unwrap();
        let expected_t: usize = [("A", 1), ("B", 2), ("A", 3)]
            .iter()
            .map(|(l, t)| s.motif(l, *t).unwrap().shape[0])
            .sum();
        assert_eq!(mixed.frames().shape[0], expected_t);
        // Target text depends only on semantics.
        assert_eq!(s.render_text(&sem, "M").unwrap().len(), 3);
    }

    #[test]
    fn supports_tile_the_semantic_space() {
        let s = make_suite(4, 2, 20, 16, 3).unwrap();
        let support = |l: &str| s.source_support(l).unwrap().to_vec();
        let a = support("A");
        let b = support("B");
        let c = support("C");
        let d = support("D");
        // Consecutive corpora overlap; A and C talk about disjoint content.
        assert!(a.iter().any(|t| b.contains(t)));
        assert!(!a.iter().any(|t| c.contains(t)), "A {a:?} vs C {c:?}");
        // Any two consecutive corpora cover everything.
        for t in 0..20 {
            assert!(a.contains(&t) || b.contains(&t));
            assert!(c.contains(&t) || d.contains(&t));
        }
        // Single-source suites cover the full space.
        let solo = make_suite(1, 1, 9, 4, 5).unwrap();
        assert_eq!(solo.source_support("A").unwrap().len(), 9);
    }

    #[test]
    fn generated_utterances_stay_on_their_corpus_support() {
        let dir = tempfile::tempdir().unwrap();
        let suite = make_suite(4, 1, 20, 6, 51).unwrap();
        let pairs = vec![PairSpec::new("A", "M"), PairSpec::new("C", "M")];
        let cfg = GenConfig {
            train_per_pair: 12,
            test_per_pair: 4,
            min_len: 3,
            max_len: 6,
            noise_sigma: 0.05,
            seed: 52,
        };
        let manifest = generate_corpus(&suite, &pairs, &cfg, dir.path()).unwrap();
        for row in &manifest.rows {
            let support = suite.source_support(&row.source_lang).unwrap();
            for sem in &row.semantic_ids {
                assert!(support.contains(sem), "{}: {sem} off support", row.utt_id);
            }
        }
    }

    #[test]
    fn corpus_histogram_and_zero_shot_absence() {
        let dir = tempfile::tempdir().unwrap();
        let suite = make_suite(3, 2, 8, 6, 31).unwrap();
        let pairs = vec![
            PairSpec::new("A", "M"),
            PairSpec::new("B", "M"),
            PairSpec::new("C", "M"),
            PairSpec::new("A", "N"),
        ];
        let cfg = GenConfig {
            train_per_pair: 10,
            test_per_pair: 3,
            min_len: 3,
            max_len: 5,
            noise_sigma: 0.05,
            seed: 77,
        };
        let manifest = generate_corpus(&suite, &pairs, &cfg, dir.path()).unwrap();
        let hist = manifest.pair_histogram();
        assert_eq!(hist.len(), 4);
        for pair in &pairs {
            assert_eq!(hist[&(pair.source.clone(), pair.target.clone())], 13);
        }
        assert!(!manifest.has_pair("C", "N"), "zero-shot pair must be absent");
        assert!(!manifest.has_pair("B", "N"));

        // Train/test semantic disjointness across the whole manifest.
        let train: HashSet<Vec<usize>> = manifest
            .split_rows(Split::Train)
            .iter()
            .map(|r| r.semantic_ids.clone())
            .collect();
        for row in manifest.split_rows(Split::Test) {
            assert!(!train.contains(&row.semantic_ids));
        }

        // Stored target ids are the oracle translation of the semantics.
        for row in &manifest.rows {
            assert_eq!(
                row.target_ids,
                suite.render_text(&row.semantic_ids, &row.target_lang).unwrap()
            );
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let suite = make_suite(2, 1, 8, 6, 41).unwrap();
        let pairs = vec![PairSpec::new("A", "M")];
        let cfg = GenConfig {
            train_per_pair: 5,
            test_per_pair: 2,
            min_len: 3,
            max_len: 4,
            noise_sigma: 0.05,
            seed: 9,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let man_a = generate_corpus(&suite, &pairs, &cfg, dir_a.path()).unwrap();
        let man_b = generate_corpus(&suite, &pairs, &cfg, dir_b.path()).unwrap();
        write_manifest(&dir_a.path().join("manifest.tsv"), &man_a).unwrap();
        write_manifest(&dir_b.path().join("manifest.tsv"), &man_b).unwrap();
        let bytes_a = std::fs::read(dir_a.path().join("manifest.tsv")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("manifest.tsv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        for row in &man_a.rows {
            let fa = std::fs::read(dir_a.path().join(&row.feature_path)).unwrap();
            let fb = std::fs::read(dir_b.path().join(&row.feature_path)).unwrap();
            assert_eq!(fa, fb, "{}", row.utt_id);
        }
    }

    #[test]
    fn manifest_and_features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let suite = make_suite(2, 1, 8, 6, 43).unwrap();
        let pairs = vec![PairSpec::new("A", "M"), PairSpec::new("B", "M")];
        let cfg = GenConfig {
            train_per_pair: 4,
            test_per_pair: 2,
            min_len: 3,
            max_len: 4,
            noise_sigma: 0.02,
            seed: 13,
        };
        let manifest = generate_corpus(&suite, &pairs, &cfg, dir.path()).unwrap();
        let path = dir.path().join("manifest.tsv");
        write_manifest(&path, &manifest).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.rows.len(), manifest.rows.len());
        for (a, b) in manifest.rows.iter().zip(&back.rows) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.target_ids, b.target_ids);
            assert_eq!(a.semantic_ids, b.semantic_ids);
            assert_eq!(a.split, b.split);
            let feats = load_row_features(dir.path(), b).unwrap();
            assert_eq!(feats.d(), 6);
            assert_eq!(feats.source_lang(), Some(b.source_lang.as_str()));
        }
    }
}
