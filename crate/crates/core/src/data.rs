//! Deterministic synthetic cross-modal data.
//!
//! Each image is a grid of patch feature rows. A few objects occupy distinct
//! patches; an object's row holds a one-hot shape block, a one-hot colour
//! block and a presence marker, plus bounded uniform noise everywhere.
//! Captions describe every object (colour, shape, position) in position
//! order using a small template grammar, and each sample also carries a
//! question/answer pair about one of its objects.
//!
//! The downstream splits shift the distribution: attribute priors are
//! reweighted and sentence templates change. Colour words can additionally
//! be replaced by synonyms that never occur in the pretraining split (off
//! in the presets: a frozen backbone has no trained embedding for them).

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uniadapter_tensor::Tensor;

use crate::error::{Error, Result};

pub const SPECIAL: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "star", "ring", "cross", "heart", "moon",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
];
pub const COLOR_SYNONYMS: [&str; 8] = [
    "crimson", "azure", "emerald", "golden", "violet", "amber", "ivory", "ebony",
];
pub const POSITIONS: [&str; 9] = [
    "left", "right", "top", "bottom", "center", "corner", "edge", "middle", "side",
];
pub const FILLERS: [&str; 15] = [
    "a", "there", "is", "at", "and", "in", "on", "with", "picture", "of", "plus", "what",
    "color", "shape", "?",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Image,
    Video,
    Vqa,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Image => "image",
            DataKind::Video => "video",
            DataKind::Vqa => "vqa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Downstream,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pretrain, Split::Downstream, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Downstream => "downstream",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "downstream" => Ok(Split::Downstream),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!(
                "unknown split `{s}` (expected pretrain, downstream or test)"
            ))),
        }
    }
}

/// Attribute priors of one distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub shape: Vec<f64>,
    pub color: Vec<f64>,
}

impl Priors {
    pub fn uniform(n_shapes: usize, n_colors: usize) -> Self {
        Self {
            shape: vec![1.0 / n_shapes as f64; n_shapes],
            color: vec![1.0 / n_colors as f64; n_colors],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub downstream: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub kind: DataKind,
    /// Patch rows per image; every patch is a possible object position.
    pub patches: usize,
    pub patch_dim: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub objects: usize,
    /// Half-width of the uniform noise added to every payload entry.
    pub noise: f64,
    /// Frames stored per video sample (1 for image and QA data).
    pub frames: usize,
    /// Probability that a video frame is a distractor; one salient frame is
    /// always kept.
    pub noise_frame_prob: f64,
    pub pretrain_prior: Priors,
    pub downstream_prior: Priors,
    /// Probability that a downstream colour word is replaced by its synonym.
    pub synonym_prob: f64,
    pub sizes: SplitSizes,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::preset(DataKind::Image)
    }
}

impl WorldSpec {
    pub fn preset(kind: DataKind) -> Self {
        let (n_shapes, n_colors) = (6, 6);
        Self {
            seed: 7,
            kind,
            patches: 4,
            patch_dim: 16,
            n_shapes,
            n_colors,
            objects: 2,
            noise: 0.1,
            frames: if kind == DataKind::Video { 16 } else { 1 },
            noise_frame_prob: if kind == DataKind::Video { 0.5 } else { 0.0 },
            pretrain_prior: Priors::uniform(n_shapes, n_colors),
            downstream_prior: Priors {
                shape: vec![0.1, 0.1, 0.1, 0.1, 0.3, 0.3],
                color: vec![0.3, 0.3, 0.1, 0.1, 0.1, 0.1],
            },
            synonym_prob: 0.0,
            sizes: SplitSizes {
                pretrain: 4000,
                downstream: 1000,
                test: 200,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.n_shapes == 0 || self.n_shapes > SHAPES.len() {
            return bad(format!("n_shapes must be in 1..={}", SHAPES.len()));
        }
        if self.n_colors == 0 || self.n_colors > COLORS.len() {
            return bad(format!("n_colors must be in 1..={}", COLORS.len()));
        }
        if self.patches == 0 || self.patches > POSITIONS.len() {
            return bad(format!("patches must be in 1..={}", POSITIONS.len()));
        }
        if self.objects == 0 || self.objects > self.patches {
            return bad("objects must be in 1..=patches".into());
        }
        if self.patch_dim < self.n_shapes + self.n_colors + 1 {
            return bad(format!(
                "patch_dim {} cannot hold {} shape + {} colour slots and a marker",
                self.patch_dim, self.n_shapes, self.n_colors
            ));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        for (name, p, n) in [
            ("pretrain shape", &self.pretrain_prior.shape, self.n_shapes),
            ("pretrain colour", &self.pretrain_prior.color, self.n_colors),
            ("downstream shape", &self.downstream_prior.shape, self.n_shapes),
            ("downstream colour", &self.downstream_prior.color, self.n_colors),
        ] {
            if p.len() != n || p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("{name} prior must have {n} non-negative entries summing to 1"));
            }
        }
        for (name, p) in [("noise_frame_prob", self.noise_frame_prob), ("synonym_prob", self.synonym_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new()
    }

    /// Split an index belongs to.
    pub fn split_of(&self, index: u64) -> Option<Split> {
        let s = &self.sizes;
        let (a, b, c) = (s.pretrain as u64, s.downstream as u64, s.test as u64);
        match index {
            i if i < a => Some(Split::Pretrain),
            i if i < a + b => Some(Split::Downstream),
            i if i < a + b + c => Some(Split::Test),
            _ => None,
        }
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<u64> {
        let s = &self.sizes;
        let (a, b, c) = (s.pretrain as u64, s.downstream as u64, s.test as u64);
        match split {
            Split::Pretrain => 0..a,
            Split::Downstream => a..a + b,
            Split::Test => a + b..a + b + c,
        }
    }
}

/// Fixed word list shared by every world.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: BTreeMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SPECIAL
            .iter()
            .chain(&SHAPES)
            .chain(&COLORS)
            .chain(&COLOR_SYNONYMS)
            .chain(&POSITIONS)
            .chain(&FILLERS)
            .copied()
            .collect();
        let index = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index[word]
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pair_id: u64,
    /// One `[patches, patch_dim]` matrix per frame.
    pub frames: Vec<Tensor<f32>>,
    /// Frames that depict the caption.
    pub salient: Vec<usize>,
    pub caption: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_objects(spec: &WorldSpec, prior: &Priors, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let shapes = WeightedIndex::new(&prior.shape).expect("validated prior");
    let colors = WeightedIndex::new(&prior.color).expect("validated prior");
    let mut positions: Vec<usize> = (0..spec.patches).collect();
    positions.shuffle(rng);
    let mut objs: Vec<Object> = positions[..spec.objects]
        .iter()
        .map(|&position| Object {
            shape: shapes.sample(rng),
            color: colors.sample(rng),
            position,
        })
        .collect();
    objs.sort_by_key(|o| o.position);
    objs
}

fn render(spec: &WorldSpec, objects: &[Object], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (p, d) = (spec.patches, spec.patch_dim);
    let mut data = vec![0.0f32; p * d];
    for o in objects {
        let row = &mut data[o.position * d..(o.position + 1) * d];
        row[o.shape] = 1.0;
        row[spec.n_shapes + o.color] = 1.0;
        row[spec.n_shapes + spec.n_colors] = 1.0;
    }
    if spec.noise > 0.0 {
        for v in &mut data {
            *v += rng.random_range(-spec.noise..=spec.noise) as f32;
        }
    }
    Tensor::from_vec(vec![p, d], data).expect("shape matches")
}

/// Caption in the pretraining grammar (`shifted == false`) or the
/// downstream grammar, with colour synonyms drawn per word.
fn caption(
    spec: &WorldSpec,
    objects: &[Object],
    shifted: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let v = Vocab::new();
    let variant = rng.random_range(0..2);
    let mut words: Vec<&str> = Vec::new();
    if !shifted {
        if variant == 1 {
            words.extend(["there", "is"]);
        }
    } else if variant == 1 {
        words.extend(["picture", "of"]);
    }
    for (i, o) in objects.iter().enumerate() {
        let color = if shifted && rng.random_bool(spec.synonym_prob) {
            COLOR_SYNONYMS[o.color]
        } else {
            COLORS[o.color]
        };
        if i > 0 {
            words.push(match (shifted, variant) {
                (false, _) => "and",
                (true, 0) => "with",
                (true, _) => "plus",
            });
        }
        if shifted {
            words.extend([SHAPES[o.shape], "in", color, "on", POSITIONS[o.position]]);
        } else {
            words.extend(["a", color, SHAPES[o.shape], "at", POSITIONS[o.position]]);
        }
    }
    words.iter().map(|w| v.id(w)).collect()
}

/// Question about one object: its colour (asked by shape and position) or
/// its shape (asked by position). Answers are single canonical words.
fn question(objects: &[Object], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let v = Vocab::new();
    let o = objects[rng.random_range(0..objects.len())];
    if rng.random_bool(0.5) {
        let q = ["what", "color", "is", "a", SHAPES[o.shape], "at", POSITIONS[o.position], "?"];
        (q.iter().map(|w| v.id(w)).collect(), vec![v.id(COLORS[o.color])])
    } else {
        let q = ["what", "shape", "is", "at", POSITIONS[o.position], "?"];
        (q.iter().map(|w| v.id(w)).collect(), vec![v.id(SHAPES[o.shape])])
    }
}

fn prior_for(spec: &WorldSpec, index: u64) -> (&Priors, bool) {
    match spec.split_of(index) {
        Some(Split::Pretrain) => (&spec.pretrain_prior, false),
        _ => (&spec.downstream_prior, true),
    }
}

/// Image–text pair `index`. A pure function of `(spec.seed, index)`.
pub fn gen_image_pair(spec: &WorldSpec, index: u64) -> Sample {
    gen_video_pair(spec, index, 1)
}

/// Video–text pair with `n_frames` frames. Salient frames depict the
/// caption; each other frame is, with probability `noise_frame_prob`, a
/// distractor with unrelated objects. At least one frame is salient.
pub fn gen_video_pair(spec: &WorldSpec, index: u64, n_frames: usize) -> Sample {
    let mut rng = sample_rng(spec.seed, index);
    let (prior, shifted) = prior_for(spec, index);
    let objects = draw_objects(spec, prior, &mut rng);
    let caption = caption(spec, &objects, shifted, &mut rng);
    let (question, answer) = question(&objects, &mut rng);
    let n = n_frames.max(1);
    let mut salient_mask: Vec<bool> = (0..n)
        .map(|_| n == 1 || !rng.random_bool(spec.noise_frame_prob))
        .collect();
    if !salient_mask.iter().any(|&s| s) {
        let k = rng.random_range(0..n);
        salient_mask[k] = true;
    }
    let frames = salient_mask
        .iter()
        .map(|&s| {
            if s {
                render(spec, &objects, &mut rng)
            } else {
                let other = draw_objects(spec, prior, &mut rng);
                render(spec, &other, &mut rng)
            }
        })
        .collect();
    Sample {
        pair_id: index,
        frames,
        salient: (0..n).filter(|&i| salient_mask[i]).collect(),
        caption,
        question,
        answer,
    }
}

/// Visual question–answer triple `index` (single-image payload).
pub fn gen_vqa_triple(spec: &WorldSpec, index: u64) -> Sample {
    gen_image_pair(spec, index)
}

/// Sample `index` in the form the spec's data kind calls for.
pub fn gen_sample(spec: &WorldSpec, index: u64) -> Sample {
    match spec.kind {
        DataKind::Image => gen_image_pair(spec, index),
        DataKind::Video => gen_video_pair(spec, index, spec.frames),
        DataKind::Vqa => gen_vqa_triple(spec, index),
    }
}

// ---- dataset files --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub start: u64,
    pub count: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub kind: DataKind,
    pub frames: usize,
    pub splits: BTreeMap<Split, SplitInfo>,
    pub spec: WorldSpec,
}

pub fn encode_record(s: &Sample) -> Vec<u8> {
    let mut body = Vec::new();
    let put = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
    body.extend_from_slice(&s.pair_id.to_le_bytes());
    let (p, d) = s
        .frames
        .first()
        .map(|f| (f.rows(), f.cols()))
        .unwrap_or((0, 0));
    put(&mut body, s.frames.len() as u32);
    put(&mut body, p as u32);
    put(&mut body, d as u32);
    for f in &s.frames {
        for &v in f.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    for seq in [&s.caption, &s.question, &s.answer, &s.salient] {
        put(&mut body, seq.len() as u32);
    }
    for seq in [&s.caption, &s.question, &s.answer, &s.salient] {
        for &t in seq.iter() {
            put(&mut body, t as u32);
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    put(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.body.get(self.pos..end))
            .ok_or_else(|| Error::Dataset("truncated record".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32s(&mut self, k: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(4usize.saturating_mul(k))?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_record(body: &[u8]) -> Result<Sample> {
    let mut c = Cursor { body, pos: 0 };
    let pair_id = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let dims = c.u32s(3)?;
    let (n, p, d) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut frames = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let raw = c.take(4usize.saturating_mul(p).saturating_mul(d))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Tensor::from_vec(vec![p, d], data)?);
    }
    let lens = c.u32s(4)?;
    let mut seqs = Vec::with_capacity(4);
    for &l in &lens {
        seqs.push(c.u32s(l as usize)?.into_iter().map(|t| t as usize).collect::<Vec<_>>());
    }
    if c.pos != body.len() {
        return Err(Error::Dataset(format!("record {pair_id} has trailing bytes")));
    }
    let salient = seqs.pop().unwrap();
    let answer = seqs.pop().unwrap();
    let question = seqs.pop().unwrap();
    let caption = seqs.pop().unwrap();
    Ok(Sample {
        pair_id,
        frames,
        salient,
        caption,
        question,
        answer,
    })
}

pub fn write_records(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        w.write_all(&encode_record(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Dataset(format!("{}: truncated length prefix", path.display())))?;
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let body = bytes
            .get(pos + 4..pos + 4 + len)
            .ok_or_else(|| Error::Dataset(format!("{}: truncated record", path.display())))?;
        out.push(decode_record(body)?);
        pos += 4 + len;
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.json";

/// Generates every split of `spec` into `dir` and writes the manifest.
pub fn write_dataset(spec: &WorldSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let range = spec.split_range(split);
        let samples: Vec<Sample> = range.clone().map(|i| gen_sample(spec, i)).collect();
        let file = format!("{}.bin", split.as_str());
        write_records(&dir.join(&file), &samples)?;
        splits.insert(
            split,
            SplitInfo {
                start: range.start,
                count: samples.len(),
                file,
            },
        );
    }
    let manifest = Manifest {
        spec_hash: spec.hash(),
        kind: spec.kind,
        frames: spec.frames,
        splits,
        spec: spec.clone(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory: manifest plus lazily read split files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Opens `dir`, refusing manifests whose recorded hash does not match
    /// their spec, or (when given) the caller's expected spec.
    pub fn open(dir: &Path, expected: Option<&WorldSpec>) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let actual = manifest.spec.hash();
        if actual != manifest.spec_hash {
            return Err(Error::Dataset(format!(
                "{}: spec hash mismatch (manifest says {}, spec hashes to {actual})",
                path.display(),
                manifest.spec_hash
            )));
        }
        if let Some(spec) = expected {
            if spec.hash() != manifest.spec_hash {
                return Err(Error::Dataset(format!(
                    "{}: spec hash mismatch (dataset {}, expected {})",
                    path.display(),
                    manifest.spec_hash,
                    spec.hash()
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let info = self
            .manifest
            .splits
            .get(&split)
            .ok_or_else(|| Error::Dataset(format!("split {} missing", split.as_str())))?;
        let samples = read_records(&self.dir.join(&info.file))?;
        if samples.len() != info.count {
            return Err(Error::Dataset(format!(
                "split {} has {} records, manifest says {}",
                split.as_str(),
                samples.len(),
                info.count
            )));
        }
        Ok(samples)
    }
}
