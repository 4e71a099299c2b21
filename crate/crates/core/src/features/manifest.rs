use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{read_bundle, FeatureBundle};
use crate::binio::{checked_numel, put_f32s, put_u32, ByteReader};
use crate::error::{Result, TspmError};

pub const AVQQ_MAGIC: &[u8; 4] = b"AVQQ";
const AVQQ_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Audio,
    Visual,
    #[default]
    AudioVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    #[default]
    Existential,
    Counting,
    Location,
    Comparative,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct QuestionType {
    pub modality: Modality,
    pub kind: QuestionKind,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::AudioVisual => "audio-visual",
        })
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionKind::Existential => "existential",
            QuestionKind::Counting => "counting",
            QuestionKind::Location => "location",
            QuestionKind::Comparative => "comparative",
            QuestionKind::Temporal => "temporal",
        })
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.modality, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = TspmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(TspmError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Ground truth planted by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub segment_indices: BTreeSet<usize>,
    pub token_indices: BTreeMap<usize, BTreeSet<usize>>,
}

/// A manifest row as stored in JSON (embeddings live in the AVQQ file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub video_id: String,
    pub question_text: String,
    pub template_id: String,
    pub answer: usize,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Planted>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    #[serde(rename = "C")]
    pub num_answers: usize,
    pub answer_vocab: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// A question about one video with its precomputed text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct QASample {
    pub sample_id: String,
    pub video_id: String,
    pub question_text: String,
    pub template_id: String,
    pub question_feature: Vec<f32>,
    pub prompt_feature: Vec<f32>,
    pub answer: usize,
    pub question_type: QuestionType,
    pub planted: Option<Planted>,
}

impl QASample {
    pub fn entry(&self) -> ManifestEntry {
        ManifestEntry {
            sample_id: self.sample_id.clone(),
            video_id: self.video_id.clone(),
            question_text: self.question_text.clone(),
            template_id: self.template_id.clone(),
            answer: self.answer,
            question_type: self.question_type,
            planted: self.planted.clone(),
        }
    }
}

/// One split loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<QASample>,
    pub bundles: HashMap<String, FeatureBundle>,
}

impl Dataset {
    pub fn bundle(&self, sample: &QASample) -> Result<&FeatureBundle> {
        self.bundles
            .get(&sample.video_id)
            .ok_or_else(|| TspmError::Contract(format!("bundle {} not loaded", sample.video_id)))
    }

    pub fn num_answers(&self) -> usize {
        self.manifest.num_answers
    }

    /// Check every cross-reference and range invariant of the split.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.answer_vocab.len() != m.num_answers {
            return Err(TspmError::Contract(format!(
                "answer vocabulary has {} entries but C = {}",
                m.answer_vocab.len(),
                m.num_answers
            )));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(&s.sample_id) {
                return Err(TspmError::Contract(format!("duplicate sample {}", s.sample_id)));
            }
            if s.answer >= m.num_answers {
                return Err(TspmError::Index {
                    what: "answer",
                    index: s.answer,
                    len: m.num_answers,
                });
            }
            let b = self.bundle(s)?;
            if s.question_feature.len() != b.visual_dim() || s.prompt_feature.len() != b.visual_dim() {
                return Err(TspmError::Contract(format!(
                    "sample {}: text features do not match D_v = {}",
                    s.sample_id,
                    b.visual_dim()
                )));
            }
            if let Some(p) = &s.planted {
                let (t, mm) = (b.segments(), b.tokens_per_frame());
                let seg_ok = p.segment_indices.iter().all(|&i| i < t);
                let tok_ok = p
                    .token_indices
                    .iter()
                    .all(|(&seg, toks)| seg < t && toks.iter().all(|&j| j < mm));
                if !(seg_ok && tok_ok) {
                    return Err(TspmError::Contract(format!(
                        "sample {}: planted indices out of range",
                        s.sample_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Splits must not share sample ids.
pub fn validate_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for m in manifests {
        for e in &m.entries {
            if let Some(prev) = seen.insert(&e.sample_id, m.split) {
                return Err(TspmError::Contract(format!(
                    "sample {} appears in both {} and {}",
                    e.sample_id,
                    prev.name(),
                    m.split.name()
                )));
            }
        }
    }
    Ok(())
}

/// AVQQ: magic, version, N, D_v, then per sample F_Q followed by F_TPrompt.
pub fn encode_question_features(samples: &[QASample], dim: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + samples.len() * dim * 8);
    out.extend_from_slice(AVQQ_MAGIC);
    put_u32(&mut out, AVQQ_VERSION);
    put_u32(&mut out, samples.len() as u32);
    put_u32(&mut out, dim as u32);
    for s in samples {
        if s.question_feature.len() != dim || s.prompt_feature.len() != dim {
            return Err(TspmError::Contract(format!(
                "sample {} text features are not {dim}-D",
                s.sample_id
            )));
        }
        put_f32s(&mut out, &s.question_feature);
        put_f32s(&mut out, &s.prompt_feature);
    }
    Ok(out)
}

/// Decode to `(F_Q, F_TPrompt)` pairs in manifest order.
pub fn decode_question_features(bytes: &[u8]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let mut r = ByteReader::new(bytes);
    r.magic(AVQQ_MAGIC)?;
    let version = r.u32("version")?;
    if version != AVQQ_VERSION {
        return Err(TspmError::Format {
            offset: 4,
            reason: format!("unsupported AVQQ version {version}"),
        });
    }
    let n = r.u32("N")? as usize;
    let dim = r.u32("D_v")? as usize;
    if dim == 0 {
        return Err(r.error("D_v must be positive"));
    }
    let payload = checked_numel(&[n, 2, dim, 4]).ok_or_else(|| r.error("header overflows"))?;
    if payload != r.remaining() {
        return Err(r.error(format!(
            "header declares {payload} payload bytes but {} remain",
            r.remaining()
        )));
    }
    (0..n)
        .map(|_| Ok((r.f32s(dim, "F_Q")?, r.f32s(dim, "F_TPrompt")?)))
        .collect()
}

pub fn write_question_features(path: impl AsRef<Path>, samples: &[QASample], dim: usize) -> Result<()> {
    std::fs::write(path, encode_question_features(samples, dim)?)?;
    Ok(())
}

pub fn read_question_features(path: impl AsRef<Path>) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    decode_question_features(&std::fs::read(path)?)
}

/// Load `<dir>/<split>.json`, `<dir>/<split>.avqq` and every referenced
/// `<dir>/bundles/<video_id>.avqf`.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{}.json", split.name())))?)?;
    if manifest.split != split {
        return Err(TspmError::Contract(format!(
            "{}.json declares split {}",
            split.name(),
            manifest.split.name()
        )));
    }
    let feats = read_question_features(dir.join(format!("{}.avqq", split.name())))?;
    if feats.len() != manifest.entries.len() {
        return Err(TspmError::Contract(format!(
            "{} manifest entries but {} embedding pairs",
            manifest.entries.len(),
            feats.len()
        )));
    }
    let mut bundles = HashMap::new();
    let mut samples = Vec::with_capacity(feats.len());
    for (e, (q, p)) in manifest.entries.iter().zip(feats) {
        if !bundles.contains_key(&e.video_id) {
            let b = read_bundle(dir.join("bundles").join(format!("{}.avqf", e.video_id)))?;
            bundles.insert(e.video_id.clone(), b);
        }
        samples.push(QASample {
            sample_id: e.sample_id.clone(),
            video_id: e.video_id.clone(),
            question_text: e.question_text.clone(),
            template_id: e.template_id.clone(),
            question_feature: q,
            prompt_feature: p,
            answer: e.answer,
            question_type: e.question_type,
            planted: e.planted.clone(),
        });
    }
    let ds = Dataset {
        manifest,
        samples,
        bundles,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_type_json_shape() {
        let qt = QuestionType {
            modality: Modality::AudioVisual,
            kind: QuestionKind::Temporal,
        };
        let s = serde_json::to_string(&qt).unwrap();
        assert_eq!(s, r#"{"modality":"audio-visual","kind":"temporal"}"#);
        assert_eq!(qt.to_string(), "audio-visual/temporal");
    }

    #[test]
    fn avqq_rejects_payload_mismatch() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(AVQQ_MAGIC);
        put_u32(&mut bytes, 1);
        put_u32(&mut bytes, u32::MAX);
        put_u32(&mut bytes, u32::MAX);
        assert!(matches!(
            decode_question_features(&bytes),
            Err(TspmError::Format { .. })
        ));
    }

    #[test]
    fn overlapping_splits_detected() {
        let entry = ManifestEntry {
            sample_id: "s0".into(),
            video_id: "v0".into(),
            question_text: "q".into(),
            template_id: "t".into(),
            answer: 0,
            question_type: QuestionType::default(),
            planted: None,
        };
        let m = |split| DatasetManifest {
            split,
            num_answers: 1,
            answer_vocab: vec!["a".into()],
            entries: vec![entry.clone()],
        };
        assert!(validate_disjoint(&[&m(Split::Train), &m(Split::Test)]).is_err());
        assert!(validate_disjoint(&[&m(Split::Train)]).is_ok());
    }
}
