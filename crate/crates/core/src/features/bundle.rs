use std::path::Path;

use crate::binio::{checked_numel, put_f32s, put_u32, ByteReader};
use crate::error::{Result, TspmError};
use crate::tensor::Tensor;

pub const AVQF_MAGIC: &[u8; 4] = b"AVQF";
pub const AVQF_VERSION: u32 = 1;

/// One video's features: `audio` is `[T, D_a]`, `frames` is `[T, D_v]`
/// (frame-level CLS features) and `tokens` is `[T, M, D_v]` with the CLS
/// token at position 0 of every segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    pub audio: Tensor,
    pub frames: Tensor,
    pub tokens: Tensor,
}

impl FeatureBundle {
    pub fn new(video_id: impl Into<String>, audio: Tensor, frames: Tensor, tokens: Tensor) -> Result<Self> {
        let b = Self {
            video_id: video_id.into(),
            audio,
            frames,
            tokens,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn segments(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn visual_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (a, f, t) = (self.audio.shape(), self.frames.shape(), self.tokens.shape());
        let ok = a.len() == 2
            && f.len() == 2
            && t.len() == 3
            && a[0] == f[0]
            && t[0] == f[0]
            && t[2] == f[1]
            && t[1] >= 2;
        if !ok {
            return Err(TspmError::Contract(format!(
                "bundle {}: inconsistent shapes audio {a:?}, frames {f:?}, tokens {t:?}",
                self.video_id
            )));
        }
        if !(self.audio.all_finite() && self.frames.all_finite() && self.tokens.all_finite()) {
            return Err(TspmError::Contract(format!(
                "bundle {} contains non-finite values",
                self.video_id
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * (self.audio.numel() + self.frames.numel() + self.tokens.numel()));
        out.extend_from_slice(AVQF_MAGIC);
        put_u32(&mut out, AVQF_VERSION);
        for d in [
            self.segments(),
            self.tokens_per_frame(),
            self.audio_dim(),
            self.visual_dim(),
        ] {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, self.audio.data());
        put_f32s(&mut out, self.frames.data());
        put_f32s(&mut out, self.tokens.data());
        out
    }

    pub fn decode(video_id: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(AVQF_MAGIC)?;
        let version = r.u32("version")?;
        if version != AVQF_VERSION {
            return Err(TspmError::Format {
                offset: 4,
                reason: format!("unsupported AVQF version {version}"),
            });
        }
        let t = r.u32("T")? as usize;
        let m = r.u32("M")? as usize;
        let da = r.u32("D_a")? as usize;
        let dv = r.u32("D_v")? as usize;
        if t == 0 || m < 2 || da == 0 || dv == 0 {
            return Err(TspmError::Format {
                offset: 8,
                reason: format!("invalid header T={t} M={m} D_a={da} D_v={dv}"),
            });
        }
        let sizes = [
            checked_numel(&[t, da]),
            checked_numel(&[t, dv]),
            checked_numel(&[t, m, dv]),
        ];
        let total = sizes
            .iter()
            .try_fold(0usize, |acc, s| s.and_then(|s| acc.checked_add(s)))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.error("header dimensions overflow"))?;
        if total != r.remaining() {
            return Err(r.error(format!(
                "header declares {total} payload bytes but {} remain",
                r.remaining()
            )));
        }
        let audio = r.f32s(t * da, "audio")?;
        let frames = r.f32s(t * dv, "frames")?;
        let tokens = r.f32s(t * m * dv, "tokens")?;
        let bundle = Self {
            video_id: video_id.to_string(),
            audio: Tensor::new(vec![t, da], audio)?,
            frames: Tensor::new(vec![t, dv], frames)?,
            tokens: Tensor::new(vec![t, m, dv], tokens)?,
        };
        bundle.validate().map_err(|e| TspmError::Format {
            offset: 24,
            reason: e.to_string(),
        })?;
        Ok(bundle)
    }
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, bundle.encode())?;
    Ok(())
}

/// Read an AVQF file; the video id is the file stem.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureBundle::decode(&id, &std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureBundle {
        let (t, m, da, dv) = (3, 2, 2, 4);
        let seq = |n: usize, k: f32| (0..n).map(|i| i as f32 * k - 1.0).collect::<Vec<_>>();
        FeatureBundle::new(
            "vid",
            Tensor::new(vec![t, da], seq(t * da, 0.5)).unwrap(),
            Tensor::new(vec![t, dv], seq(t * dv, 0.25)).unwrap(),
            Tensor::new(vec![t, m, dv], seq(t * m * dv, -0.125)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let b = tiny();
        assert_eq!(FeatureBundle::decode("vid", &b.encode()).unwrap(), b);
    }

    #[test]
    fn wrong_magic_rejected_at_offset_zero() {
        let mut bytes = tiny().encode();
        bytes[..4].copy_from_slice(b"NOPE");
        assert!(matches!(
            FeatureBundle::decode("vid", &bytes),
            Err(TspmError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn oversized_header_on_small_file_is_truncation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(AVQF_MAGIC);
        put_u32(&mut bytes, AVQF_VERSION);
        for d in [1u32 << 16, 1 << 8, 1 << 10, 1 << 10] {
            put_u32(&mut bytes, d);
        }
        bytes.resize(1024, 0);
        let err = FeatureBundle::decode("vid", &bytes).unwrap_err();
        assert!(matches!(err, TspmError::Format { offset: 24, .. }), "{err}");
    }

    #[test]
    fn single_token_frames_rejected() {
        let mut bytes = tiny().encode();
        bytes[12..16].copy_from_slice(&1u32.to_le_bytes());
        assert!(FeatureBundle::decode("vid", &bytes).is_err());
    }
}
