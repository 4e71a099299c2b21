//! Per-sample dumps of what the model looked at: segment weights, and the
//! audio attention over merged tokens mapped back to the original grid.

use std::fmt::Write as _;

use crate::error::{Result, TspmError};
use crate::features::Dataset;
use crate::model::Model;
use crate::train::{run_samples, SampleResult};

/// Locate `sample_id` among `splits`.
pub fn find_sample<'a>(splits: &'a [Dataset], sample_id: &str) -> Result<(&'a Dataset, usize)> {
    splits
        .iter()
        .find_map(|d| {
            d.samples
                .iter()
                .position(|s| s.sample_id == sample_id)
                .map(|i| (d, i))
        })
        .ok_or_else(|| TspmError::Contract(format!("no sample with id {sample_id:?}")))
}

/// Run `model` on one sample.
pub fn inspect_sample(model: &Model, data: &Dataset, index: usize) -> Result<SampleResult> {
    let mut r = run_samples(model, data, &[index])?;
    Ok(r.remove(0))
}

/// `t,weight,selected` for every segment.
pub fn temporal_csv(result: &SampleResult) -> String {
    let mut s = String::from("t,weight,selected\n");
    for (t, w) in result.weights.iter().enumerate() {
        let sel = u8::from(result.omega.contains(&t));
        let _ = writeln!(s, "{t},{w},{sel}");
    }
    s
}

/// Audio attention of one selected segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub segment: usize,
    /// Per merged token.
    pub merged_weights: Vec<f32>,
    pub provenance: Vec<Vec<usize>>,
    /// Per original token: its merged token's weight split evenly over that
    /// token's constituents.
    pub token_heat: Vec<f32>,
}

/// Sound-aware maps for every selected segment. Fails when the model has
/// no spatial branch.
pub fn spatial_maps(result: &SampleResult, tokens: usize) -> Result<Vec<SegmentMap>> {
    let (Some(attn), Some(prov)) = (&result.audio_attention, &result.provenance) else {
        return Err(TspmError::Contract(
            "model has no spatial branch to inspect".into(),
        ));
    };
    Ok(result
        .omega
        .iter()
        .zip(attn.iter().zip(prov))
        .map(|(&segment, (w, p))| {
            let mut heat = vec![0f32; tokens];
            for (&wi, members) in w.iter().zip(p) {
                for &j in members {
                    heat[j] += wi / members.len() as f32;
                }
            }
            SegmentMap {
                segment,
                merged_weights: w.clone(),
                provenance: p.clone(),
                token_heat: heat,
            }
        })
        .collect())
}

/// `segment,merged_token,weight,tokens` with constituents joined by `;`.
pub fn merged_csv(maps: &[SegmentMap]) -> String {
    let mut s = String::from("segment,merged_token,weight,tokens\n");
    for m in maps {
        for (i, (w, p)) in m.merged_weights.iter().zip(&m.provenance).enumerate() {
            let members: Vec<String> = p.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{},{i},{w},{}", m.segment, members.join(";"));
        }
    }
    s
}

/// `segment,token,heat` over the original token grid.
pub fn heat_csv(maps: &[SegmentMap]) -> String {
    let mut s = String::from("segment,token,heat\n");
    for m in maps {
        for (j, h) in m.token_heat.iter().enumerate() {
            let _ = writeln!(s, "{},{j},{h}", m.segment);
        }
    }
    s
}

/// Binary 8-bit PGM with one row per selected segment and one column per
/// original token, scaled so the hottest token is white.
pub fn heat_pgm(maps: &[SegmentMap]) -> Vec<u8> {
    let width = maps.first().map_or(0, |m| m.token_heat.len());
    let max = maps
        .iter()
        .flat_map(|m| m.token_heat.iter().copied())
        .fold(0f32, f32::max);
    let mut out = format!("P5\n{width} {}\n255\n", maps.len()).into_bytes();
    for m in maps {
        out.extend(m.token_heat.iter().map(|&h| {
            if max > 0.0 {
                (h / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    out
}
