//! Verification scoring, TAR at fixed FAR, attention localization and
//! attention-map export.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentConfig, Dataset, LabeledSample, Pair, PairMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_FAR_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero-norm embedding"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Operating point: pairs scoring `>= threshold` are accepted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub tar: f64,
    pub threshold: f64,
}

/// TAR at the smallest threshold whose impostor acceptance rate does not
/// exceed `far_target`, by exact counting without interpolation. The
/// threshold sits just above the highest impostor score that must be
/// rejected, so ties with it are rejected too.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<OperatingPoint> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::invalid("tar_at_far needs genuine and impostor scores"));
    }
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(Error::invalid(format!("far_target must lie in (0, 1], got {far_target}")));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let n_imp = scores.impostor.len();
    if (n_imp as f64) < 1.0 / far_target {
        log::warn!("{n_imp} impostor scores cannot resolve FAR {far_target}");
    }
    let allowed = far_target * n_imp as f64;
    let mut imp = scores.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    // Largest k with k <= allowed impostors accepted; the threshold must
    // exclude imp[k] and everything tied with it.
    let k = (0..=n_imp).rev().find(|&k| k as f64 <= allowed).unwrap_or(0);
    let threshold = if k == n_imp {
        scores
            .genuine
            .iter()
            .chain(&scores.impostor)
            .copied()
            .fold(f64::INFINITY, f64::min)
    } else {
        imp[k].next_up()
    };
    let accepted = scores.genuine.iter().filter(|&&s| s >= threshold).count();
    Ok(OperatingPoint {
        tar: accepted as f64 / scores.genuine.len() as f64,
        threshold,
    })
}

/// Best single-threshold pair classification accuracy.
pub fn verification_accuracy(scores: &ScoreSet) -> Result<f64> {
    let n = scores.genuine.len() + scores.impostor.len();
    if n == 0 {
        return Err(Error::invalid("verification accuracy of zero pairs"));
    }
    let mut all: Vec<(f64, bool)> = scores
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(scores.impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // A threshold below every score accepts all pairs.
    let mut correct = scores.genuine.len();
    let mut best = correct;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        best = best.max(correct);
    }
    Ok(best as f64 / n as f64)
}

/// Sample with a forced mask overlay whose color depends on `(seed, index)`.
pub fn masked_probe(sample: &LabeledSample, cfg: &AugmentConfig, seed: u64, index: usize) -> LabeledSample {
    let pick = data::mix_seed(&[seed, 0x9b0be, index as u64]) as usize;
    data::apply_mask(sample, &AugmentConfig { ma_probability: 1.0, ..cfg.clone() }, 0.0, pick)
}

const EMBED_BATCH: usize = 128;

/// Eval-mode embeddings of `samples`, in order.
pub fn embed_samples<T: Real>(model: &Model<T>, samples: &[&LabeledSample]) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        let images = Dataset::stack(chunk.iter().copied())?.cast::<T>();
        let emb = model.embed(&images)?;
        let dim = emb.shape()[1];
        out.extend(emb.data().chunks(dim).map(<[T]>::to_vec));
    }
    Ok(out)
}

/// Embeds every image referenced by `pairs` once and scores all pairs in
/// list order. Masked probes are overlaid deterministically from `seed`.
pub fn score_pairs<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    pairs: &[Pair],
    mask_cfg: &AugmentConfig,
    seed: u64,
) -> Result<ScoreSet> {
    let n = dataset.len();
    let mut keys: Vec<(usize, bool)> = Vec::new();
    for p in pairs {
        if p.a >= n || p.b >= n {
            return Err(Error::invalid(format!(
                "pair ({}, {}) out of range for {n} samples",
                p.a, p.b
            )));
        }
        keys.push((p.a, p.probe_masked));
        keys.push((p.b, false));
    }
    keys.sort_unstable();
    keys.dedup();
    let owned: Vec<LabeledSample> = keys
        .iter()
        .map(|&(i, masked)| {
            if masked {
                masked_probe(&dataset.samples[i], mask_cfg, seed, i)
            } else {
                dataset.samples[i].clone()
            }
        })
        .collect();
    let refs: Vec<&LabeledSample> = owned.iter().collect();
    let embeddings = embed_samples(model, &refs)?;
    let cache: HashMap<(usize, bool), &Vec<T>> = keys.iter().copied().zip(&embeddings).collect();
    let mut scores = ScoreSet::default();
    for p in pairs {
        let s = cosine_similarity(cache[&(p.a, p.probe_masked)], cache[&(p.b, false)])?;
        if p.genuine {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub mode: PairMode,
    pub tar_at_far: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

pub fn far_key(far: f64) -> String {
    format!("{far}")
}

pub fn summarize(scores: &ScoreSet, mode: PairMode, far_grid: &[f64]) -> Result<VerificationSummary> {
    let mut tar = BTreeMap::new();
    for &far in far_grid {
        tar.insert(far_key(far), tar_at_far(scores, far)?.tar);
    }
    Ok(VerificationSummary {
        mode,
        tar_at_far: tar,
        accuracy: verification_accuracy(scores)?,
        genuine_pairs: scores.genuine.len(),
        impostor_pairs: scores.impostor.len(),
    })
}

/// Scores `pairs` and summarizes them over `far_grid`.
pub fn run_verification<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    pairs: &[Pair],
    far_grid: &[f64],
    mask_cfg: &AugmentConfig,
    seed: u64,
) -> Result<(ScoreSet, VerificationSummary)> {
    let mode = match pairs.first() {
        Some(p) if p.probe_masked => PairMode::MaskedProbe,
        _ => PairMode::Clean,
    };
    let scores = score_pairs(model, dataset, pairs, mask_cfg, seed)?;
    let summary = summarize(&scores, mode, far_grid)?;
    Ok((scores, summary))
}

/// Bilinear resize of a row-major `h × w` map with half-pixel centers.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Share of attention falling inside `region`, both at the same resolution.
pub fn attention_mass(attn: &[f64], region: &[bool]) -> Result<f64> {
    if attn.len() != region.len() {
        return Err(Error::ShapeMismatch {
            op: "attention_mass",
            lhs: vec![attn.len()],
            rhs: vec![region.len()],
        });
    }
    let total: f64 = attn.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid("attention map has no mass"));
    }
    let inside: f64 = attn.iter().zip(region).filter(|(_, &r)| r).map(|(a, _)| a).sum();
    Ok((inside / total).clamp(0.0, 1.0))
}

/// Map `k` of image `n` in an `[N, 1, h, w]` tensor, upsampled to `H × W`.
fn image_map<T: Real>(t: &Tensor<T>, n: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let (_, _, h, w) = t.dims4()?;
    let plane = &t.data()[n * h * w..(n + 1) * h * w];
    let vals: Vec<f64> = plane.iter().map(|v| v.f64()).collect();
    Ok(upsample_bilinear(&vals, h, w, out_h, out_w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub a_um_mass: f64,
    pub a_m_mass: f64,
    pub a_bg_mass: Option<f64>,
    /// Mean fraction of image pixels inside the mask region.
    pub region_share: f64,
    pub samples: usize,
}

/// Mean attention mass inside the mask region over forced-mask versions of
/// `samples`; `None` for models without attention.
pub fn localization<T: Real>(
    model: &Model<T>,
    samples: &[LabeledSample],
    mask_cfg: &AugmentConfig,
    seed: u64,
) -> Result<Option<LocalizationReport>> {
    let masked: Vec<LabeledSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| masked_probe(s, mask_cfg, seed, i))
        .filter(|s| s.masked)
        .collect();
    if masked.is_empty() {
        return Err(Error::invalid("no masked samples for localization"));
    }
    let (mut um, mut m, mut bg, mut share) = (0.0, 0.0, 0.0, 0.0);
    let mut has_bg = false;
    for chunk in masked.chunks(EMBED_BATCH) {
        let images = Dataset::stack(chunk)?.cast::<T>();
        let Some(maps) = model.attention_maps(&images)? else {
            return Ok(None);
        };
        for (i, s) in chunk.iter().enumerate() {
            let (h, w) = (s.height(), s.width());
            um += attention_mass(&image_map(&maps.a_um, i, h, w)?, &s.mask_region)?;
            m += attention_mass(&image_map(&maps.a_m, i, h, w)?, &s.mask_region)?;
            if let Some(a_bg) = &maps.a_bg {
                bg += attention_mass(&image_map(a_bg, i, h, w)?, &s.mask_region)?;
                has_bg = true;
            }
            share += s.region_share();
        }
    }
    let n = masked.len() as f64;
    Ok(Some(LocalizationReport {
        a_um_mass: um / n,
        a_m_mass: m / n,
        a_bg_mass: has_bg.then_some(bg / n),
        region_share: share / n,
        samples: masked.len(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub far_grid: Vec<f64>,
    pub n_genuine: usize,
    pub n_impostor: usize,
    pub seed: u64,
    pub localization_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            far_grid: DEFAULT_FAR_GRID.to_vec(),
            n_genuine: 2000,
            n_impostor: 10_000,
            seed: 0,
            localization_samples: 200,
        }
    }
}

/// Evaluation report of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: ModelVariant,
    pub ma: f64,
    /// Masked-probe against clean-gallery TAR per FAR.
    pub tar_at_far: BTreeMap<String, f64>,
    pub clean_tar_at_far: BTreeMap<String, f64>,
    pub clean_accuracy: f64,
    pub masked_accuracy: f64,
    pub a_um_mass_in_mask: Option<f64>,
    pub a_m_mass_in_mask: Option<f64>,
    pub a_bg_mass_in_mask: Option<f64>,
    pub mask_region_share: f64,
    pub seed: u64,
}

/// Clean and masked-probe verification plus localization on `dataset`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    cfg: &EvalConfig,
    mask_cfg: &AugmentConfig,
    ma: f64,
    seed: u64,
) -> Result<EvalReport> {
    let ids = dataset.identities();
    let genuine_avail: usize = {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &ids {
            *counts.entry(i).or_default() += 1;
        }
        counts.values().map(|&c| c * c.saturating_sub(1) / 2).sum()
    };
    let impostor_avail = ids.len() * ids.len().saturating_sub(1) / 2 - genuine_avail;
    let n_gen = cfg.n_genuine.min(genuine_avail);
    let n_imp = cfg.n_impostor.min(impostor_avail);
    let clean_pairs = data::make_verification_pairs(&ids, cfg.seed, n_gen, n_imp, PairMode::Clean)?;
    let masked_pairs = data::make_verification_pairs(&ids, cfg.seed, n_gen, n_imp, PairMode::MaskedProbe)?;
    let (_, clean) = run_verification(model, dataset, &clean_pairs, &cfg.far_grid, mask_cfg, cfg.seed)?;
    let (_, masked) = run_verification(model, dataset, &masked_pairs, &cfg.far_grid, mask_cfg, cfg.seed)?;
    let take = cfg.localization_samples.min(dataset.len());
    let stride = (dataset.len() / take.max(1)).max(1);
    let subset: Vec<LabeledSample> = dataset.samples.iter().step_by(stride).take(take).cloned().collect();
    let loc = localization(model, &subset, mask_cfg, cfg.seed)?;
    let share = subset
        .iter()
        .enumerate()
        .map(|(i, s)| masked_probe(s, mask_cfg, cfg.seed, i).region_share())
        .sum::<f64>()
        / subset.len().max(1) as f64;
    Ok(EvalReport {
        variant: model.variant(),
        ma,
        tar_at_far: masked.tar_at_far,
        clean_tar_at_far: clean.tar_at_far,
        clean_accuracy: clean.accuracy,
        masked_accuracy: masked.accuracy,
        a_um_mass_in_mask: loc.as_ref().map(|l| l.a_um_mass),
        a_m_mass_in_mask: loc.as_ref().map(|l| l.a_m_mass),
        a_bg_mass_in_mask: loc.as_ref().and_then(|l| l.a_bg_mass),
        mask_region_share: share,
        seed,
    })
}

// ------------------------------------------------------------------ export

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn scaled(values: &[f64], lo: f64, hi: f64) -> Vec<f32> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect()
}

/// Writes, per image, the input (`NNN_input.ppm`), each attention map
/// upsampled to image size and min-max scaled (`NNN_a_um.pgm`,
/// `NNN_a_m.pgm`, and `NNN_a_bg.pgm` for three-way modules), a sidecar
/// `NNN_scale.txt` with each map's pre-scaling range, and a side-by-side
/// `NNN_composite.ppm`. Returns the written paths.
pub fn export_attention<T: Real>(
    model: &Model<T>,
    samples: &[LabeledSample],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    if samples.is_empty() {
        return Ok(written);
    }
    let images = Dataset::stack(samples)?.cast::<T>();
    let maps = model
        .attention_maps(&images)?
        .ok_or_else(|| Error::invalid(format!("variant {} has no attention maps", model.variant())))?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let mut named: Vec<(&str, Vec<f64>)> = vec![
            ("a_um", image_map(&maps.a_um, i, h, w)?),
            ("a_m", image_map(&maps.a_m, i, h, w)?),
        ];
        if let Some(bg) = &maps.a_bg {
            named.push(("a_bg", image_map(bg, i, h, w)?));
        }
        let mut write = |name: String, bytes: &[u8]| -> Result<()> {
            let path = out_dir.join(name);
            data::write_file(&path, bytes)?;
            written.push(path);
            Ok(())
        };
        write(format!("{i:03}_input.ppm"), &data::encode_ppm(&s.image)?)?;
        let mut sidecar = String::from("# map\tmin\tmax\n");
        let plane = h * w;
        let panels = 1 + named.len();
        let mut composite = vec![0f32; 3 * plane * panels];
        let put = |composite: &mut [f32], panel: usize, ch: usize, p: usize, v: f32| {
            let (y, x) = (p / w, p % w);
            composite[ch * plane * panels + y * w * panels + panel * w + x] = v;
        };
        for p in 0..plane {
            for ch in 0..3 {
                put(&mut composite, 0, ch, p, s.image.data()[ch * plane + p]);
            }
        }
        for (k, (name, values)) in named.iter().enumerate() {
            let (lo, hi) = min_max(values);
            sidecar.push_str(&format!("{name}\t{lo:e}\t{hi:e}\n"));
            let grey = scaled(values, lo, hi);
            write(format!("{i:03}_{name}.pgm"), &data::encode_pgm(&grey, h, w)?)?;
            for (p, &v) in grey.iter().enumerate() {
                for ch in 0..3 {
                    put(&mut composite, k + 1, ch, p, v);
                }
            }
        }
        write(format!("{i:03}_scale.txt"), sidecar.as_bytes())?;
        let composite = Tensor::new([3, h, w * panels], composite)?;
        write(format!("{i:03}_composite.ppm"), &data::encode_ppm(&composite)?)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet { genuine: g.to_vec(), impostor: i.to_vec() }
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, -3.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &[-1.0, -2.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap().abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn tar_on_three_by_three_example() {
        let op = tar_at_far(&set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), 1.0 / 3.0).unwrap();
        assert_eq!(op.tar, 1.0);
        assert!(op.threshold > 0.2 && op.threshold <= 0.3);
    }

    #[test]
    fn separated_scores_give_full_tar() {
        let s = set(&[0.5, 0.6, 0.9], &[0.1, 0.2, 0.3, 0.4]);
        for far in [1e-3, 0.1, 0.25, 0.5, 1.0] {
            assert_eq!(tar_at_far(&s, far).unwrap().tar, 1.0);
        }
    }

    #[test]
    fn identical_distributions_give_tar_near_far() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        for far in [0.01, 0.1, 0.5] {
            assert!((tar_at_far(&set(&v, &v), far).unwrap().tar - far).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_at_the_cut_are_rejected() {
        let op = tar_at_far(&set(&[0.5, 0.6], &[0.5, 0.5, 0.1, 0.0]), 0.25).unwrap();
        assert_eq!(op.tar, 0.5);
    }

    #[test]
    fn tar_rejects_bad_inputs() {
        assert!(tar_at_far(&set(&[], &[0.1]), 0.1).is_err());
        assert!(tar_at_far(&set(&[0.1], &[0.1]), 0.0).is_err());
        assert!(tar_at_far(&set(&[f64::NAN], &[0.1]), 0.5).is_err());
    }

    #[test]
    fn accuracy_with_best_threshold() {
        assert_eq!(verification_accuracy(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(verification_accuracy(&set(&[0.9, 0.1], &[0.5, 0.2])).unwrap(), 0.75);
    }

    #[test]
    fn mass_examples() {
        let attn = vec![0.25; 100];
        assert!((attention_mass(&attn, &[true; 100]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(attention_mass(&attn, &[false; 100]).unwrap(), 0.0);
        let region: Vec<bool> = (0..100).map(|i| i < 30).collect();
        assert!((attention_mass(&attn, &region).unwrap() - 0.3).abs() < 1e-6);
        assert!(attention_mass(&[0.0; 4], &[true; 4]).is_err());
    }

    #[test]
    fn bilinear_preserves_constants_and_corners() {
        let up = upsample_bilinear(&[0.3; 16], 4, 4, 32, 32);
        assert!(up.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let ramp = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 8);
        assert_eq!(ramp[0], 0.0);
        assert_eq!(ramp[7], 1.0);
        assert!(ramp.windows(2).all(|w| w[1] >= w[0]));
    }
}
