//! Toy Fréchet distances on probe features, a second-difference motion
//! smoothness proxy, a contact-response probe and per-class reports.

mod probe;

use std::fmt::Write as _;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use probe::{train_probe, Probe, ProbeConfig, ProbeReport, FEATURE_DIM};

use crate::sprite_world::{cursor_mask, Clip, ClipMeta, SpriteClass};
use crate::stream_engine::{run_offline, Generator};
use crate::{Error, Result};

/// Mean and covariance of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Rows of `features` are samples. The covariance uses `n - 1`.
    pub fn from_rows(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let f = features.first().map_or(0, |r| r.len());
        if n == 0 || f == 0 {
            return Err(Error::RejectedInput("no features".into()));
        }
        if features.iter().any(|r| r.len() != f) {
            return Err(Error::RejectedInput("ragged feature rows".into()));
        }
        if n < f {
            tracing::warn!(count = n, dim = f, "fewer samples than feature dimensions");
        }
        let m = DMatrix::from_fn(n, f, |i, j| features[i][j]);
        let mean = DVector::from_fn(f, |j, _| m.column(j).mean());
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = (n.max(2) - 1) as f64;
        let cov = (centered.transpose() * &centered) / denom;
        Ok(Self { mean, cov, count: n })
    }

    /// From a `(N, F)` tensor.
    pub fn from_tensor(features: &Tensor) -> Result<Self> {
        let rows = features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Self::from_rows(&rows)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if min < -1e-6 * scale {
        return Err(Error::Numerical(format!(
            "{what} is not positive semidefinite: smallest eigenvalue {min:.3e}, largest magnitude {scale:.3e}"
        )));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, with the cross term computed as
/// `tr((Σa^½ Σb Σa^½)^½)` from eigendecompositions clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::RejectedInput(format!("feature dims {} and {} differ", a.dim(), b.dim())));
    }
    let ra = psd_sqrt(&a.cov, "first covariance")?;
    psd_sqrt(&b.cov, "second covariance")?;
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner, "covariance product")?.trace();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if d < -1e-6 {
        tracing::warn!(raw = d, "negative Fréchet distance clamped to zero");
    }
    Ok(d.max(0.0))
}

/// Expected squared second temporal difference of i.i.d. uniform pixels in
/// `[-1, 1]`: `(1 + 4 + 1) / 3`.
pub const WHITE_NOISE_SECOND_DIFF: f64 = 2.0;

/// MS-proxy of a `(T, 3, H, W)` video: `1 − mean((x[t+1] − 2x[t] + x[t−1])²) / 2`
/// clamped to `[0, 1]`.
pub fn motion_smoothness(video: &Tensor) -> Result<f64> {
    let t = video.dim(0)?;
    if t < 3 {
        return Err(Error::RejectedInput(format!("motion smoothness needs 3 frames, got {t}")));
    }
    let v = video.to_dtype(DType::F64)?;
    let d2 = ((v.narrow(0, 2, t - 2)? - (v.narrow(0, 1, t - 2)? * 2.0)?)? + v.narrow(0, 0, t - 2)?)?;
    let e = d2.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok((1.0 - e / WHITE_NOISE_SECOND_DIFF).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactResponse {
    pub pre_contact_motion: f64,
    pub post_contact_motion: f64,
    pub response_ratio: f64,
}

/// Smoothing term of the response ratio.
pub const CONTACT_DELTA: f64 = 1e-4;

/// Mean squared frame difference inside the object box, cursor pixels
/// excluded, before versus from the first contact on. `None` when the clip
/// has no contact or no pre-contact motion window.
pub fn contact_response_probe(generated: &Tensor, meta: &ClipMeta) -> Result<Option<ContactResponse>> {
    let (t, c, h, w) = generated.dims4()?;
    if c != 3 || t != meta.frames || h != meta.height || w != meta.width {
        return Err(Error::RejectedInput(format!(
            "video {:?} does not match clip {}x{}x{}",
            generated.dims(),
            meta.frames,
            meta.height,
            meta.width
        )));
    }
    let Some(first) = meta.first_contact() else {
        return Ok(None);
    };
    if first < 2 || first >= t {
        return Ok(None);
    }
    let [x0, y0, x1, y1] = meta.object_box;
    let x1 = x1.min(w);
    let y1 = y1.min(h);
    if x0 >= x1 || y0 >= y1 {
        return Ok(None);
    }
    let data = generated.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let px = |f: usize, ch: usize, y: usize, x: usize| data[((f * 3 + ch) * h + y) * w + x] as f64;
    let masks: Vec<Vec<bool>> = meta.cursor_track.iter().map(|p| cursor_mask(h, w, *p)).collect();
    let energy = |f: usize| {
        let (mut s, mut n) = (0.0, 0usize);
        for y in y0..y1 {
            for x in x0..x1 {
                if masks[f][y * w + x] || masks[f - 1][y * w + x] {
                    continue;
                }
                for ch in 0..3 {
                    let d = px(f, ch, y, x) - px(f - 1, ch, y, x);
                    s += d * d;
                }
                n += 3;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mean = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        r.map(energy).sum::<f64>() / n
    };
    let pre = mean(1..first);
    let post = mean(first..t);
    Ok(Some(ContactResponse {
        pre_contact_motion: pre,
        post_contact_motion: post,
        response_ratio: (post + CONTACT_DELTA) / (pre + CONTACT_DELTA),
    }))
}

fn tensor_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(x.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Per-frame probe features of each video, pooled into one sample.
pub fn frame_stats(probe: &Probe, videos: &[&Tensor]) -> Result<FeatureStats> {
    let mut rows = Vec::new();
    for v in videos {
        rows.extend(tensor_rows(&probe.embed_frames(v)?)?);
    }
    FeatureStats::from_rows(&rows)
}

/// One clip-level probe feature per video.
pub fn clip_stats(probe: &Probe, videos: &[&Tensor]) -> Result<FeatureStats> {
    let rows = videos
        .iter()
        .map(|v| Ok(probe.embed_clip(v)?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Class name or `overall`.
    pub class: String,
    pub clips: usize,
    pub toy_fid: f64,
    pub toy_fvd: f64,
    pub ms_proxy: f64,
    /// Mean response ratio over clips where the probe applies.
    pub contact_ratio: Option<f64>,
    pub pre_contact_motion: Option<f64>,
    pub post_contact_motion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<ReportRow>,
    pub fps: Option<f64>,
    pub first_block_latency_s: Option<f64>,
}

impl EvalReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report has an overall row")
    }

    pub fn row(&self, class: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// Aligned text table: FID, FVD, MS-proxy, contact ratio, latency, FPS.
    pub fn render_table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.label);
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>10} {:>10} {:>9} {:>9} {:>11} {:>8}",
            "class", "clips", "toy_FID", "toy_FVD", "MS-proxy", "contact", "latency(s)", "FPS"
        );
        for r in &self.rows {
            let overall = r.class == "overall";
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>9.4} {:>9} {:>11} {:>8}",
                r.class,
                r.clips,
                r.toy_fid,
                r.toy_fvd,
                r.ms_proxy,
                opt(r.contact_ratio, 2),
                if overall { opt(self.first_block_latency_s, 4) } else { "-".into() },
                if overall { opt(self.fps, 2) } else { "-".into() },
            );
        }
        s
    }
}

fn mean_opt(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn row_for(probe: &Probe, class: &str, pairs: &[(&Clip, &Tensor, &Tensor)]) -> Result<ReportRow> {
    if pairs.is_empty() {
        return Ok(ReportRow {
            class: class.into(),
            clips: 0,
            toy_fid: f64::NAN,
            toy_fvd: f64::NAN,
            ms_proxy: f64::NAN,
            contact_ratio: None,
            pre_contact_motion: None,
            post_contact_motion: None,
        });
    }
    let gen: Vec<&Tensor> = pairs.iter().map(|p| p.1).collect();
    let real: Vec<&Tensor> = pairs.iter().map(|p| p.2).collect();
    let toy_fid = frechet_distance(&frame_stats(probe, &gen)?, &frame_stats(probe, &real)?)?;
    let toy_fvd = frechet_distance(&clip_stats(probe, &gen)?, &clip_stats(probe, &real)?)?;
    let ms = gen.iter().map(|v| motion_smoothness(v)).collect::<Result<Vec<_>>>()?;
    let contact = pairs
        .iter()
        .map(|(c, g, _)| contact_response_probe(g, &c.meta))
        .collect::<Result<Vec<_>>>()?;
    let contact: Vec<ContactResponse> = contact.into_iter().flatten().collect();
    Ok(ReportRow {
        class: class.into(),
        clips: pairs.len(),
        toy_fid,
        toy_fvd,
        ms_proxy: ms.iter().sum::<f64>() / ms.len() as f64,
        contact_ratio: mean_opt(contact.iter().map(|c| c.response_ratio)),
        pre_contact_motion: mean_opt(contact.iter().map(|c| c.pre_contact_motion)),
        post_contact_motion: mean_opt(contact.iter().map(|c| c.post_contact_motion)),
    })
}

/// Compares generated videos with the clips' targets, per class and overall.
pub fn evaluate_videos(label: &str, probe: &Probe, clips: &[Clip], generated: &[Tensor]) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::RejectedInput("empty evaluation split".into()));
    }
    if clips.len() != generated.len() {
        return Err(Error::RejectedInput(format!(
            "{} clips but {} generated videos",
            clips.len(),
            generated.len()
        )));
    }
    let dev = generated[0].device();
    let targets = clips.iter().map(|c| c.target.to_tensor(dev)).collect::<Result<Vec<_>>>()?;
    let all: Vec<(&Clip, &Tensor, &Tensor)> = clips.iter().zip(generated).zip(&targets).map(|((c, g), t)| (c, g, t)).collect();
    let mut rows = Vec::new();
    for class in SpriteClass::ALL {
        let sel: Vec<_> = all.iter().copied().filter(|p| p.0.meta.sprite_class == class).collect();
        rows.push(row_for(probe, class.name(), &sel)?);
    }
    rows.push(row_for(probe, "overall", &all)?);
    Ok(EvalReport {
        label: label.into(),
        rows,
        fps: None,
        first_block_latency_s: None,
    })
}

/// Generates every clip of the split with a session and reports metrics,
/// mean FPS and mean first-block latency.
pub fn evaluate_checkpoint(label: &str, generator: Arc<Generator>, probe: &Probe, clips: &[Clip], seed: u64) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::RejectedInput("empty evaluation split".into()));
    }
    let mut generated = Vec::with_capacity(clips.len());
    let (mut fps, mut lat) = (Vec::new(), Vec::new());
    for (i, clip) in clips.iter().enumerate() {
        let out = run_offline(generator.clone(), clip, crate::rng::derive_seed(seed, i as u64))?;
        fps.push(out.stats.fps());
        if let Some(l) = out.stats.first_block_latency_ms {
            lat.push(l / 1000.0);
        }
        generated.push(out.frames);
    }
    let mut report = evaluate_videos(label, probe, clips, &generated)?;
    report.fps = mean_opt(fps.into_iter());
    report.first_block_latency_s = mean_opt(lat.into_iter());
    Ok(report)
}
