//! K-means semantic tokenizer over 50 Hz log-mel frames.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, TOKEN_RATE_HZ};
use crate::dsp::{mel_spectrogram, MelConfig};
use crate::error::{Error, Result};

pub const CODEBOOK_VERSION: &str = "kmeans-logmel-v1";
const MAX_ITERS: usize = 50;
const REL_SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    CleanReference,
    SaslmGenerated,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTokenSeq {
    pub ids: Vec<u32>,
    pub frame_rate: f64,
    pub source: TokenSource,
}

impl SemanticTokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Anything that maps 16 kHz audio to discrete semantic ids at a fixed rate.
pub trait Tokenizer {
    fn tokenize(&self, audio: &AudioBuffer) -> Result<SemanticTokenSeq>;
    fn vocab_size(&self) -> usize;
    fn frame_rate(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K x D`.
    pub centroids: Array2<f64>,
    pub version: String,
    pub mel: MelConfig,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid per row of `features` (`T x D`), ties to the lowest id.
    pub fn quantize(&self, features: ArrayView2<f64>) -> Vec<u32> {
        features.rows().into_iter().map(|f| nearest(&self.centroids, f).0 as u32).collect()
    }
}

impl Tokenizer for Codebook {
    fn tokenize(&self, audio: &AudioBuffer) -> Result<SemanticTokenSeq> {
        let feats = frame_features(audio, &self.mel)?;
        Ok(SemanticTokenSeq {
            ids: self.quantize(feats.view()),
            frame_rate: self.mel.frame_rate(),
            source: TokenSource::CleanReference,
        })
    }

    fn vocab_size(&self) -> usize {
        self.k()
    }

    fn frame_rate(&self) -> f64 {
        self.mel.frame_rate()
    }
}

/// Log-mel frames of `audio` as rows (`T x n_mels`). Audio must already be at
/// the profile rate; shorter-than-one-window input yields zero rows.
pub fn frame_features(audio: &AudioBuffer, mel: &MelConfig) -> Result<Array2<f64>> {
    if audio.sample_rate != TOKEN_RATE_HZ || audio.sample_rate != mel.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: mel.sample_rate,
            got: audio.sample_rate,
        });
    }
    if audio.len() < mel.win {
        return Ok(Array2::zeros((0, mel.n_mels)));
    }
    Ok(mel_spectrogram(audio, mel)?.values.reversed_axes().as_standard_layout().to_owned())
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Array2<f64>, f: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, f);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations (at most 50, or until the
/// largest centroid move is below 1e-6 relative to the data scale).
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if k < 2 {
        return Err(Error::invalid("codebook needs K >= 2"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} frames cannot seed {k} centroids")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, d));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!(
                "only {c} distinct frames available for {k} centroids"
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // Zero-weight rows must never be chosen.
        while dist[pick] == 0.0 {
            pick = (pick + n - 1) % n;
        }
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(r, centroids.row(c)));
        }
    }

    let scale = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12) / (n as f64).sqrt();
    for _ in 0..MAX_ITERS {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for r in data.rows() {
            let (j, _) = nearest(&centroids, r);
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &r;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = sums.row(j).mapv(|v| v / counts[j] as f64);
            shift = shift.max(sq_dist(new.view(), centroids.row(j)).sqrt());
            centroids.row_mut(j).assign(&new);
        }
        if shift / scale < REL_SHIFT_TOL {
            break;
        }
    }
    Ok(centroids)
}

/// Train a codebook over the tokenizer-profile frames of a 16 kHz corpus.
/// Requires at least `10 * k` frames in total.
pub fn train_codebook(corpus: &[AudioBuffer], k: usize, seed: u64, mel: &MelConfig) -> Result<Codebook> {
    let feats: Vec<Array2<f64>> = corpus.iter().map(|a| frame_features(a, mel)).collect::<Result<_>>()?;
    let total: usize = feats.iter().map(|f| f.nrows()).sum();
    if total < 10 * k {
        return Err(Error::invalid(format!(
            "too few frames to train codebook: {total} < 10 * K = {}",
            10 * k
        )));
    }
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Codebook {
        centroids: kmeans(data.view(), k, seed)?,
        version: CODEBOOK_VERSION.into(),
        mel: mel.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand_distr::{Distribution, Normal};

    fn speech16(seed: u64, dur: f64) -> AudioBuffer {
        synth::utterance(seed, synth::Speaker::from_seed(seed), dur, 16000).unwrap()
    }

    /// Plain Lloyd iterations from a fixed start; independent of `kmeans`.
    fn lloyd_oracle(data: &[[f64; 2]], mut c: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        for _ in 0..100 {
            let mut sums = vec![[0.0; 2]; c.len()];
            let mut counts = vec![0.0; c.len()];
            for p in data {
                let j = (0..c.len())
                    .min_by(|&a, &b| {
                        let da = (p[0] - c[a][0]).powi(2) + (p[1] - c[a][1]).powi(2);
                        let db = (p[0] - c[b][0]).powi(2) + (p[1] - c[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                sums[j][0] += p[0];
                sums[j][1] += p[1];
                counts[j] += 1.0;
            }
            for j in 0..c.len() {
                c[j] = [sums[j][0] / counts[j], sums[j][1] / counts[j]];
            }
        }
        c
    }

    #[test]
    fn distinct_constant_frames_are_a_fixed_point() {
        let k = 6;
        let mut data = Array2::<f64>::zeros((k * 10, 3));
        for i in 0..k * 10 {
            let j = (i % k) as f64;
            data.row_mut(i).assign(&ndarray::arr1(&[j, -j, 2.0 * j]));
        }
        let c = kmeans(data.view(), k, 3).unwrap();
        let mut firsts: Vec<f64> = c.column(0).to_vec();
        firsts.sort_by(f64::total_cmp);
        assert_eq!(firsts, (0..k).map(|j| j as f64).collect::<Vec<_>>());
        for row in c.rows() {
            assert_eq!(row[1], -row[0]);
            assert_eq!(row[2], 2.0 * row[0]);
        }
    }

    #[test]
    fn two_gaussian_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let means = [[-3.0, 1.0], [4.0, -2.0]];
        let pts: Vec<[f64; 2]> = (0..2000)
            .map(|i| {
                let m = means[i % 2];
                [m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
            })
            .collect();
        let data = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
        let c = kmeans(data.view(), 2, 1).unwrap();
        let oracle = lloyd_oracle(&pts, vec![[-1.0, 0.0], [1.0, 0.0]]);
        for m in &means {
            let near = c
                .rows()
                .into_iter()
                .map(|r| ((r[0] - m[0]).powi(2) + (r[1] - m[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(near < 0.05, "centroid {near} away from {m:?}");
        }
        for o in &oracle {
            let near = c
                .rows()
                .into_iter()
                .map(|r| ((r[0] - o[0]).powi(2) + (r[1] - o[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(near < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_codebook() {
        let corpus: Vec<_> = (0..3).map(|s| speech16(s, 1.0)).collect();
        let mel = MelConfig::tokenizer();
        let a = train_codebook(&corpus, 8, 5, &mel).unwrap();
        let b = train_codebook(&corpus, 8, 5, &mel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let corpus = vec![speech16(1, 1.0)];
        let err = train_codebook(&corpus, 16, 0, &MelConfig::tokenizer()).unwrap_err();
        assert!(err.to_string().contains("too few frames"), "{err}");
    }

    #[test]
    fn frames_at_a_centroid_map_to_it() {
        let cb = Codebook {
            centroids: ndarray::arr2(&[[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]]),
            version: CODEBOOK_VERSION.into(),
            mel: MelConfig::tokenizer(),
        };
        let feats = Array2::from_shape_fn((7, 2), |_| 1.0);
        assert_eq!(cb.quantize(feats.view()), vec![1; 7]);
        // equidistant frame goes to the lowest id
        let tie = ndarray::arr2(&[[0.5, 0.5]]);
        assert_eq!(cb.quantize(tie.view()), vec![0]);
    }

    #[test]
    fn tokenizing_centroid_frames_returns_their_indices() {
        let audio = speech16(4, 0.5);
        let mel = MelConfig::tokenizer();
        let feats = frame_features(&audio, &mel).unwrap();
        let cb = Codebook {
            centroids: feats.clone(),
            version: CODEBOOK_VERSION.into(),
            mel,
        };
        let ids = cb.tokenize(&audio).unwrap().ids;
        assert_eq!(ids, (0..feats.nrows() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn matches_exhaustive_nearest_neighbour() {
        let corpus: Vec<_> = (0..3).map(|s| speech16(10 + s, 1.0)).collect();
        let mel = MelConfig::tokenizer();
        let cb = train_codebook(&corpus, 12, 2, &mel).unwrap();
        let utt = speech16(99, 1.0);
        let ids = cb.tokenize(&utt).unwrap().ids;
        let feats = frame_features(&utt, &mel).unwrap();
        assert_eq!(ids.len(), 49);
        for (t, f) in feats.rows().into_iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for j in 0..cb.k() {
                let d: f64 = (0..f.len()).map(|i| (f[i] - cb.centroids[[j, i]]).powi(2)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            assert_eq!(ids[t] as usize, best.0);
        }
    }

    #[test]
    fn rejects_wrong_rate() {
        let cb = Codebook {
            centroids: ndarray::arr2(&[[0.0; 80], [1.0; 80]]),
            version: CODEBOOK_VERSION.into(),
            mel: MelConfig::tokenizer(),
        };
        let a = synth::utterance(1, synth::Speaker::from_seed(1), 0.5, 24000).unwrap();
        assert!(cb.tokenize(&a).is_err());
    }
}
