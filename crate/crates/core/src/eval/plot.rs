use std::path::Path;

use image::{Rgb, RgbImage};

use super::font::{glyph, GLYPH_H, GLYPH_W};
use crate::audio::AudioBuffer;
use crate::dsp::{stft, MelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotConfig {
    pub width: u32,
    pub panel_height: u32,
    pub n_fft: usize,
    pub hop: usize,
    /// Dynamic range shown below each panel's maximum.
    pub range_db: f64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            width: 640,
            panel_height: 160,
            n_fft: 512,
            hop: 128,
            range_db: 80.0,
        }
    }
}

const LABEL_H: u32 = GLYPH_H + 6;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([20, 20, 20]);

/// Dark blue through green to yellow.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let i = STOPS.windows(2).position(|w| v <= w[1].0).unwrap_or(STOPS.len() - 2);
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let k = (v - a.0) / (b.0 - a.0);
    let c = |j: usize| (a.1[j] + k * (b.1[j] - a.1[j])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (n, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let gx = x0 + n as u32 * (GLYPH_W + 1);
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - c)) != 0 {
                    let (x, y) = (gx + c, y0 + r as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, INK);
                    }
                }
            }
        }
    }
}

/// dB magnitude spectrogram, `bins x frames`.
fn spectrogram_db(audio: &AudioBuffer, cfg: &PlotConfig) -> Result<Vec<Vec<f64>>> {
    let mc = MelConfig {
        name: "plot".into(),
        sample_rate: audio.sample_rate,
        n_fft: cfg.n_fft,
        hop: cfg.hop,
        win: cfg.n_fft,
        n_mels: 1,
        fmin: 0.0,
        fmax: audio.sample_rate as f64 / 2.0,
        log_floor: 1e-10,
    };
    let padded;
    let src = if audio.len() < cfg.n_fft {
        padded = audio.fit_length(cfg.n_fft);
        &padded
    } else {
        audio
    };
    let spec = stft(src, &mc)?;
    Ok(spec
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|c| 20.0 * (c.norm() + 1e-10).log10()).collect())
        .collect())
}

/// Stack one labelled log-magnitude spectrogram panel per input, top to
/// bottom, and write a PNG. Each panel spans its own signal's 0..Nyquist.
pub fn plot_spectrograms(audios: &[(&str, &AudioBuffer)], out_path: impl AsRef<Path>, cfg: &PlotConfig) -> Result<()> {
    if audios.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let panel = LABEL_H + cfg.panel_height;
    let mut img = RgbImage::from_pixel(cfg.width, panel * audios.len() as u32, BACKGROUND);
    for (p, (label, audio)) in audios.iter().enumerate() {
        let y_top = p as u32 * panel;
        let sr_khz = format!("{label} ({:.1} KHZ)", audio.sample_rate as f64 / 1000.0);
        draw_text(&mut img, 3, y_top + 3, &sr_khz);
        let db = spectrogram_db(audio, cfg)?;
        let (bins, frames) = (db.len(), db[0].len());
        let max = db.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        for px in 0..cfg.width {
            let f = ((px as f64 + 0.5) / cfg.width as f64 * frames as f64) as usize;
            for py in 0..cfg.panel_height {
                // low frequencies at the bottom
                let b = ((cfg.panel_height - 1 - py) as f64 + 0.5) / cfg.panel_height as f64 * bins as f64;
                let v = db[(b as usize).min(bins - 1)][f.min(frames - 1)];
                let norm = (v - (max - cfg.range_db)) / cfg.range_db;
                img.put_pixel(px, y_top + LABEL_H + py, colormap(norm));
            }
        }
    }
    img.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(())
}
