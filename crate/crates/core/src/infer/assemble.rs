use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};
use crate::fmse::{pad_tokens, ConditionBundle};

/// Longest accepted prompt, in seconds.
pub const MAX_PROMPT_S: f64 = 10.0;

/// `T2` prompt frames followed by `T1` generated frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceLayout {
    pub t1: usize,
    pub t2: usize,
}

impl InferenceLayout {
    pub fn total(&self) -> usize {
        self.t1 + self.t2
    }

    /// Frames `[T2, T2 + T1)` of an `F x (T1 + T2)` state.
    pub fn extract(&self, state: &Array2<f64>) -> Result<Array2<f64>> {
        if state.ncols() != self.total() {
            return Err(Error::Shape(format!("state has {} frames, layout {}", state.ncols(), self.total())));
        }
        Ok(state.slice(ndarray::s![.., self.t2..]).to_owned())
    }
}

/// Build the inference conditions over `T2 + T1` frames:
/// clean context `[prompt ; empty]`, degraded context `[empty ; degraded]`,
/// tokens `[prompt tokens ; purified tokens]` padded with the filler.
pub fn assemble_inference(
    prompt_mel: Option<&Array2<f64>>,
    prompt_tokens: &[u32],
    degraded_mel: &Array2<f64>,
    purified_tokens: &[u32],
    filler: u32,
    max_prompt_frames: usize,
) -> Result<(ConditionBundle, InferenceLayout)> {
    let (f, t1) = degraded_mel.dim();
    let t2 = prompt_mel.map_or(0, |p| p.ncols());
    if t2 > max_prompt_frames {
        return Err(Error::invalid(format!("prompt of {t2} frames exceeds the {max_prompt_frames}-frame cap")));
    }
    if let Some(p) = prompt_mel {
        if p.nrows() != f {
            return Err(Error::Shape(format!("prompt has {} mel bins, degraded {f}", p.nrows())));
        }
    }
    let layout = InferenceLayout { t1, t2 };
    let ctx_clean = match prompt_mel {
        Some(p) => concatenate(Axis(1), &[p.view(), Array2::zeros((f, t1)).view()]).map_err(|e| Error::Shape(e.to_string()))?,
        None => Array2::zeros((f, t1)),
    };
    let ctx_degraded =
        concatenate(Axis(1), &[Array2::zeros((f, t2)).view(), degraded_mel.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let mut ids: Vec<u32> = if t2 > 0 { prompt_tokens.to_vec() } else { Vec::new() };
    ids.extend_from_slice(purified_tokens);
    let total = layout.total();
    Ok((
        ConditionBundle {
            ctx_clean,
            clean_valid: (0..total).map(|j| j < t2).collect(),
            ctx_degraded,
            degraded_valid: (0..total).map(|j| j >= t2).collect(),
            tokens: pad_tokens(&ids, total, filler),
        },
        layout,
    ))
}
