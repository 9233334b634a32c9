//! Heatmap decoding, PCK scoring and resolution sweeps.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Resolution, SyntheticSample};
use crate::error::{invalid, shape_mismatch, Result};
use crate::model::{predict_batch, stack, ModelConfig, ModelParams};
use crate::tensor::{resize, Interp, Tensor};

const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub resolution: Resolution,
    /// Fraction in `[0, 1]`.
    pub pck: f64,
    /// Mean Euclidean error in native pixels.
    pub mean_pixel_error: f64,
    pub n_samples: usize,
}

/// Per-channel argmax of an `[h, w, K]` heatmap as (row, col) grid cells.
/// Ties go to the smallest row, then the smallest column.
pub fn decode(heatmaps: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (h, w, k) = heatmaps.hwc()?;
    let d = heatmaps.data();
    let mut out = Vec::with_capacity(k);
    for ch in 0..k {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..h {
            for c in 0..w {
                let v = d[(r * w + c) * k + ch];
                if v > best_v {
                    best_v = v;
                    best = (r, c);
                }
            }
        }
        if best_v.is_nan() {
            return Err(invalid(format!("channel {ch} has no finite maximum")));
        }
        out.push(best);
    }
    Ok(out)
}

/// Center of grid cell `cell` at inference resolution `inference`, mapped to
/// the native pixel frame.
pub fn grid_to_native(cell: (usize, usize), patch: usize, inference: Resolution, native: Resolution) -> (f64, f64) {
    let center = (patch as f64 - 1.0) / 2.0;
    let py = (cell.0 * patch) as f64 + center;
    let px = (cell.1 * patch) as f64 + center;
    (
        (py + 0.5) * native.h as f64 / inference.h as f64 - 0.5,
        (px + 0.5) * native.w as f64 / inference.w as f64 - 0.5,
    )
}

/// Fraction of keypoints within `tau · diag(native)` of the ground truth.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], tau: f64, native: Resolution) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_mismatch(format!(
            "{} predictions for {} keypoints",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(invalid("no keypoints"));
    }
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let thr = tau * native.diagonal();
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| dist(**p, **g) <= thr)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Score `params` on `eval_set` after resizing every native image through
/// `steps` in order; the last step's resolution is fed to the model.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    eval_set: &[SyntheticSample],
    steps: &[(Resolution, Interp)],
    tau: f64,
) -> Result<EvalResult> {
    let (inference, _) = *steps.last().ok_or_else(|| invalid("no inference resolution"))?;
    if !inference.divisible_by(config.patch) {
        return Err(invalid(format!(
            "inference resolution {inference} not divisible by patch size {}",
            config.patch
        )));
    }
    if eval_set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let scores: Vec<Vec<(f64, f64)>> = eval_set
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| score_chunk(params, config, chunk, steps, inference, tau))
        .collect::<Result<_>>()?;
    let (mut hits, mut err, mut count) = (0.0, 0.0, 0usize);
    for (h, e) in scores.into_iter().flatten() {
        hits += h;
        err += e;
        count += 1;
    }
    Ok(EvalResult {
        resolution: inference,
        pck: hits / count as f64,
        mean_pixel_error: err / count as f64,
        n_samples: eval_set.len(),
    })
}

/// Per-sample (pck, mean error) for one chunk.
fn score_chunk(
    params: &ModelParams,
    config: &ModelConfig,
    chunk: &[SyntheticSample],
    steps: &[(Resolution, Interp)],
    inference: Resolution,
    tau: f64,
) -> Result<Vec<(f64, f64)>> {
    let images = chunk
        .iter()
        .map(|s| {
            let mut img = s.image.clone();
            for &(r, m) in steps {
                if Resolution::new(img.shape()[0], img.shape()[1]) != r {
                    img = resize(&img, r.h, r.w, m)?;
                }
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let (hm, _) = predict_batch(params, config, stack(&refs)?)?;
    let per = hm.len() / chunk.len();
    let grid = &hm.shape()[1..];
    chunk
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let one = Tensor::new(grid.to_vec(), hm.data()[j * per..(j + 1) * per].to_vec())?;
            let native = s.resolution();
            let pred: Vec<(f64, f64)> = decode(&one)?
                .into_iter()
                .map(|c| grid_to_native(c, config.patch, inference, native))
                .collect();
            let p = pck(&pred, &s.keypoints, tau, native)?;
            let e = pred.iter().zip(&s.keypoints).map(|(a, b)| dist(*a, *b)).sum::<f64>()
                / pred.len() as f64;
            Ok((p, e))
        })
        .collect()
}

/// One [`EvalResult`] per resolution, resizing native images with `method`.
pub fn eval_sweep(
    params: &ModelParams,
    config: &ModelConfig,
    eval_set: &[SyntheticSample],
    resolutions: &[Resolution],
    method: Interp,
    tau: f64,
) -> Result<Vec<EvalResult>> {
    resolutions
        .iter()
        .map(|&r| evaluate(params, config, eval_set, &[(r, method)], tau))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(h: usize, w: usize, cells: &[(usize, usize)]) -> Tensor {
        let k = cells.len();
        let mut t = Tensor::zeros(&[h, w, k]);
        for (ch, &(r, c)) in cells.iter().enumerate() {
            t.data_mut()[(r * w + c) * k + ch] = 1.0;
        }
        t
    }

    #[test]
    fn decode_one_hot() {
        assert_eq!(decode(&one_hot(8, 6, &[(3, 5)])).unwrap(), vec![(3, 5)]);
    }

    #[test]
    fn decode_tie_rule() {
        let t = Tensor::full(&[4, 4, 2], 0.3);
        assert_eq!(decode(&t).unwrap(), vec![(0, 0), (0, 0)]);
        let mut t = Tensor::zeros(&[3, 3, 1]);
        t.data_mut()[5] = 1.0; // (1, 2)
        t.data_mut()[6] = 1.0; // (2, 0)
        assert_eq!(decode(&t).unwrap(), vec![(1, 2)]);
    }

    #[test]
    fn decode_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (h, w, k) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4));
            let t = Tensor::from_fn(&[h, w, k], |_| rng.gen_range(-1.0..1.0));
            let got = decode(&t).unwrap();
            for (ch, g) in got.iter().enumerate() {
                let mut best = (0, 0);
                for r in 0..h {
                    for c in 0..w {
                        let v = t.data()[(r * w + c) * k + ch];
                        if v > t.data()[(best.0 * w + best.1) * k + ch] {
                            best = (r, c);
                        }
                    }
                }
                assert_eq!(*g, best);
            }
        }
    }

    #[test]
    fn grid_round_trip_at_three_resolutions() {
        let native = Resolution::new(64, 48);
        for inference in [Resolution::new(32, 24), Resolution::new(64, 48), Resolution::new(128, 96)] {
            let gh = inference.h / 4;
            let gw = inference.w / 4;
            let cells = [(0, 0), (gh - 1, gw - 1), (gh / 2, gw / 3)];
            let decoded = decode(&one_hot(gh, gw, &cells)).unwrap();
            assert_eq!(decoded, cells.to_vec());
            for (cell, d) in cells.iter().zip(&decoded) {
                let p = grid_to_native(*d, 4, inference, native);
                // Cell centers in the native frame.
                let sy = native.h as f64 / gh as f64;
                let sx = native.w as f64 / gw as f64;
                let want = ((cell.0 as f64 + 0.5) * sy - 0.5, (cell.1 as f64 + 0.5) * sx - 0.5);
                assert!((p.0 - want.0).abs() < 1e-12 && (p.1 - want.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pck_cases() {
        let native = Resolution::new(30, 40); // diagonal 50, threshold 5
        let gt = [(10.0, 10.0), (20.0, 20.0), (5.0, 5.0), (0.0, 0.0)];
        assert_eq!(pck(&gt, &gt, 0.1, native).unwrap(), 1.0);
        let far: Vec<_> = gt.iter().map(|p| (p.0 + 6.0, p.1)).collect();
        assert_eq!(pck(&far, &gt, 0.1, native).unwrap(), 0.0);
        let mixed = [(13.0, 14.0), (20.0, 25.1), (5.0, 5.0), (4.0, 3.0)];
        // Distances 5, 5.1, 0, 5 -> three hits.
        assert_eq!(pck(&mixed, &gt, 0.1, native).unwrap(), 0.75);
        assert!(pck(&mixed[..2], &gt, 0.1, native).is_err());
        assert!(pck(&gt, &gt, 0.0, native).is_err());
    }

    #[test]
    fn pck_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let native = Resolution::new(64, 48);
        let gt: Vec<_> = (0..50).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0))).collect();
        let pred: Vec<_> = gt.iter().map(|p| (p.0 + rng.gen_range(-9.0..9.0), p.1 + rng.gen_range(-9.0..9.0))).collect();
        let mut last = 1.0;
        for tau in [0.3, 0.2, 0.1, 0.05, 0.01] {
            let v = pck(&pred, &gt, tau, native).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn sweep_shape_contract() {
        let c = ModelConfig::default();
        let data = gen_dataset(3, 64, 48, 5, 1).unwrap();
        let params = ModelParams::init(&c, 1);
        let res = [Resolution::new(32, 24), Resolution::new(64, 48), Resolution::new(128, 96)];
        let out = eval_sweep(&params, &c, &data, &res, Interp::Bilinear, 0.1).unwrap();
        assert_eq!(out.len(), 3);
        for (r, e) in res.iter().zip(&out) {
            assert_eq!(e.resolution, *r);
            assert_eq!(e.n_samples, 3);
            assert!((0.0..=1.0).contains(&e.pck));
        }
        assert!(eval_sweep(&params, &c, &data, &[Resolution::new(30, 22)], Interp::Bilinear, 0.1).is_err());
    }
}
