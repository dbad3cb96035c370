//! Slow, obviously-correct reference implementations used to pin down the
//! optimized kernels and metrics in tests.
//!
//! Everything here favors directness over speed: straight nested loops,
//! explicit frame sets, analytic image functions. Production code never
//! calls into this module; test code compares against it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Direct seven-loop 3x3x3 convolution, stride 1, zero padding 1.
///
/// Accumulates bias first, then input channels, then kernel offsets in
/// t/h/w order, exactly mirroring the optimized kernel so comparisons can
/// demand bitwise equality. Panics on malformed shapes; tests construct
/// the arguments.
pub fn conv3d_naive(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let [c_in, t, h, w] = input.dims4("conv3d_naive").expect("rank-4 input");
    let [c_out, wc_in, kt, kh, kw] = weight.dims5("conv3d_naive").expect("rank-5 weight");
    assert_eq!((kt, kh, kw), (3, 3, 3));
    assert_eq!(wc_in, c_in);
    assert_eq!(bias.dims1("conv3d_naive").expect("rank-1 bias"), c_out);

    let mut out = Tensor::zeros(&[c_out, t, h, w]);
    for co in 0..c_out {
        for to in 0..t {
            for ho in 0..h {
                for xo in 0..w {
                    let mut acc = bias.data()[co];
                    for ci in 0..c_in {
                        for dt in 0..3usize {
                            for dh in 0..3usize {
                                for dw in 0..3usize {
                                    let ti = to as isize + dt as isize - 1;
                                    let hi = ho as isize + dh as isize - 1;
                                    let xi = xo as isize + dw as isize - 1;
                                    if ti < 0
                                        || ti >= t as isize
                                        || hi < 0
                                        || hi >= h as isize
                                        || xi < 0
                                        || xi >= w as isize
                                    {
                                        continue;
                                    }
                                    let iidx = ((ci * t + ti as usize) * h + hi as usize) * w
                                        + xi as usize;
                                    let widx = ((((co * c_in + ci) * 3 + dt) * 3 + dh) * 3) + dw;
                                    acc += weight.data()[widx] * input.data()[iidx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((co * t + to) * h + ho) * w + xo] = acc;
                }
            }
        }
    }
    out
}

/// Direct max pooling with per-axis kernel extents, stride equal to the
/// kernel, and floor semantics.
pub fn maxpool3d_naive(input: &Tensor, kernel: [usize; 3]) -> Tensor {
    let [c, t, h, w] = input.dims4("maxpool3d_naive").expect("rank-4 input");
    let [kt, kh, kw] = kernel;
    let (ot, oh, ow) = (t / kt, h / kh, w / kw);
    assert!(ot > 0 && oh > 0 && ow > 0);
    let mut out = Tensor::zeros(&[c, ot, oh, ow]);
    for ch in 0..c {
        for to in 0..ot {
            for ho in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            for dx in 0..kw {
                                let v = input.data()[((ch * t + to * kt + dt) * h
                                    + ho * kh
                                    + dh)
                                    * w
                                    + xo * kw
                                    + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                    }
                    out.data_mut()[((ch * ot + to) * oh + ho) * ow + xo] = best;
                }
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn numeric_grad(f: &mut dyn FnMut(&Tensor) -> f64, at: &Tensor, eps: f64) -> Tensor {
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += eps;
        let mut minus = at.clone();
        minus.data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    grad
}

/// Smooth analytic test pattern: a seeded sum of low-frequency sinusoids
/// evaluated at continuous coordinates, with values in (0, 1).
///
/// Because the pattern is a closed-form function of `(x, y)`, a pair of
/// images sampled at offset coordinates realizes an exactly known uniform
/// displacement with no resampling error.
pub fn analytic_texture_at(seed: u64, x: f64, y: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = 0.5;
    for _ in 0..4 {
        // wavelengths between 12 and 40 pixels keep spatial gradients gentle
        let wavelength = 12.0 + 28.0 * rng.gen::<f64>();
        let angle = std::f64::consts::TAU * rng.gen::<f64>();
        let phase = std::f64::consts::TAU * rng.gen::<f64>();
        let amp = 0.08 + 0.04 * rng.gen::<f64>();
        let k = std::f64::consts::TAU / wavelength;
        v += amp * (k * (x * angle.cos() + y * angle.sin()) + phase).sin();
    }
    v
}

/// Row-major sampling of [`analytic_texture_at`] on an `h` by `w` grid.
pub fn seeded_texture(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut data = Vec::with_capacity(h * w);
    for yi in 0..h {
        for xi in 0..w {
            data.push(analytic_texture_at(seed, xi as f64, yi as f64));
        }
    }
    data
}

/// Two samplings of the same pattern where the second is displaced by
/// `(dx, dy)`: every feature in the first image appears `(dx, dy)` later in
/// the second, so the true flow from first to second is uniform.
pub fn shifted_texture_pair(
    h: usize,
    w: usize,
    seed: u64,
    dx: f64,
    dy: f64,
) -> (Vec<f64>, Vec<f64>) {
    let first = seeded_texture(h, w, seed);
    let mut second = Vec::with_capacity(h * w);
    for yi in 0..h {
        for xi in 0..w {
            second.push(analytic_texture_at(seed, xi as f64 - dx, yi as f64 - dy));
        }
    }
    (first, second)
}

/// Frame-set intersection over union of two half-open frame intervals,
/// computed by materializing the frame sets.
pub fn interval_iou_frames(a: (usize, usize), b: (usize, usize)) -> f64 {
    let set: Vec<usize> = (a.0..a.1).collect();
    let inter = set.iter().filter(|&&f| f >= b.0 && f < b.1).count();
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Whole-video intersection over union via explicit per-frame bitsets:
/// a frame counts as predicted (or annotated) if any interval covers it.
pub fn global_iou_bitset(
    pred: &[(usize, usize)],
    gt: &[(usize, usize)],
    frame_count: usize,
) -> f64 {
    let mut p = vec![false; frame_count];
    let mut g = vec![false; frame_count];
    for &(b, e) in pred {
        for f in b..e.min(frame_count) {
            p[f] = true;
        }
    }
    for &(b, e) in gt {
        for f in b..e.min(frame_count) {
            g[f] = true;
        }
    }
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Average precision by the book: stable-sort detections by descending
/// confidence (ties by earlier begin), match each in rank order against
/// its highest-overlap still-unmatched annotation (counting a true
/// positive only when that overlap clears the threshold; overlap ties go
/// to the earlier-listed annotation), and average the precision observed
/// at each true positive's rank over the number of annotations.
pub fn average_precision_bruteforce(
    dets: &[(f64, usize, usize)],
    gts: &[(usize, usize)],
    iou_threshold: f64,
) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].0
            .partial_cmp(&dets[i].0)
            .unwrap()
            .then(dets[i].1.cmp(&dets[j].1))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp_so_far = 0usize;
    let mut precision_sum = 0.0;
    for (rank, &di) in order.iter().enumerate() {
        let (_, b, e) = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = interval_iou_frames((b, e), gt);
            if best.map_or(true, |(_, b_iou)| iou > b_iou) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            if iou >= iou_threshold {
                matched[gi] = true;
                tp_so_far += 1;
                precision_sum += tp_so_far as f64 / (rank + 1) as f64;
            }
        }
    }
    precision_sum / gts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_iou_agrees_with_arithmetic() {
        assert_eq!(interval_iou_frames((0, 10), (0, 10)), 1.0);
        assert_eq!(interval_iou_frames((0, 10), (10, 20)), 0.0);
        assert!((interval_iou_frames((0, 10), (5, 15)) - 5.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn global_iou_handles_overlapping_intervals() {
        // two predictions covering [0,10) and [5,15) merge into [0,15)
        let got = global_iou_bitset(&[(0, 10), (5, 15)], &[(0, 15)], 20);
        assert_eq!(got, 1.0);
    }

    #[test]
    fn shifted_pair_realizes_the_displacement() {
        let (a, b) = shifted_texture_pair(24, 24, 3, 2.0, 1.0);
        // b at (x, y) equals a at (x-2, y-1) wherever both grid points exist
        for y in 1..24 {
            for x in 2..24 {
                let va = a[(y - 1) * 24 + (x - 2)];
                let vb = b[y * 24 + x];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn texture_values_stay_in_unit_range() {
        let t = seeded_texture(16, 16, 42);
        assert!(t.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bruteforce_ap_perfect_ranking() {
        let gts = vec![(0, 10), (20, 30)];
        let dets = vec![(0.9, 0, 10), (0.8, 20, 30)];
        assert_eq!(average_precision_bruteforce(&dets, &gts, 0.5), 1.0);
    }

    #[test]
    fn bruteforce_ap_false_positive_first() {
        let gts = vec![(0, 10)];
        // the confident detection misses, the weak one hits at rank 2
        let dets = vec![(0.9, 50, 60), (0.8, 0, 10)];
        let got = average_precision_bruteforce(&dets, &gts, 0.5);
        assert!((got - 0.5).abs() < 1e-15);
    }
}
